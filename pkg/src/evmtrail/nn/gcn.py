"""Two-layer graph convolution with a rectifier between the layers.

Both propagation steps use the same symmetric-normalized adjacency; the
second layer emits per-node class logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import dropout_backward, dropout_forward, relu_backward, relu_forward


@dataclass
class GcnConfig:
    in_dim: int = 312
    hidden: int = 200
    n_classes: int = 2


def init_gcn_params(cfg: GcnConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    def glorot(fan_in: int, fan_out: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    return {
        "gcn.w1": glorot(cfg.in_dim, cfg.hidden),
        "gcn.w2": glorot(cfg.hidden, cfg.n_classes),
    }


def gcn_forward(params: dict, a_hat: np.ndarray, x: np.ndarray, *,
                train: bool = False, rng: np.random.Generator | None = None,
                dropout: float = 0.0):
    """Node features (N, in_dim) -> logits (N, n_classes) plus cache."""
    x_d, drop_x = dropout_forward(x, dropout, rng, train)
    ax = a_hat @ x_d
    pre = ax @ params["gcn.w1"]
    hidden, relu_cache = relu_forward(pre)
    hidden_d, drop_h = dropout_forward(hidden, dropout, rng, train)
    ah = a_hat @ hidden_d
    logits = ah @ params["gcn.w2"]
    cache = {"a_hat": a_hat, "ax": ax, "relu": relu_cache, "ah": ah,
             "drop_x": drop_x, "drop_h": drop_h}
    return logits, cache


def gcn_backward(params: dict, cache: dict, dlogits: np.ndarray):
    """Returns (grads, dx) where dx is the gradient on the input features."""
    a_hat = cache["a_hat"]
    grads = {"gcn.w2": cache["ah"].T @ dlogits}
    dah = dlogits @ params["gcn.w2"].T
    dhidden_d = a_hat.T @ dah
    dhidden = dropout_backward(cache["drop_h"], dhidden_d)
    dpre = relu_backward(cache["relu"], dhidden)
    grads["gcn.w1"] = cache["ax"].T @ dpre
    dax = dpre @ params["gcn.w1"].T
    dx_d = a_hat.T @ dax
    dx = dropout_backward(cache["drop_x"], dx_d)
    return grads, dx
