"""Differentiable primitives: forward functions paired with manual backwards.

Caches hold exactly what the backward pass needs. All math is float64.
"""

from __future__ import annotations

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
_MASK_NEG = -1e30


def linear_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return x @ w


def linear_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    flat_x = x.reshape(-1, x.shape[-1])
    flat_dy = dy.reshape(-1, dy.shape[-1])
    dw = flat_x.T @ flat_dy
    dx = dy @ w.T
    return dx, dw


def layer_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                       eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layer_norm_backward(cache, dy: np.ndarray):
    xhat, inv, gamma = cache
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    dxhat = dy * gamma
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dgamma, dbeta


def gelu_forward(x: np.ndarray):
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(cache, dy: np.ndarray) -> np.ndarray:
    x, t = cache
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du)


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), (x > 0.0)


def relu_backward(cache, dy: np.ndarray) -> np.ndarray:
    return dy * cache


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray, axis: int = -1) -> np.ndarray:
    inner = (dprobs * probs).sum(axis=axis, keepdims=True)
    return probs * (dprobs - inner)


def log_sum_exp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def dropout_forward(x: np.ndarray, p: float, rng: np.random.Generator | None,
                    train: bool):
    if not train or p <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep, keep


def dropout_backward(cache, dy: np.ndarray) -> np.ndarray:
    return dy if cache is None else dy * cache


def embedding_forward(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    return table[ids]


def embedding_backward(table_shape, ids: np.ndarray, dy: np.ndarray) -> np.ndarray:
    grad = np.zeros(table_shape, dtype=np.float64)
    np.add.at(grad, ids.reshape(-1), dy.reshape(-1, dy.shape[-1]))
    return grad


def attention_mask_bias(pad_mask: np.ndarray) -> np.ndarray:
    """(B, T) pad flags -> additive key bias (B, 1, 1, T)."""
    bias = np.where(pad_mask, _MASK_NEG, 0.0)
    return bias[:, np.newaxis, np.newaxis, :]
