"""Transformer sequence encoder over opcode-id sequences.

Post-norm layers, multi-head self-attention with pad masking, learned
positional embeddings, a summary token prepended at position 0 whose final
state is the path feature vector. Biases are omitted throughout; the
classifier head is a single bias-free matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    attention_mask_bias,
    dropout_backward,
    dropout_forward,
    embedding_backward,
    embedding_forward,
    gelu_backward,
    gelu_forward,
    layer_norm_backward,
    layer_norm_forward,
    linear_backward,
    linear_forward,
    softmax,
    softmax_backward,
)

PAD_ID = 0
CLS_ID = 1
TOKEN_OFFSET = 2  # first opcode id


@dataclass
class EncoderConfig:
    vocab_size: int
    embed_dim: int = 128
    hidden: int = 312
    ff: int = 1200
    heads: int = 12
    layers: int = 4
    max_len: int = 512
    n_classes: int = 2

    def __post_init__(self) -> None:
        if self.hidden % self.heads:
            raise ValueError("hidden size must divide evenly over heads")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator,
                        emb_scale: float = 0.02) -> dict[str, np.ndarray]:
    """Variance-preserving init for the projection matrices (training starts
    from scratch at arbitrary widths); embedding tables at a small scale,
    their magnitude is absorbed by the embedding layer norm anyway."""
    p: dict[str, np.ndarray] = {}

    def xavier(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))

    p["enc.tok_emb"] = rng.normal(0.0, emb_scale, size=(cfg.vocab_size, cfg.embed_dim))
    p["enc.pos_emb"] = rng.normal(0.0, emb_scale, size=(cfg.max_len, cfg.embed_dim))
    p["enc.w_in"] = xavier(cfg.embed_dim, cfg.hidden)
    p["enc.ln_in.g"] = np.ones(cfg.hidden)
    p["enc.ln_in.b"] = np.zeros(cfg.hidden)
    for i in range(cfg.layers):
        pre = f"enc.L{i}."
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = xavier(cfg.hidden, cfg.hidden)
        p[pre + "ln1.g"] = np.ones(cfg.hidden)
        p[pre + "ln1.b"] = np.zeros(cfg.hidden)
        p[pre + "w1"] = xavier(cfg.hidden, cfg.ff)
        p[pre + "w2"] = xavier(cfg.ff, cfg.hidden)
        p[pre + "ln2.g"] = np.ones(cfg.hidden)
        p[pre + "ln2.b"] = np.zeros(cfg.hidden)
    p["cls.w"] = xavier(cfg.hidden, cfg.n_classes)
    return p


def pack_sequences(sequences: list[list[int]], max_len: int) -> np.ndarray:
    """Prepend the summary token, truncate to max_len, pad to the batch max."""
    for seq in sequences:
        if not seq:
            raise ValueError("cannot encode an empty opcode sequence")
    clipped = [[CLS_ID] + list(seq)[:max_len - 1] for seq in sequences]
    width = max(len(s) for s in clipped)
    ids = np.full((len(clipped), width), PAD_ID, dtype=np.int64)
    for r, seq in enumerate(clipped):
        ids[r, :len(seq)] = seq
    return ids


def encoder_forward(params: dict, cfg: EncoderConfig, ids: np.ndarray, *,
                    train: bool = False, rng: np.random.Generator | None = None,
                    dropout: float = 0.0):
    """ids (B, T) -> per-sequence feature vectors (B, hidden) plus cache."""
    B, T = ids.shape
    pad = ids == PAD_ID
    bias = attention_mask_bias(pad)
    cache: dict = {"ids": ids, "bias": bias, "layers": []}

    emb = embedding_forward(params["enc.tok_emb"], ids) + params["enc.pos_emb"][:T]
    x, cache["in_lin"] = linear_forward(emb, params["enc.w_in"]), emb
    x, cache["ln_in"] = layer_norm_forward(x, params["enc.ln_in.g"], params["enc.ln_in.b"])
    x, cache["drop_in"] = dropout_forward(x, dropout, rng, train)

    H, nh, hd = cfg.hidden, cfg.heads, cfg.head_dim
    for i in range(cfg.layers):
        pre = f"enc.L{i}."
        lc: dict = {"x": x}
        q = linear_forward(x, params[pre + "wq"])
        k = linear_forward(x, params[pre + "wk"])
        v = linear_forward(x, params[pre + "wv"])

        def split(m):
            return m.reshape(B, T, nh, hd).transpose(0, 2, 1, 3)

        qh, kh, vh = split(q), split(k), split(v)
        scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(hd) + bias
        probs = softmax(scores)
        probs_d, lc["drop_p"] = dropout_forward(probs, dropout, rng, train)
        ctx = (probs_d @ vh).transpose(0, 2, 1, 3).reshape(B, T, H)
        attn = linear_forward(ctx, params[pre + "wo"])
        attn, lc["drop_a"] = dropout_forward(attn, dropout, rng, train)
        h1, lc["ln1"] = layer_norm_forward(x + attn, params[pre + "ln1.g"], params[pre + "ln1.b"])

        ff_mid = linear_forward(h1, params[pre + "w1"])
        ff_act, lc["gelu"] = gelu_forward(ff_mid)
        ff_out = linear_forward(ff_act, params[pre + "w2"])
        ff_out, lc["drop_f"] = dropout_forward(ff_out, dropout, rng, train)
        x, lc["ln2"] = layer_norm_forward(h1 + ff_out, params[pre + "ln2.g"], params[pre + "ln2.b"])

        lc.update(qh=qh, kh=kh, vh=vh, probs=probs, probs_d=probs_d, ctx=ctx, h1=h1,
                  ff_mid=ff_mid, ff_act=ff_act)
        cache["layers"].append(lc)

    cache["out"] = x
    return x[:, 0, :], cache


def encoder_backward(params: dict, cfg: EncoderConfig, cache: dict,
                     dfeat: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of every encoder tensor given d(loss)/d(feature vectors)."""
    grads: dict[str, np.ndarray] = {}
    ids = cache["ids"]
    B, T = ids.shape
    H, nh, hd = cfg.hidden, cfg.heads, cfg.head_dim

    dx = np.zeros_like(cache["out"])
    dx[:, 0, :] = dfeat

    for i in reversed(range(cfg.layers)):
        pre = f"enc.L{i}."
        lc = cache["layers"][i]

        dh1_plus_ff, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = layer_norm_backward(lc["ln2"], dx)
        dff_out = dropout_backward(lc["drop_f"], dh1_plus_ff)
        dff_act, grads[pre + "w2"] = linear_backward(lc["ff_act"], params[pre + "w2"], dff_out)
        dff_mid = gelu_backward(lc["gelu"], dff_act)
        dh1_ff, grads[pre + "w1"] = linear_backward(lc["h1"], params[pre + "w1"], dff_mid)
        dh1 = dh1_plus_ff + dh1_ff

        dx_plus_attn, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = layer_norm_backward(lc["ln1"], dh1)
        dattn = dropout_backward(lc["drop_a"], dx_plus_attn)
        dctx, grads[pre + "wo"] = linear_backward(lc["ctx"], params[pre + "wo"], dattn)
        dctx_h = dctx.reshape(B, T, nh, hd).transpose(0, 2, 1, 3)

        dprobs_d = dctx_h @ lc["vh"].transpose(0, 1, 3, 2)
        dvh = lc["probs_d"].transpose(0, 1, 3, 2) @ dctx_h
        dprobs = dropout_backward(lc["drop_p"], dprobs_d)
        dscores = softmax_backward(lc["probs"], dprobs) / np.sqrt(hd)
        dqh = dscores @ lc["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ lc["qh"]

        def merge(m):
            return m.transpose(0, 2, 1, 3).reshape(B, T, H)

        x_in = lc["x"]
        dq, grads[pre + "wq"] = linear_backward(x_in, params[pre + "wq"], merge(dqh))
        dk, grads[pre + "wk"] = linear_backward(x_in, params[pre + "wk"], merge(dkh))
        dv, grads[pre + "wv"] = linear_backward(x_in, params[pre + "wv"], merge(dvh))
        dx = dx_plus_attn + dq + dk + dv

    dx = dropout_backward(cache["drop_in"], dx)
    demb_lin, grads["enc.ln_in.g"], grads["enc.ln_in.b"] = layer_norm_backward(cache["ln_in"], dx)
    demb, grads["enc.w_in"] = linear_backward(cache["in_lin"], params["enc.w_in"], demb_lin)
    grads["enc.tok_emb"] = embedding_backward(params["enc.tok_emb"].shape, ids, demb)
    dpos = demb.sum(axis=0)
    grads["enc.pos_emb"] = np.zeros_like(params["enc.pos_emb"])
    grads["enc.pos_emb"][:T] = dpos
    return grads
