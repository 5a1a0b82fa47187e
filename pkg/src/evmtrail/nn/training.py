"""Joint training of the sequence encoder and the graph network.

The graph side is full-batch (transductive, whole graph each step) while the
encoder sees mini-batches; one optimizer step updates both. The loss is the
class-weighted cross entropy applied to the interpolated distribution
Y = lam * Y_graph + (1 - lam) * Y_seq, and every gradient is computed by
hand and verified against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..featgraph import GraphArtifacts, HeteroGraph, normalize_adjacency
from .encoder import (
    EncoderConfig,
    TOKEN_OFFSET,
    encoder_backward,
    encoder_forward,
    init_encoder_params,
    pack_sequences,
)
from .gcn import GcnConfig, gcn_backward, gcn_forward, init_gcn_params
from .layers import log_sum_exp, softmax, softmax_backward


@dataclass
class TrainConfig:
    lr_encoder: float = 1e-5
    lr_gcn: float = 1e-3
    dropout: float = 0.5
    batch_size: int = 64
    lam: float = 0.7
    epochs: int = 200
    seed: int = 0
    truncation: int = 512
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: str = "classes"  # or "samples"
    loss_reduction: str = "classes"  # or "batch"
    stop_at_train_acc: float | None = None
    min_epochs: int = 1  # earliest epoch at which stop_at_train_acc may fire

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be within [0, 1]")
        if self.truncation < 1:
            raise ValueError("truncation must be >= 1")


def class_weights(labels: list[int] | np.ndarray, scheme: str = "classes") -> np.ndarray:
    """Per-class loss weights from label counts.

    "classes": number of categories divided by the class count (the default).
    "samples": number of samples divided by the class count.
    """
    labels = np.asarray(labels)
    counts = np.array([(labels == 0).sum(), (labels == 1).sum()], dtype=np.float64)
    if (counts == 0).any():
        raise ValueError("both classes must be present to compute class weights")
    numerator = 2.0 if scheme == "classes" else float(labels.size)
    return numerator / counts


def weighted_cross_entropy(logits: np.ndarray, target: int, weights: np.ndarray) -> float:
    """Per-sample weighted cross entropy on raw logits, computed stably."""
    logits = np.asarray(logits, dtype=np.float64)
    return float(weights[target] * (-logits[target] + log_sum_exp(logits)))


def nll_batch_loss(probs: np.ndarray, labels: np.ndarray, weights: np.ndarray,
                   reduction: str = "classes") -> float:
    """Weighted negative log likelihood of given probability rows.

    Summed weighted per-sample losses divided by the number of classes
    ("classes") or by the batch size ("batch").
    """
    picked = probs[np.arange(len(labels)), labels]
    total = float((weights[labels] * -np.log(picked)).sum())
    divisor = probs.shape[1] if reduction == "classes" else len(labels)
    return total / divisor


def interpolate(y_gcn: np.ndarray, y_seq: np.ndarray, lam: float) -> np.ndarray:
    """Convex combination of the two probability distributions."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must be within [0, 1]")
    return lam * y_gcn + (1.0 - lam) * y_seq


def init_path_nodes(graph: HeteroGraph, path_features: np.ndarray) -> np.ndarray:
    """Node-feature matrix: path rows carry features, opcode rows stay zero."""
    x = np.zeros((graph.n_nodes, path_features.shape[1]), dtype=np.float64)
    x[:graph.n_path] = path_features
    return x


def init_params(enc_cfg: EncoderConfig, gcn_cfg: GcnConfig,
                rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = init_encoder_params(enc_cfg, rng)
    params.update(init_gcn_params(gcn_cfg, rng))
    return params


def joint_loss_and_grads(params: dict, enc_cfg: EncoderConfig, gcn_cfg: GcnConfig,
                         ids: np.ndarray, labels: np.ndarray, a_hat: np.ndarray,
                         bank: np.ndarray, batch_rows: np.ndarray, weights: np.ndarray,
                         lam: float, reduction: str = "classes", *,
                         train: bool = False, rng: np.random.Generator | None = None,
                         dropout: float = 0.0, want_grads: bool = True):
    """One joint forward (and optionally backward) pass.

    `bank` holds features for every path node; rows in `batch_rows` are
    replaced by live encoder outputs for `ids`, so gradients reach the
    encoder both through its classification head and through the graph.
    """
    feats, enc_cache = encoder_forward(params, enc_cfg, ids, train=train, rng=rng,
                                       dropout=dropout)
    logits_seq = feats @ params["cls.w"]
    y_seq = softmax(logits_seq)

    n_path = bank.shape[0]
    xg = np.zeros((a_hat.shape[0], bank.shape[1]), dtype=np.float64)
    xg[:n_path] = bank
    xg[batch_rows] = feats
    gcn_logits, gcn_cache = gcn_forward(params, a_hat, xg, train=train, rng=rng,
                                        dropout=dropout)
    y_gcn = softmax(gcn_logits[batch_rows])

    y = interpolate(y_gcn, y_seq, lam)
    loss = nll_batch_loss(y, labels, weights, reduction)
    if not want_grads:
        return loss, y, (y_gcn, y_seq)

    divisor = y.shape[1] if reduction == "classes" else len(labels)
    dy = np.zeros_like(y)
    rows = np.arange(len(labels))
    dy[rows, labels] = -weights[labels] / y[rows, labels] / divisor

    dlogits_seq = softmax_backward(y_seq, (1.0 - lam) * dy)
    dlogits_gcn = np.zeros_like(gcn_logits)
    dlogits_gcn[batch_rows] = softmax_backward(y_gcn, lam * dy)

    grads, dxg = gcn_backward(params, gcn_cache, dlogits_gcn)
    grads["cls.w"] = feats.T @ dlogits_seq
    dfeats = dlogits_seq @ params["cls.w"].T + dxg[batch_rows]
    grads.update(encoder_backward(params, enc_cfg, enc_cache, dfeats))
    return loss, y, grads


class Adam:
    """Adaptive-moment optimizer with one learning rate per parameter group."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig) -> None:
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def lr_for(self, name: str) -> float:
        return self.cfg.lr_gcn if name.startswith("gcn.") else self.cfg.lr_encoder

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        bias1 = 1.0 - cfg.beta1 ** self.t
        bias2 = 1.0 - cfg.beta2 ** self.t
        for name, g in grads.items():
            m = self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            v = self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * g * g
            params[name] -= self.lr_for(name) * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)


@dataclass
class Prediction:
    probs: tuple[float, float]
    y_seq: tuple[float, float]
    y_gcn: tuple[float, float]

    @property
    def label(self) -> int:
        return int(self.probs[1] > self.probs[0])


def _encode_all(params, enc_cfg, sequences, truncation, batch_size=64):
    feats = np.zeros((len(sequences), enc_cfg.hidden), dtype=np.float64)
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start:start + batch_size]
        ids = pack_sequences(chunk, min(truncation, enc_cfg.max_len))
        feats[start:start + len(chunk)], _ = encoder_forward(params, enc_cfg, ids)
    return feats


def encode_path(params: dict, enc_cfg: EncoderConfig, token_ids: list[int],
                truncation: int | None = None) -> np.ndarray:
    """Feature vector of one opcode-id sequence; rejects empty input."""
    limit = min(truncation or enc_cfg.max_len, enc_cfg.max_len)
    feats, _ = encoder_forward(params, enc_cfg, pack_sequences([token_ids], limit))
    return feats[0]


def sequence_head(feature: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Class distribution from one feature vector through the bias-free head."""
    return softmax(np.atleast_2d(feature) @ weight)[0]


def _evaluate(params, enc_cfg, gcn_cfg, sequences, labels, a_hat, weights, cfg):
    bank = _encode_all(params, enc_cfg, sequences, cfg.truncation, cfg.batch_size)
    xg = np.zeros((a_hat.shape[0], bank.shape[1]), dtype=np.float64)
    xg[:bank.shape[0]] = bank
    gcn_logits, _ = gcn_forward(params, a_hat, xg)
    y_gcn = softmax(gcn_logits[:bank.shape[0]])
    y_seq = softmax(bank @ params["cls.w"])
    y = interpolate(y_gcn, y_seq, cfg.lam)
    loss = nll_batch_loss(y, labels, weights, cfg.loss_reduction)
    acc = float((y.argmax(axis=1) == labels).mean())
    return loss, acc, bank, y


def train(sequences: list[list[int]], labels: list[int], graph: HeteroGraph,
          enc_cfg: EncoderConfig, gcn_cfg: GcnConfig, cfg: TrainConfig):
    """Train on token-id sequences aligned with the graph's path nodes.

    Returns (params, history); history rows are {epoch, loss, train_acc}.
    """
    if not sequences:
        raise ValueError("training dataset is empty")
    if len(sequences) != graph.n_path:
        raise ValueError("graph path nodes must match the dataset")
    labels_arr = np.asarray(labels, dtype=np.int64)
    weights = class_weights(labels_arr, cfg.weights)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(enc_cfg, gcn_cfg, rng)
    optimizer = Adam(params, cfg)
    a_hat = normalize_adjacency(graph)

    bank = _encode_all(params, enc_cfg, sequences, cfg.truncation, cfg.batch_size)
    history: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(sequences))
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            ids = pack_sequences([sequences[r] for r in rows],
                                 min(cfg.truncation, enc_cfg.max_len))
            loss, _y, grads = joint_loss_and_grads(
                params, enc_cfg, gcn_cfg, ids, labels_arr[rows], a_hat, bank, rows,
                weights, cfg.lam, cfg.loss_reduction, train=True, rng=rng,
                dropout=cfg.dropout)
            optimizer.step(params, grads)
            feats, _ = encoder_forward(params, enc_cfg, ids)
            bank[rows] = feats
        loss, acc, bank, _y = _evaluate(params, enc_cfg, gcn_cfg, sequences, labels_arr,
                                        a_hat, weights, cfg)
        history.append({"epoch": epoch, "loss": loss, "train_acc": acc})
        if (cfg.stop_at_train_acc is not None and acc >= cfg.stop_at_train_acc
                and epoch >= cfg.min_epochs):
            break
    return params, history


@dataclass
class DetectorBundle:
    """Everything a trained detector needs at prediction time."""

    enc_cfg: EncoderConfig
    gcn_cfg: GcnConfig
    train_cfg: TrainConfig
    params: dict[str, np.ndarray]
    artifacts: GraphArtifacts
    bank: np.ndarray  # trained features of the training path nodes
    detector: str = ""
    labels: tuple[str, str] = ("benign", "malicious")

    def tokens(self, mnemonics: list[str]) -> list[int]:
        idx = self.artifacts.vocab.index
        return [idx[m] + TOKEN_OFFSET for m in mnemonics if m in idx]

    def predict(self, mnemonic_sequences: list[list[str]]) -> list[Prediction]:
        """Classify unseen paths attached as fresh nodes on the frozen graph."""
        if not mnemonic_sequences:
            return []
        graph = self.artifacts.graph_with(mnemonic_sequences, d=self.enc_cfg.hidden)
        a_hat = normalize_adjacency(graph)
        token_seqs = [self.tokens(seq) or [TOKEN_OFFSET] for seq in mnemonic_sequences]
        feats = _encode_all(self.params, self.enc_cfg, token_seqs,
                            self.train_cfg.truncation, self.train_cfg.batch_size)
        n_train = self.bank.shape[0]
        xg = np.zeros((graph.n_nodes, self.enc_cfg.hidden), dtype=np.float64)
        xg[:n_train] = self.bank
        xg[n_train:n_train + len(feats)] = feats
        gcn_logits, _ = gcn_forward(self.params, a_hat, xg)
        y_gcn = softmax(gcn_logits[n_train:n_train + len(feats)])
        y_seq = softmax(feats @ self.params["cls.w"])
        y = interpolate(y_gcn, y_seq, self.train_cfg.lam)
        return [
            Prediction(tuple(y[r]), tuple(y_seq[r]), tuple(y_gcn[r]))
            for r in range(len(feats))
        ]


def protocol_verdict(predictions: list[Prediction]) -> str:
    """Any malicious path marks the protocol; no paths means no evidence."""
    if not predictions:
        return "no-evidence"
    return "malicious" if any(p.label == 1 for p in predictions) else "benign"


# -- gradient verification ----------------------------------------------------

def _gcn_only_loss(params, a_hat, x, labels, weights, reduction):
    logits, cache = gcn_forward(params, a_hat, x)
    rows = np.arange(len(labels))
    probs = softmax(logits[rows])
    loss = nll_batch_loss(probs, labels, weights, reduction)
    dlogits = np.zeros_like(logits)
    dlogits[rows] = softmax_backward(
        probs, _nll_dprobs(probs, labels, weights, reduction))
    grads, _dx = gcn_backward(params, cache, dlogits)
    return loss, grads


def _nll_dprobs(probs, labels, weights, reduction):
    divisor = probs.shape[1] if reduction == "classes" else len(labels)
    d = np.zeros_like(probs)
    rows = np.arange(len(labels))
    d[rows, labels] = -weights[labels] / probs[rows, labels] / divisor
    return d


def gradient_check(params: dict, enc_cfg: EncoderConfig, gcn_cfg: GcnConfig,
                   sample: dict, mode: str = "full", lam: float = 0.5,
                   step: float = 1e-5) -> dict[str, float]:
    """Analytic vs central finite-difference gradients of the training loss.

    `sample` carries ids, labels, a_hat, bank, batch_rows and weights.
    Returns the per-tensor relative error (infinity-norm ratio); modes:
    "gcn" checks a graph-only loss on fixed features, "encoder" sets lam=0,
    "full" uses the interpolated loss.
    """
    ids = sample["ids"]
    labels = sample["labels"]
    a_hat = sample["a_hat"]
    bank = sample["bank"]
    batch_rows = sample["batch_rows"]
    weights = sample["weights"]
    reduction = sample.get("reduction", "classes")

    if mode == "gcn":
        x = np.zeros((a_hat.shape[0], bank.shape[1]))
        x[:bank.shape[0]] = bank

        def compute(want_grads: bool):
            if want_grads:
                return _gcn_only_loss(params, a_hat, x, labels, weights, reduction)
            loss, _ = _gcn_only_loss(params, a_hat, x, labels, weights, reduction)
            return loss
        tensors = [k for k in params if k.startswith("gcn.")]
    else:
        eff_lam = 0.0 if mode == "encoder" else lam

        def compute(want_grads: bool):
            out = joint_loss_and_grads(params, enc_cfg, gcn_cfg, ids, labels, a_hat,
                                       bank, batch_rows, weights, eff_lam, reduction,
                                       want_grads=want_grads)
            return (out[0], out[2]) if want_grads else out[0]
        if mode == "encoder":
            tensors = [k for k in params if not k.startswith("gcn.")]
        else:
            tensors = sorted(params)

    _loss, analytic = compute(True)
    errors: dict[str, float] = {}
    for name in tensors:
        tensor = params[name]
        numeric = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + step
            up = compute(False)
            flat[j] = keep - step
            down = compute(False)
            flat[j] = keep
            num_flat[j] = (up - down) / (2.0 * step)
        a = analytic.get(name, np.zeros_like(tensor))
        scale = max(np.abs(a).max(), np.abs(numeric).max(), 1e-12)
        errors[name] = float(np.abs(a - numeric).max() / scale)
    return errors
