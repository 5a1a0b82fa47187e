"""Heterogeneous path/opcode graph construction.

Nodes are paths followed by opcodes. Opcode-opcode weights are sliding-window
PPMI, path-opcode weights are tf-idf, the diagonal is 1, and path-path
off-diagonal weights are 0. The symmetric matrix is stored packed
lower-triangular; symmetric degree normalization produces the propagation
matrix used by the graph network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_WINDOW = 20
DEFAULT_FEATURE_DIM = 312


@dataclass
class OpcodeVocabulary:
    """Dense mnemonic -> index map in first-occurrence order."""

    index: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_sequences(cls, sequences: list[list[str]]) -> "OpcodeVocabulary":
        vocab = cls()
        for seq in sequences:
            for mnemonic in seq:
                if mnemonic not in vocab.index:
                    vocab.index[mnemonic] = len(vocab.index)
        return vocab

    @property
    def mnemonics(self) -> list[str]:
        return sorted(self.index, key=self.index.__getitem__)

    def __len__(self) -> int:
        return len(self.index)


def _windows(seq: list[str], window: int) -> list[list[str]]:
    if len(seq) <= window:
        return [seq]
    return [seq[i:i + window] for i in range(len(seq) - window + 1)]


def compute_ppmi(sequences: list[list[str]], vocab: OpcodeVocabulary,
                 window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Positive PMI over sliding-window co-occurrence counts.

    Window presence is set-valued: a window containing a mnemonic twice
    counts once. Pairs that never co-occur weigh 0, and negatives clip to 0.
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    n = len(vocab)
    single = np.zeros(n, dtype=np.int64)
    pair = np.zeros((n, n), dtype=np.int64)
    total = 0
    for seq in sequences:
        for win in _windows(seq, window):
            total += 1
            present = sorted({vocab.index[m] for m in win})
            for a_pos, i in enumerate(present):
                single[i] += 1
                for j in present[a_pos:]:
                    pair[i, j] += 1
                    if i != j:
                        pair[j, i] += 1
    out = np.zeros((n, n), dtype=np.float64)
    if total == 0:
        return out
    for i in range(n):
        if single[i] == 0:
            continue
        for j in range(n):
            if pair[i, j] == 0:
                continue
            pmi = math.log(pair[i, j] * total / (single[i] * single[j]))
            out[i, j] = max(0.0, pmi)
    return out


def compute_idf(sequences: list[list[str]], vocab: OpcodeVocabulary) -> np.ndarray:
    n_path = len(sequences)
    df = np.zeros(len(vocab), dtype=np.int64)
    for seq in sequences:
        for idx in {vocab.index[m] for m in seq}:
            df[idx] += 1
    idf = np.zeros(len(vocab), dtype=np.float64)
    nonzero = df > 0
    idf[nonzero] = np.log(n_path / df[nonzero])
    return idf


def compute_tfidf(sequences: list[list[str]], vocab: OpcodeVocabulary,
                  idf: np.ndarray | None = None) -> np.ndarray:
    """Raw term count times log inverse path frequency, no smoothing.

    Pass a frozen `idf` to featurize new paths against a training corpus;
    mnemonics outside the vocabulary are dropped.
    """
    if not sequences:
        raise ValueError("tf-idf needs at least one path")
    if idf is None:
        idf = compute_idf(sequences, vocab)
    out = np.zeros((len(sequences), len(vocab)), dtype=np.float64)
    for p, seq in enumerate(sequences):
        for mnemonic in seq:
            j = vocab.index.get(mnemonic)
            if j is not None:
                out[p, j] += 1.0
    return out * idf[np.newaxis, :]


def pack_triangular(dense: np.ndarray) -> np.ndarray:
    n = dense.shape[0]
    idx = np.tril_indices(n)
    return np.ascontiguousarray(dense[idx], dtype=np.float64)


def expand_triangular(tri: np.ndarray, n: int) -> np.ndarray:
    dense = np.zeros((n, n), dtype=np.float64)
    dense[np.tril_indices(n)] = tri
    upper = np.triu_indices(n, k=1)
    dense[upper] = dense.T[upper]
    return dense


@dataclass
class HeteroGraph:
    n_path: int
    n_opcode: int
    vocab: OpcodeVocabulary
    tri: np.ndarray  # packed lower triangle of the weight matrix
    node_features: np.ndarray  # (n_path + n_opcode, d), zeros until initialized
    window: int = DEFAULT_WINDOW

    @property
    def n_nodes(self) -> int:
        return self.n_path + self.n_opcode

    def expand(self) -> np.ndarray:
        return expand_triangular(self.tri, self.n_nodes)


def _assemble(tfidf: np.ndarray, ppmi: np.ndarray, vocab: OpcodeVocabulary,
              window: int, d: int) -> HeteroGraph:
    n_path, n_opcode = tfidf.shape
    n = n_path + n_opcode
    dense = np.zeros((n, n), dtype=np.float64)
    dense[:n_path, n_path:] = tfidf
    dense[n_path:, :n_path] = tfidf.T
    dense[n_path:, n_path:] = ppmi
    np.fill_diagonal(dense, 1.0)
    return HeteroGraph(n_path, n_opcode, vocab, pack_triangular(dense),
                       np.zeros((n, d), dtype=np.float64), window)


def assemble_graph(sequences: list[list[str]], vocab: OpcodeVocabulary | None = None,
                   window: int = DEFAULT_WINDOW, d: int = DEFAULT_FEATURE_DIM) -> HeteroGraph:
    """Build the heterogeneous graph over a path corpus."""
    if vocab is None:
        vocab = OpcodeVocabulary.from_sequences(sequences)
    ppmi = compute_ppmi(sequences, vocab, window)
    tfidf = compute_tfidf(sequences, vocab)
    return _assemble(tfidf, ppmi, vocab, window, d)


def normalize_adjacency(graph: HeteroGraph | np.ndarray) -> np.ndarray:
    """Symmetric degree normalization; the unit diagonal keeps degrees >= 1."""
    dense = graph.expand() if isinstance(graph, HeteroGraph) else np.asarray(graph, dtype=np.float64)
    degree = dense.sum(axis=1)
    return dense / np.sqrt(np.outer(degree, degree))


@dataclass
class GraphArtifacts:
    """Frozen corpus statistics for attaching unseen paths at prediction time."""

    vocab: OpcodeVocabulary
    idf: np.ndarray
    ppmi: np.ndarray
    train_tfidf: np.ndarray
    window: int = DEFAULT_WINDOW

    @classmethod
    def from_corpus(cls, sequences: list[list[str]],
                    window: int = DEFAULT_WINDOW) -> "GraphArtifacts":
        vocab = OpcodeVocabulary.from_sequences(sequences)
        idf = compute_idf(sequences, vocab)
        return cls(vocab, idf, compute_ppmi(sequences, vocab, window),
                   compute_tfidf(sequences, vocab, idf), window)

    @property
    def n_train(self) -> int:
        return self.train_tfidf.shape[0]

    def graph_with(self, new_sequences: list[list[str]],
                   d: int = DEFAULT_FEATURE_DIM) -> HeteroGraph:
        """Training graph with `new_sequences` attached as fresh path nodes."""
        if new_sequences:
            new_rows = compute_tfidf(new_sequences, self.vocab, self.idf)
            tfidf = np.vstack([self.train_tfidf, new_rows])
        else:
            tfidf = self.train_tfidf
        return _assemble(tfidf, self.ppmi, self.vocab, self.window, d)
