"""Versioned binary containers: the feature-graph file and model checkpoints.

Both formats are little-endian with fixed 64-bit floats. The graph file
holds the vocabulary plus the packed triangular weight array; a checkpoint
holds a JSON config echo plus a named tensor table, which is enough to
reconstruct a full detector bundle (parameters, frozen graph statistics and
the trained path-node feature bank).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .featgraph import GraphArtifacts, HeteroGraph, OpcodeVocabulary
from .nn.encoder import EncoderConfig
from .nn.gcn import GcnConfig
from .nn.training import DetectorBundle, TrainConfig

GRAPH_MAGIC = b"XGPH"
CHECKPOINT_MAGIC = b"XCKP"
FORMAT_VERSION = 1


class ContainerError(Exception):
    """Corrupt or mismatched container file."""


def _write_str(out: list[bytes], text: str) -> None:
    raw = text.encode("utf-8")
    out.append(struct.pack("<H", len(raw)))
    out.append(raw)


class _Reader:
    def __init__(self, blob: bytes) -> None:
        self.blob = blob
        self.at = 0

    def take(self, n: int) -> bytes:
        if self.at + n > len(self.blob):
            raise ContainerError("truncated container")
        chunk = self.blob[self.at:self.at + n]
        self.at += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def read_str(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def read_f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(count * 8), dtype="<f8").astype(np.float64)


# -- graph container ----------------------------------------------------------

def graph_to_bytes(graph: HeteroGraph) -> bytes:
    out: list[bytes] = [GRAPH_MAGIC]
    out.append(struct.pack("<IIIII", FORMAT_VERSION, graph.n_path, graph.n_opcode,
                           graph.node_features.shape[1], graph.window))
    mnemonics = graph.vocab.mnemonics
    out.append(struct.pack("<I", len(mnemonics)))
    for name in mnemonics:
        _write_str(out, name)
    tri = np.ascontiguousarray(graph.tri, dtype="<f8")
    out.append(struct.pack("<Q", tri.size))
    out.append(tri.tobytes())
    return b"".join(out)


def graph_from_bytes(blob: bytes) -> HeteroGraph:
    r = _Reader(blob)
    if r.take(4) != GRAPH_MAGIC:
        raise ContainerError("not a graph container")
    version, n_path, n_opcode, d, window = r.unpack("<IIIII")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported graph container version {version}")
    (n_vocab,) = r.unpack("<I")
    vocab = OpcodeVocabulary({r.read_str(): i for i in range(n_vocab)})
    (tri_len,) = r.unpack("<Q")
    tri = r.read_f64(tri_len)
    n = n_path + n_opcode
    return HeteroGraph(n_path, n_opcode, vocab, tri,
                       np.zeros((n, d), dtype=np.float64), window)


def write_graph(path: str | Path, graph: HeteroGraph) -> None:
    Path(path).write_bytes(graph_to_bytes(graph))


def read_graph(path: str | Path) -> HeteroGraph:
    return graph_from_bytes(Path(path).read_bytes())


# -- checkpoint container -----------------------------------------------------

def _tensor_table(out: list[bytes], tensors: dict[str, np.ndarray]) -> None:
    out.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        _write_str(out, name)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())


def _read_tensor_table(r: _Reader) -> dict[str, np.ndarray]:
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.read_str()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = r.read_f64(size).reshape(shape)
    return tensors


def bundle_to_bytes(bundle: DetectorBundle) -> bytes:
    config = {
        "detector": bundle.detector,
        "labels": list(bundle.labels),
        "encoder": asdict(bundle.enc_cfg),
        "gcn": asdict(bundle.gcn_cfg),
        "train": asdict(bundle.train_cfg),
        "vocabulary": bundle.artifacts.vocab.mnemonics,
        "window": bundle.artifacts.window,
    }
    tensors = dict(bundle.params)
    tensors["graph.idf"] = bundle.artifacts.idf
    tensors["graph.ppmi"] = bundle.artifacts.ppmi
    tensors["graph.train_tfidf"] = bundle.artifacts.train_tfidf
    tensors["graph.bank"] = bundle.bank

    out: list[bytes] = [CHECKPOINT_MAGIC, struct.pack("<I", FORMAT_VERSION)]
    raw = json.dumps(config, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(raw)))
    out.append(raw)
    _tensor_table(out, tensors)
    return b"".join(out)


def bundle_from_bytes(blob: bytes) -> DetectorBundle:
    r = _Reader(blob)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise ContainerError("not a checkpoint container")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    config = json.loads(r.take(cfg_len).decode("utf-8"))
    tensors = _read_tensor_table(r)

    artifacts = GraphArtifacts(
        OpcodeVocabulary({m: i for i, m in enumerate(config["vocabulary"])}),
        tensors.pop("graph.idf"),
        tensors.pop("graph.ppmi"),
        tensors.pop("graph.train_tfidf"),
        config["window"],
    )
    bank = tensors.pop("graph.bank")
    return DetectorBundle(
        EncoderConfig(**config["encoder"]),
        GcnConfig(**config["gcn"]),
        TrainConfig(**config["train"]),
        tensors,
        artifacts,
        bank,
        config["detector"],
        tuple(config["labels"]),
    )


def write_bundle(path: str | Path, bundle: DetectorBundle) -> None:
    Path(path).write_bytes(bundle_to_bytes(bundle))


def read_bundle(path: str | Path) -> DetectorBundle:
    return bundle_from_bytes(Path(path).read_bytes())
