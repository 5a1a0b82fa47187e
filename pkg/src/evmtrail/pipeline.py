"""End-to-end orchestration: manifest ingestion, the scan pipeline
(disassemble, build, link, walk, validate, featurize, predict), detector
training with a protocol-level split, and deterministic report emission.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import InputError, __version__
from .cfg import ContractCFG, build_cfg
from .featgraph import GraphArtifacts
from .isa import parse_hex
from .linking import LinkedCFG, link, link_report
from .nn.encoder import EncoderConfig, TOKEN_OFFSET
from .nn.gcn import GcnConfig
from .nn.training import (
    DetectorBundle,
    TrainConfig,
    _encode_all,
    protocol_verdict,
    train,
)
from .paths import DataPath, PathBounds, enumerate_protocol_paths
from .symstack import Verdict, filter_feasible

DETECTORS = ("access-control", "flash-loan")
LABELS = ("benign",) + DETECTORS

NO_EVIDENCE = "no-evidence"


@dataclass
class PipelineConfig:
    max_block_visits: int = 2
    max_path_length: int = 4096
    max_paths_per_entry: int = 64
    window: int = 20
    truncation: int = 512
    lam: float = 0.7
    no_link: bool = False
    no_validate: bool = False
    seed: int = 0
    checkpoints: dict[str, str] = field(default_factory=dict)  # detector -> path
    # model dimensions
    embed_dim: int = 128
    hidden: int = 312
    ff: int = 1200
    heads: int = 12
    layers: int = 4
    gcn_hidden: int = 200
    # training contract
    lr_encoder: float = 1e-5
    lr_gcn: float = 1e-3
    dropout: float = 0.5
    batch_size: int = 64
    epochs: int = 200
    weights: str = "classes"
    loss_reduction: str = "classes"
    stop_at_train_acc: float | None = None
    min_epochs: int = 1
    train_split: float = 0.8

    @property
    def bounds(self) -> PathBounds:
        return PathBounds(self.max_block_visits, self.max_path_length,
                          self.max_paths_per_entry)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.lr_encoder, self.lr_gcn, self.dropout, self.batch_size,
                           self.lam, self.epochs, self.seed, self.truncation,
                           weights=self.weights, loss_reduction=self.loss_reduction,
                           stop_at_train_acc=self.stop_at_train_acc,
                           min_epochs=self.min_epochs)

    def echo(self) -> dict:
        d = asdict(self)
        d["checkpoints"] = dict(sorted(self.checkpoints.items()))
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        cfg = cls()
        for key, value in data.items():
            if key.startswith("checkpoint."):
                cfg.checkpoints[key.split(".", 1)[1]] = str(value)
            elif key == "checkpoints" and isinstance(value, dict):
                cfg.checkpoints.update(value)
            elif hasattr(cfg, key):
                current = getattr(cfg, key)
                if isinstance(current, bool):
                    value = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
                elif isinstance(current, int) and not isinstance(current, bool):
                    value = int(value)
                elif isinstance(current, float) or key == "stop_at_train_acc":
                    value = float(value) if value is not None else None
                setattr(cfg, key, value)
            else:
                raise InputError(f"unknown config key: {key}")
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        """Parse a `key = value` text file (# comments, blank lines ignored)."""
        data: dict = {}
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise InputError(f"cannot read config file {path}: {exc}") from exc
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            data[key] = value
        return cls.from_dict(data)


@dataclass
class ManifestEntry:
    protocol_id: str
    contract_files: list[str]
    label: str | None = None
    chain: str | None = None
    entry_hints: list[tuple[str, str]] | None = None  # (contract_id, selector hex)


@dataclass
class LoadedProtocol:
    protocol_id: str
    contracts: list[tuple[str, bytes]]  # (contract_id, runtime bytecode)
    label: str | None = None
    chain: str | None = None
    entry_hints: list[tuple[str, str]] | None = None


def ingest(manifest_path: str | Path, require_labels: bool = False,
           ) -> tuple[list[ManifestEntry], list[str]]:
    """Read a JSON-lines manifest; malformed lines become per-line errors and
    the remaining entries still load. Protocol ids must be unique."""
    try:
        text = Path(manifest_path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read manifest {manifest_path}: {exc}") from exc
    entries: list[ManifestEntry] = []
    errors: list[str] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            errors.append(f"line {lineno}: invalid JSON: {exc.msg}")
            continue
        pid = doc.get("protocol_id")
        files = doc.get("contract_files")
        if not isinstance(pid, str) or not pid:
            errors.append(f"line {lineno}: missing protocol_id")
            continue
        if not isinstance(files, list) or not files:
            errors.append(f"line {lineno}: missing contract_files")
            continue
        if pid in seen:
            errors.append(f"line {lineno}: duplicate protocol_id {pid!r}")
            continue
        label = doc.get("label")
        if label is not None and label not in LABELS:
            errors.append(f"line {lineno}: unknown label {label!r}")
            continue
        if require_labels and label is None:
            errors.append(f"line {lineno}: label required in training mode")
            continue
        hints = doc.get("entry_hints")
        if hints is not None:
            hints = [(h[0], h[1]) for h in hints]
        seen.add(pid)
        entries.append(ManifestEntry(pid, [str(f) for f in files], label,
                                     doc.get("chain"), hints))
    return entries, errors


def load_protocol(entry: ManifestEntry, base_dir: str | Path = ".") -> LoadedProtocol:
    base = Path(base_dir)
    contracts: list[tuple[str, bytes]] = []
    for file_name in entry.contract_files:
        path = Path(file_name)
        if not path.is_absolute():
            path = base / path
        try:
            text = path.read_text()
        except OSError as exc:
            raise InputError(f"{entry.protocol_id}: cannot read {path}: {exc}") from exc
        try:
            code = parse_hex(text)
        except ValueError as exc:
            raise InputError(f"{entry.protocol_id}: {path}: {exc}") from exc
        contracts.append((path.stem, code))
    return LoadedProtocol(entry.protocol_id, contracts, entry.label, entry.chain,
                          entry.entry_hints)


@dataclass
class Analysis:
    cfgs: list[ContractCFG]
    linked: LinkedCFG
    paths: list[DataPath]
    feasible: list[DataPath]
    rejected: list[tuple[DataPath, Verdict]]
    stats: dict


def _resolve_hints(linked: LinkedCFG, hints: list[tuple[str, str]]):
    resolved = []
    for contract_id, selector in hints:
        try:
            cfg = linked.contract(contract_id)
        except KeyError as exc:
            raise InputError(f"entry hint names unknown contract {contract_id!r}") from exc
        want = bytes.fromhex(selector[2:] if selector.startswith("0x") else selector)
        found = [seg for seg in cfg.functions if seg.selector == want]
        if not found:
            raise InputError(f"entry hint {contract_id}:{selector} matches no function")
        resolved.append((contract_id, found[0].entry_block))
    return resolved


def analyze_protocol(protocol: LoadedProtocol, config: PipelineConfig) -> Analysis:
    """Run the structural half of the pipeline for one protocol."""
    cfgs = [build_cfg(cid, code) for cid, code in protocol.contracts]
    linked = link(cfgs, enabled=not config.no_link)
    entries = _resolve_hints(linked, protocol.entry_hints) if protocol.entry_hints else None
    paths = enumerate_protocol_paths(linked, config.bounds, entries=entries)
    feasible, rejected = filter_feasible(paths, bypass=config.no_validate)
    stats = {
        "contracts": len(cfgs),
        "blocks": sum(len(c.blocks) for c in cfgs),
        "call_sites": link_report(linked),
        "paths_enumerated": len(paths),
        "paths_feasible": len(feasible),
        "paths_rejected": len(rejected),
    }
    return Analysis(cfgs, linked, paths, feasible, rejected, stats)


# -- training -----------------------------------------------------------------

def split_protocols(n: int, seed: int, train_fraction: float = 0.8):
    """Deterministic seeded shuffle split at protocol granularity."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(n * train_fraction)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


@dataclass
class TrainOutcome:
    bundle: DetectorBundle
    history: list[dict]
    test_metrics: dict
    train_protocol_ids: list[str]
    test_protocol_ids: list[str]


def train_detector(protocols: list[LoadedProtocol], detector: str,
                   config: PipelineConfig) -> TrainOutcome:
    """Train one binary detector on labeled protocols and evaluate the held-out
    20% split; paths inherit their protocol's label."""
    if detector not in DETECTORS:
        raise InputError(f"unknown detector {detector!r}")
    labeled = [p for p in protocols if p.label is not None]
    if len({p.label == detector for p in labeled}) < 2:
        raise InputError("training needs both positive and negative protocols")

    train_idx, test_idx = split_protocols(len(labeled), config.seed, config.train_split)
    analyses = {i: analyze_protocol(labeled[i], config) for i in range(len(labeled))}

    train_seqs: list[list[str]] = []
    train_labels: list[int] = []
    for i in train_idx:
        label = int(labeled[i].label == detector)
        for path in analyses[i].feasible:
            train_seqs.append(path.mnemonics)
            train_labels.append(label)
    if not train_seqs:
        raise InputError("no feasible training paths")
    if len(set(train_labels)) < 2:
        raise InputError("training split lost one class; choose another seed")

    artifacts = GraphArtifacts.from_corpus(train_seqs, config.window)
    vocab = artifacts.vocab
    graph = artifacts.graph_with([], d=config.hidden)
    enc_cfg = EncoderConfig(vocab_size=len(vocab) + TOKEN_OFFSET,
                            embed_dim=config.embed_dim, hidden=config.hidden,
                            ff=config.ff, heads=config.heads, layers=config.layers,
                            max_len=config.truncation)
    gcn_cfg = GcnConfig(in_dim=config.hidden, hidden=config.gcn_hidden)
    train_cfg = config.train_config()

    token_seqs = [[vocab.index[m] + TOKEN_OFFSET for m in seq if m in vocab.index]
                  for seq in train_seqs]
    params, history = train(token_seqs, train_labels, graph, enc_cfg, gcn_cfg, train_cfg)
    bank = _encode_all(params, enc_cfg, token_seqs, train_cfg.truncation,
                       train_cfg.batch_size)
    bundle = DetectorBundle(enc_cfg, gcn_cfg, train_cfg, params, artifacts, bank,
                            detector=detector)

    path_hits = path_total = proto_hits = proto_total = no_evidence = 0
    for i in test_idx:
        truth = int(labeled[i].label == detector)
        seqs = [p.mnemonics for p in analyses[i].feasible]
        preds = bundle.predict(seqs)
        path_hits += sum(int(p.label == truth) for p in preds)
        path_total += len(preds)
        verdict = protocol_verdict(preds)
        if verdict == NO_EVIDENCE:
            no_evidence += 1
            continue
        proto_total += 1
        proto_hits += int((verdict == "malicious") == bool(truth))
    test_metrics = {
        "path_accuracy": path_hits / path_total if path_total else None,
        "protocol_accuracy": proto_hits / proto_total if proto_total else None,
        "n_test_protocols": int(len(test_idx)),
        "n_test_paths": path_total,
        "no_evidence_protocols": no_evidence,
    }
    return TrainOutcome(bundle, history, test_metrics,
                        [labeled[i].protocol_id for i in train_idx],
                        [labeled[i].protocol_id for i in test_idx])


# -- scanning -----------------------------------------------------------------

def _round(x: float) -> float:
    return round(float(x), 12)


def scan_protocol(protocol: LoadedProtocol, config: PipelineConfig,
                  bundles: dict[str, DetectorBundle]) -> dict:
    """Full pipeline for one protocol; returns the report document."""
    if not protocol.contracts:
        return {
            "protocol_id": protocol.protocol_id,
            "verdicts": {d: NO_EVIDENCE for d in sorted(bundles)},
            "paths": [],
            "stats": {"contracts": 0, "blocks": 0, "call_sites": {},
                      "paths_enumerated": 0, "paths_feasible": 0, "paths_rejected": 0},
            "diagnostics": ["no decodable contracts"],
            "config": config.echo(),
            "version": __version__,
        }
    analysis = analyze_protocol(protocol, config)
    feasible_set = {id(p) for p in analysis.feasible}
    rejection = {id(p): v for p, v in analysis.rejected}

    sequences = [p.mnemonics for p in analysis.feasible]
    predictions = {name: bundles[name].predict(sequences) for name in sorted(bundles)}
    verdicts = {name: protocol_verdict(preds) for name, preds in predictions.items()}

    path_records = []
    feasible_rank = 0
    for path in analysis.paths:
        record: dict = {
            "entry": {"contract": path.entry[0], "block": path.entry[1]},
            "length": len(path.steps),
            "crossings": len(path.crossings),
            "truncated": path.truncated,
            "feasible": id(path) in feasible_set,
        }
        if record["feasible"]:
            record["probabilities"] = {
                name: [_round(p) for p in predictions[name][feasible_rank].probs]
                for name in predictions
            }
            feasible_rank += 1
        else:
            verdict = rejection[id(path)]
            record["reason"] = verdict.reason
            record["pc"] = verdict.pc
        path_records.append(record)

    return {
        "protocol_id": protocol.protocol_id,
        "verdicts": verdicts,
        "paths": path_records,
        "stats": analysis.stats,
        "config": config.echo(),
        "version": __version__,
    }


def emit_report(report: dict, fmt: str = "json") -> bytes:
    """Canonical JSON (sorted keys, stable floats) or a text summary."""
    if fmt == "json":
        return (json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n").encode()
    if fmt != "text":
        raise InputError(f"unknown report format {fmt!r}")
    lines = [f"protocol {report['protocol_id']} (evmtrail {report['version']})"]
    for name, verdict in sorted(report["verdicts"].items()):
        lines.append(f"  verdict[{name}]: {verdict}")
    stats = report["stats"]
    lines.append(
        f"  contracts={stats['contracts']} blocks={stats['blocks']} "
        f"paths={stats['paths_enumerated']} feasible={stats['paths_feasible']}")
    for record in report["paths"]:
        entry = record["entry"]
        state = "ok" if record["feasible"] else f"rejected:{record.get('reason')}"
        lines.append(
            f"  path {entry['contract']}@{entry['block']} len={record['length']} "
            f"crossings={record['crossings']} {state}")
    return ("\n".join(lines) + "\n").encode()
