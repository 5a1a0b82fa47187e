"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with its runtime. Tolerances and budgets are pinned here and
nowhere else; run with `pytest tests/test_acceptance.py -s` to see the lines.
"""

import json
import random
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from evmtrail.cli import main as cli_main
from evmtrail.featgraph import (
    OpcodeVocabulary,
    compute_ppmi,
    compute_tfidf,
    normalize_adjacency,
)
from evmtrail.isa import decode_bytecode, format_listing, parse_hex
from evmtrail.linking import link_report
from evmtrail.paths import PathBounds, entries_for_protocol, enumerate_paths
from evmtrail.pipeline import PipelineConfig, ingest, load_protocol, train_detector
from evmtrail.symstack import replay_path

from helpers import (
    ConcreteVM,
    SMALL_MODEL_CONFIG,
    ambiguous_fixture,
    assemble,
    dispatcher_contract,
    no_match_fixture,
    reference_block_walks,
    trace_to_path,
    two_contract_fixture,
    write_exploit_manifest,
)
from test_featgraph import OPS, brute_ppmi, brute_tfidf
from test_nn import ENC16, GCN16, small_setup
from test_symstack import make_program

GOLDEN = Path(__file__).parent / "data" / "golden"


@contextmanager
def criterion(name: str, budget_s: float | None = None):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        elapsed = time.perf_counter() - start
        print(f"ACCEPTANCE {name}: FAIL ({elapsed:.2f}s)")
        raise
    elapsed = time.perf_counter() - start
    budget = "" if budget_s is None else f", budget {budget_s:.0f}s"
    print(f"ACCEPTANCE {name}: PASS ({elapsed:.2f}s{budget})")
    if budget_s is not None:
        assert elapsed < budget_s, f"{name} exceeded its {budget_s}s budget"


def test_disassembler_golden_corpus():
    with criterion("disassembler-golden-corpus", budget_s=1.0):
        hex_files = sorted(GOLDEN.glob("*.hex"))
        assert len(hex_files) == 25
        for hex_file in hex_files:
            code = parse_hex(hex_file.read_text())
            listing = format_listing(decode_bytecode(code))
            golden = hex_file.with_suffix(".asm").read_bytes()
            assert listing.encode() == golden, f"{hex_file.name} diverges"


def test_differential_stack_oracle():
    with criterion("differential-stack-oracle", budget_s=30.0):
        rng = random.Random(20_240)
        completed = 0
        disagreements = 0
        attempts = 0
        while completed < 1000 and attempts < 4000:
            attempts += 1
            code = make_program(rng)
            result = ConcreteVM(code).run()
            if not result.completed:
                continue
            completed += 1
            path = trace_to_path("gen", code, result.trace)
            verdict, heights = replay_path(path)
            if not verdict.feasible or heights != result.heights:
                disagreements += 1
        assert completed >= 1000, f"only {completed} programs completed"
        assert disagreements == 0


def test_cfg_link_fixture_counts():
    with criterion("cfg-link-fixtures"):
        matched = two_contract_fixture()
        assert len(matched.call_edges) == 1
        assert len(matched.return_edges) == 1
        assert link_report(matched)["matched"] == 1
        ambiguous = ambiguous_fixture()
        assert len(ambiguous.call_edges) == 2
        assert link_report(ambiguous)["ambiguous"] == 1
        unmatched = no_match_fixture()
        assert len(unmatched.call_edges) == 0
        assert len(unmatched.return_edges) == 0


def test_path_enumeration_matches_bruteforce():
    with criterion("path-enumeration-oracle"):
        from evmtrail.cfg import build_cfg
        from evmtrail.linking import link
        from helpers import Asm

        diamond = (Asm().push(1).push_label("left").op("JUMPI")
                   .push_label("join").op("JUMP")
                   .label("left").op("JUMPDEST").push_label("join").op("JUMP")
                   .label("join").op("JUMPDEST").op("STOP").assemble())
        loop = (Asm().label("top").op("JUMPDEST").push(1).op("POP")
                .push_label("top").op("JUMP").assemble())
        fixtures = [
            link([build_cfg("c", assemble(("PUSH1", 1), "POP", "STOP"))]),
            link([build_cfg("c", diamond)]),
            link([build_cfg("c", loop)]),
            link([build_cfg("c", dispatcher_contract(
                [(0xAAAAAAAA, [("PUSH1", 1), "POP", "STOP"]),
                 (0xBBBBBBBB, [("PUSH1", 2), "POP", "STOP"])]))]),
            two_contract_fixture(),
            ambiguous_fixture(),
        ]
        bounds = PathBounds(max_block_visits=2, max_paths_per_entry=64)
        for linked in fixtures:
            assert all(len(c.blocks) <= 10 for c in linked.contracts)
            for entry in entries_for_protocol(linked):
                got = enumerate_paths(linked, entry, bounds)
                want = reference_block_walks(linked, entry, bounds)
                assert len(got) == len(want), f"count mismatch at {entry}"
                for path, (blocks, truncated) in zip(got, want):
                    expected_steps = sum(
                        len(linked.contract(c).blocks[b].instructions) for c, b in blocks)
                    assert len(path.steps) == min(expected_steps, bounds.max_path_length)
                    assert path.truncated == truncated


def test_ppmi_tfidf_randomized_oracles():
    with criterion("ppmi-tfidf-oracles"):
        rng = random.Random(31_337)
        for _trial in range(100):
            n_path = rng.randint(1, 10)
            pool = rng.sample(OPS, rng.randint(2, min(50, len(OPS))))
            seqs = [[rng.choice(pool) for _ in range(rng.randint(1, 40))]
                    for _ in range(n_path)]
            window = rng.randint(2, 10)
            vocab = OpcodeVocabulary.from_sequences(seqs)
            ppmi_err = np.abs(compute_ppmi(seqs, vocab, window)
                              - brute_ppmi(seqs, vocab, window)).max()
            tfidf_err = np.abs(compute_tfidf(seqs, vocab)
                               - brute_tfidf(seqs, vocab)).max()
            assert ppmi_err <= 1e-9
            assert tfidf_err <= 1e-9


def test_normalization_identity_and_dense_oracle():
    with criterion("adjacency-normalization"):
        for n in (1, 3, 8):
            assert np.array_equal(normalize_adjacency(np.eye(n)), np.eye(n))
        rng = np.random.default_rng(99)
        for _ in range(50):
            n = int(rng.integers(2, 21))
            a = np.abs(rng.normal(size=(n, n)))
            a = (a + a.T) / 2.0
            np.fill_diagonal(a, 1.0)
            d = np.diag(1.0 / np.sqrt(a.sum(axis=1)))
            assert np.abs(normalize_adjacency(a) - d @ a @ d).max() <= 1e-12


def test_gradient_checks():
    from evmtrail.nn.training import gradient_check

    with criterion("gradient-checks", budget_s=60.0):
        params, sample = small_setup()
        gcn_errs = gradient_check(params, ENC16, GCN16, sample, mode="gcn")
        assert max(gcn_errs.values()) <= 1e-6, gcn_errs
        enc_errs = gradient_check(params, ENC16, GCN16, sample, mode="encoder")
        assert max(enc_errs.values()) <= 1e-4, max(enc_errs.values())
        full_errs = gradient_check(params, ENC16, GCN16, sample, mode="full", lam=0.5)
        assert max(full_errs.values()) <= 1e-4, max(full_errs.values())
        assert set(full_errs) == set(params)


def test_overfit_sanity_at_default_scale():
    from evmtrail.featgraph import GraphArtifacts
    from evmtrail.nn.encoder import EncoderConfig, TOKEN_OFFSET
    from evmtrail.nn.gcn import GcnConfig
    from evmtrail.nn.training import (
        DetectorBundle,
        TrainConfig,
        _encode_all,
        train,
    )

    with criterion("overfit-sanity", budget_s=300.0):
        rng = np.random.default_rng(3)
        arith = ["ADD", "MUL", "SUB", "DUP1", "SWAP1", "PUSH1"]
        store = ["SLOAD", "SSTORE", "CALLER", "CALLVALUE", "ISZERO", "PUSH2"]

        def mk(pool):
            return [pool[rng.integers(len(pool))] for _ in range(12)]

        train_seqs = [mk(arith) for _ in range(10)] + [mk(store) for _ in range(10)]
        train_labels = [0] * 10 + [1] * 10
        test_seqs = [mk(arith) for _ in range(4)] + [mk(store) for _ in range(4)]
        test_labels = [0] * 4 + [1] * 4

        artifacts = GraphArtifacts.from_corpus(train_seqs)  # default window
        graph = artifacts.graph_with([])  # default feature width
        tokens = [[artifacts.vocab.index[m] + TOKEN_OFFSET for m in s]
                  for s in train_seqs]
        enc_cfg = EncoderConfig(vocab_size=len(artifacts.vocab) + TOKEN_OFFSET)
        gcn_cfg = GcnConfig()
        cfg = TrainConfig(epochs=200, seed=11, stop_at_train_acc=1.0, min_epochs=60)
        params, history = train(tokens, train_labels, graph, enc_cfg, gcn_cfg, cfg)

        first_perfect = next((h["epoch"] for h in history if h["train_acc"] == 1.0), None)
        assert first_perfect is not None and first_perfect <= 200
        assert history[-1]["train_acc"] == 1.0

        bundle = DetectorBundle(enc_cfg, gcn_cfg, cfg, params, artifacts,
                                _encode_all(params, enc_cfg, tokens, cfg.truncation))
        preds = bundle.predict(test_seqs)
        test_acc = float(np.mean([p.label == t for p, t in zip(preds, test_labels)]))
        assert test_acc == 1.0


@pytest.fixture(scope="module")
def labeled_corpus(tmp_path_factory):
    directory = tmp_path_factory.mktemp("accept_corpus")
    manifest = write_exploit_manifest(directory)
    entries, errors = ingest(manifest, require_labels=True)
    assert not errors
    return directory, manifest, [load_protocol(e, directory) for e in entries]


def test_ablation_direction(labeled_corpus):
    _directory, _manifest, protocols = labeled_corpus
    with criterion("ablation-direction"):
        full_cfg = PipelineConfig.from_dict(dict(SMALL_MODEL_CONFIG))
        npc_cfg = PipelineConfig.from_dict({**SMALL_MODEL_CONFIG, "no_link": True})
        full = train_detector(protocols, "access-control", full_cfg)
        npc = train_detector(protocols, "access-control", npc_cfg)
        full_acc = full.test_metrics["path_accuracy"]
        npc_acc = npc.test_metrics["path_accuracy"]
        print(f"  full={full_acc:.3f} without-connection={npc_acc:.3f}")
        assert npc_acc < full_acc
        assert (full_acc - npc_acc) >= 0.10


def test_end_to_end_scan_determinism(labeled_corpus, tmp_path, capsys):
    import subprocess
    import sys

    _directory, manifest, _protocols = labeled_corpus
    with criterion("scan-determinism"):
        config_file = tmp_path / "accept.cfg"
        lines = []
        for key, value in {**SMALL_MODEL_CONFIG, "epochs": 60, "min_epochs": 30}.items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        config_file.write_text("\n".join(lines) + "\n")

        ckpt = tmp_path / "ac.ckpt"
        rc = cli_main(["train", "--manifest", manifest, "--detector", "access-control",
                       "--config", str(config_file), "--out", str(ckpt)])
        assert rc == 0
        capsys.readouterr()

        # two fresh processes, identical inputs and seed
        outputs = []
        for run in ("one", "two"):
            out_dir = tmp_path / f"run_{run}"
            proc = subprocess.run(
                [sys.executable, "-m", "evmtrail.cli", "scan",
                 "--manifest", manifest, "--out", str(out_dir),
                 "--config", str(config_file),
                 "--checkpoint", f"access-control={ckpt}"],
                capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            outputs.append({p.name: p.read_bytes() for p in sorted(out_dir.iterdir())})
        assert outputs[0].keys() == outputs[1].keys()
        assert len(outputs[0]) == 21  # 20 reports + index
        for name in outputs[0]:
            assert outputs[0][name] == outputs[1][name], f"{name} differs between runs"
        sample = json.loads(outputs[0]["proto01.json"])
        assert sample["verdicts"]["access-control"] == "malicious"
