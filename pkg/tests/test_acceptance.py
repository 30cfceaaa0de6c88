"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. The NeighborsMatch
criterion trains at full desk scale and dominates the runtime (about 15 min on
one CPU core).
"""

import itertools
import json
import time

import numpy as np
import pytest

from coopsheaf.cli import main as cli_main, run_sweep
from coopsheaf.datasets import NodeDataset, save_graph_json
from coopsheaf.graph import cycle_graph, random_graph, random_tree
from coopsheaf.model import ModelConfig
from coopsheaf.training import Schedule, train
from coopsheaf.verify import (
    block_identity_suite,
    gating_suite,
    gradient_check,
    receptive_field_suite,
    relay_suite,
    trivial_reduction_suite,
    undirected_contrast_suite,
)


@pytest.fixture
def report(request):
    writer = request.config.pluginmanager.getplugin("terminalreporter")

    def emit(number: int, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        if writer is not None:
            writer.write_line("")
            writer.write_line(line)
        else:
            print(line)

    return emit


def timed(fn, *args, **kwargs):
    start = time.process_time()
    out = fn(*args, **kwargs)
    return out, time.process_time() - start


def test_1_listen_gating(report):
    rep, secs = timed(gating_suite, num_cases=100)
    ok = rep["passed"] and rep["max_residual"] < 1e-12 and secs < 30
    report(1, ok, f"gating on {rep['cases']} cases, failures={len(rep['failures'])}, "
                  f"max residual {rep['max_residual']:.1e}, {secs:.1f}s")
    assert ok


def test_2_receptive_field(report):
    rep, secs = timed(receptive_field_suite, depth=6, layers=(1, 2))
    ok = rep["passed"] and rep["violations"] == 0 and rep["two_hop_sensitive"] and secs < 60
    report(2, ok, f"{rep['checked']} trees of depth 6, violations={rep['violations']}, "
                  f"2-hop sensitive at t=1: {rep['two_hop_sensitive']}, {secs:.1f}s")
    assert ok


def test_3_relay(report):
    rep = relay_suite(lengths=(2, 3, 4, 6), dims=(1, 2))
    worst_inter = max(r["max_intermediate"] for r in rep["runs"])
    worst_oracle = max(r["oracle_error"] for r in rep["runs"])
    ok = rep["passed"] and all(r["target_sensitive"] for r in rep["runs"]) and worst_inter < 1e-12 \
        and worst_oracle < 1e-10
    report(3, ok, f"{len(rep['runs'])} relays, max |J| intermediate {worst_inter:.1e}, "
                  f"oracle error {worst_oracle:.1e}")
    assert ok


def test_4_trivial_reduction(report):
    rep = trivial_reduction_suite(num_graphs=20, max_nodes=50)
    ok = rep["exact_match"] and rep["max_composition_error"] < 1e-10
    report(4, ok, f"exact D-A match: {rep['exact_match']}, composition error {rep['max_composition_error']:.1e}")
    assert ok


def test_5_block_identity(report):
    rep = block_identity_suite(num_sheaves=50)
    ok = rep["offdiag_equal"] and rep["max_diag_error"] < 1e-10
    report(5, ok, f"off-diagonal blocks equal: {rep['offdiag_equal']}, "
                  f"normalized diagonal error {rep['max_diag_error']:.1e}")
    assert ok


def test_6_gradients(report):
    start = time.process_time()
    worst, worst_case = 0.0, None
    for d, layers, predictor, left, right in itertools.product(
            (1, 2, 3), (1, 2), ("mlp2", "meanagg-2"), (False, True), (False, True)):
        cfg = ModelConfig(stalk_dim=d, num_layers=layers, map_predictor=predictor, left_weights=left,
                          right_weights=right, hidden_channels=2, predictor_hidden=3, activation="gelu")
        err = max(gradient_check(cfg, seed=10 * d + layers).values())
        if err > worst:
            worst, worst_case = err, (d, layers, predictor, left, right)
    secs = time.process_time() - start
    ok = worst < 1e-5 and secs < 300
    report(6, ok, f"48 configs, max relative error {worst:.1e} at {worst_case}, {secs:.0f}s")
    assert ok


def test_7_undirected_contrast(report):
    rep = undirected_contrast_suite(num_cases=20)
    ok = rep["passed"] and rep["max_residual"] < 1e-12
    report(7, ok, f"zeroed flat map silences both directions, residual {rep['max_residual']:.1e}")
    assert ok


def test_8_neighborsmatch(report, tmp_path):
    rows = run_sweep([3, 4], ["csnn"], tmp_path, epochs=2000, lr=0.002, seed=0, stop_at=0.95)
    rows += run_sweep([4], ["gcn"], tmp_path / "gcn", epochs=2000, lr=0.002, seed=0, stop_at=None)
    csnn = {r["depth"]: r for r in rows if r["model"] == "csnn"}
    gcn = next(r for r in rows if r["model"] == "gcn")
    csnn_ok = all(r["train_accuracy"] >= 0.95 and r["epochs_run"] <= 2000 and r["cpu_seconds"] < 1200
                  for r in csnn.values())
    gcn_ok = gcn["train_accuracy"] <= 0.85
    parts = [f"csnn r={r}: {row['train_accuracy']:.4f} in {row['epochs_run']} epochs, {row['cpu_seconds']:.0f}s"
             for r, row in sorted(csnn.items())]
    parts.append(f"gcn r=4: {gcn['train_accuracy']:.4f}")
    report(8, csnn_ok and gcn_ok, "; ".join(parts))
    assert csnn_ok and gcn_ok


def _labeled(g, classes, rng):
    n = g.num_nodes
    split = {"train": list(range(n)), "val": [], "test": []}
    return NodeDataset(g, rng.standard_normal((n, 8)), rng.integers(classes, size=n), [split])


def test_9_overfit(report):
    rng = np.random.default_rng(0)
    graphs = {
        "random n=100": random_graph(100, 0.05, rng),
        "cycle n=60": cycle_graph(60),
        "tree depth 5": random_tree(5, rng),
    }
    cfg = ModelConfig(stalk_dim=3, hidden_channels=32, num_layers=2)
    results = {}
    for name, g in graphs.items():
        ds = _labeled(g, 5, rng)
        assert ds.num_nodes <= 100
        res = train(cfg, ds, Schedule(epochs=2000, lr=0.01, eval_every=10, stop_at_train_metric=1.0))
        results[name] = (res.summary["best_train_metric"], res.summary["final_epoch"])
    ok = all(acc == 1.0 for acc, _ in results.values())
    report(9, ok, ", ".join(f"{k}: {acc:.2f} by epoch {ep}" for k, (acc, ep) in results.items()))
    assert ok


def test_10_determinism(report, tmp_path):
    rng = np.random.default_rng(3)
    data = tmp_path / "g.json"
    save_graph_json(_labeled(random_graph(30, 0.15, rng), 3, rng), data)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"stalk_dim": 2, "hidden_channels": 8, "num_layers": 2, "dropout": 0.3,
                               "epochs": 40, "eval_every": 5}))
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli_main(["train", "--config", str(cfg), "--data", str(data), "--seed", "7", "--out", str(out)]) == 0
        outs.append((out / "metrics.jsonl").read_bytes())
    ok = outs[0] == outs[1] and len(outs[0]) > 0
    report(10, ok, f"metrics.jsonl byte-identical across runs: {outs[0] == outs[1]} ({len(outs[0])} bytes)")
    assert ok
