"""Executable checks of the listening/broadcasting guarantees of the composed Laplacian.

Dense reference operators here are assembled node by node straight from the
general restriction-map formulas (source map on emitted arcs, target map on
received arcs) and share no code with the block-sparse builders.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .datasets import gen_relay_path
from .graph import DirectedGraph, hop_ball, path_graph, random_graph, random_tree
from .laplacian import apply, build_in_transpose, build_out, build_undirected_flat, compose_apply, normalize
from .model import LayerParams, ModelConfig, csnn_layer, forward, init_params
from .sheaf import DTYPE, DirectedSheaf, householder_orthogonal, random_sheaf
from .store import ParameterStore

STRUCTURAL_ZERO = 1e-12


# ---------------------------------------------------------------- dense oracles

def _np_maps(sheaf: DirectedSheaf) -> tuple[np.ndarray, np.ndarray]:
    return sheaf.source_maps().detach().numpy(), sheaf.target_maps().detach().numpy()


def dense_out_laplacian(sheaf: DirectedSheaf, g: DirectedGraph) -> np.ndarray:
    """Sum over j in N(i) of F_{i<ij}^T F_{i<ij} x_i - F_{i<ji}^T F_{j<ji} x_j."""
    S, T = _np_maps(sheaf)
    n, d = g.num_nodes, sheaf.dimension
    L = np.zeros((n * d, n * d))
    for i in range(n):
        bi = slice(i * d, (i + 1) * d)
        for j in g.neighbors(i):
            bj = slice(j * d, (j + 1) * d)
            L[bi, bi] += S[i].T @ S[i]
            L[bi, bj] -= T[i].T @ S[j]
    return L


def dense_in_laplacian(sheaf: DirectedSheaf, g: DirectedGraph) -> np.ndarray:
    """Sum over j in N(i) of F_{i<ji}^T F_{i<ji} x_i - F_{i<ij}^T F_{j<ij} x_j (not transposed)."""
    S, T = _np_maps(sheaf)
    n, d = g.num_nodes, sheaf.dimension
    L = np.zeros((n * d, n * d))
    for i in range(n):
        bi = slice(i * d, (i + 1) * d)
        for j in g.neighbors(i):
            bj = slice(j * d, (j + 1) * d)
            L[bi, bi] += T[i].T @ T[i]
            L[bi, bj] -= S[i].T @ T[j]
    return L


def dense_composition(sheaf: DirectedSheaf, g: DirectedGraph) -> np.ndarray:
    return dense_in_laplacian(sheaf, g).T @ dense_out_laplacian(sheaf, g)


def dense_graph_laplacian(g: DirectedGraph) -> np.ndarray:
    a = g.adjacency()
    return np.diag(a.sum(1)) - a


def dense_flat_laplacian(maps: np.ndarray, g: DirectedGraph) -> np.ndarray:
    n, d = maps.shape[0], maps.shape[-1]
    L = np.zeros((n * d, n * d))
    for i in range(n):
        bi = slice(i * d, (i + 1) * d)
        for j in g.neighbors(i):
            L[bi, bi] += np.eye(d)
            L[bi, j * d:(j + 1) * d] -= maps[i].T @ maps[j]
    return L


# ---------------------------------------------------------------- listening and broadcasting gates

@dataclass
class Prop1Report:
    node: int
    listen_gated: bool
    ignored_neighbors: list[int]
    target_is_zero: bool
    silent_neighbors: list[int]
    max_residual: float

    @property
    def holds(self) -> bool:
        """Zero target map forces gating; every non-broadcasting neighbor is ignored."""
        return (self.listen_gated or not self.target_is_zero) and set(self.silent_neighbors) <= set(self.ignored_neighbors)


def check_prop1(g: DirectedGraph, sheaf: DirectedSheaf, x, node: int, *, seed: int = 0,
                num_perturbations: int = 20, tol: float = STRUCTURAL_ZERO) -> Prop1Report:
    """Measure whether ``node`` ignores everyone, and which neighbors it ignores, under random perturbations."""
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(x, dtype=DTYPE).reshape(g.num_nodes, sheaf.dimension, -1)
    out_op, in_op = build_out(sheaf, g), build_in_transpose(sheaf, g)

    def at_node(z):
        return compose_apply(in_op, out_op, z)[node]

    base = at_node(x)
    gate_resid = float(base.abs().max())
    for _ in range(num_perturbations):
        z = x + torch.as_tensor(rng.standard_normal(x.shape), dtype=DTYPE)
        gate_resid = max(gate_resid, float(at_node(z).abs().max()))
    listen_gated = gate_resid <= tol

    ignored, worst = [], gate_resid if listen_gated else 0.0
    for k in g.neighbors(node):
        k = int(k)
        resid = 0.0
        for _ in range(num_perturbations):
            z = x.clone()
            z[k] += torch.as_tensor(rng.standard_normal(z[k].shape), dtype=DTYPE)
            resid = max(resid, float((at_node(z) - base).abs().max()))
        if resid <= tol:
            ignored.append(k)
            worst = max(worst, resid)
    return Prop1Report(
        node=node,
        listen_gated=listen_gated,
        ignored_neighbors=ignored,
        target_is_zero=bool(sheaf.target_scale[node] == 0),
        silent_neighbors=[int(k) for k in g.neighbors(node) if sheaf.source_scale[k] == 0],
        max_residual=worst,
    )


# ---------------------------------------------------------------- receptive field

def input_sensitivity(cfg: ModelConfig, params: ParameterStore, g: DirectedGraph, raw, node: int, **fwd) -> np.ndarray:
    """max over classes and input channels of |d logits[node] / d raw[j]|, per node j."""
    raw = torch.as_tensor(raw, dtype=DTYPE).clone().requires_grad_(True)
    logits = forward(cfg, params, g, raw, **fwd)
    sens = torch.zeros(g.num_nodes, dtype=DTYPE)
    for c in range(logits.shape[1]):
        (grad,) = torch.autograd.grad(logits[node, c], raw, retain_graph=True)
        sens = torch.maximum(sens, grad.abs().amax(dim=1))
    return sens.numpy()


def receptive_field(cfg: ModelConfig, params: ParameterStore, g: DirectedGraph, raw, node: int,
                    threshold: float = STRUCTURAL_ZERO, **fwd) -> set[int]:
    """Nodes whose input features move ``node``'s logits by more than ``threshold`` (exact Jacobian rows)."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    sens = input_sensitivity(cfg, params, g, raw, node, **fwd)
    return {int(j) for j in np.flatnonzero(sens > threshold)}


# ---------------------------------------------------------------- relay along a path

@dataclass
class RelayReport:
    length: int
    stalk_dim: int
    target_sensitive: bool
    intermediates_ignored: bool
    constant: float
    jacobian: list
    oracle_jacobian: list
    oracle_error: float
    max_intermediate: float

    @property
    def holds(self) -> bool:
        return self.target_sensitive and self.intermediates_ignored and self.oracle_error < 1e-10


def _relay_oracle(schedule) -> np.ndarray:
    n, d = schedule.graph.num_nodes, schedule.sheaves[0].dimension
    total = np.eye(n * d)
    for sheaf, eps in zip(schedule.sheaves, schedule.epsilons):
        step = np.diag(1.0 + eps.numpy().reshape(-1)) - dense_composition(sheaf, schedule.graph)
        total = step @ total
    return total


def check_relay(length: int, stalk_dim: int, seed: int = 0, scale: float = 1.0) -> RelayReport:
    """Run the relay schedule through the diffusion layer and read off endpoint sensitivities.

    Layers use identity activation, identity weights and the unnormalized
    operators: the pseudo-inverse normalization zeroes the broadcaster's
    column (its target map vanishes), so the relay only exists unnormalized.
    """
    sched = gen_relay_path(length, stalk_dim, seed, scale)
    g, d, n = sched.graph, stalk_dim, sched.graph.num_nodes
    cfg = ModelConfig(stalk_dim=d, hidden_channels=1, num_layers=length, activation="identity",
                      left_weights=False, right_weights=False, normalized=False)

    def run(x0):
        x = x0.reshape(n, d, 1)
        for sheaf, eps in zip(sched.sheaves, sched.epsilons):
            x = csnn_layer(x, sheaf, g, LayerParams(None, None, eps, {}), cfg)
        return x.reshape(-1)

    jac = torch.autograd.functional.jacobian(run, torch.zeros(n * d, dtype=DTYPE)).numpy()
    oracle = _relay_oracle(sched)

    def block(m, i, j):
        return m[i * d:(i + 1) * d, j * d:(j + 1) * d]

    end, far = sched.endpoint, sched.far
    far_block = block(jac, end, far)
    inter = max((np.abs(block(jac, end, v)).max() for v in range(1, far)), default=0.0)
    constant = float(far_block[0, 0]) if d == 1 else float(np.linalg.norm(far_block) / np.sqrt(d))
    return RelayReport(
        length=length,
        stalk_dim=d,
        target_sensitive=bool(np.abs(far_block).max() > STRUCTURAL_ZERO),
        intermediates_ignored=bool(inter < STRUCTURAL_ZERO),
        constant=constant,
        jacobian=far_block.tolist(),
        oracle_jacobian=block(oracle, end, far).tolist(),
        oracle_error=float(np.abs(jac - oracle).max()),
        max_intermediate=float(inter),
    )


# ---------------------------------------------------------------- gradients

def gradient_check(cfg: ModelConfig, g: DirectedGraph | None = None, *, num_features: int = 3,
                   num_classes: int = 2, seed: int = 0, step: float = 1e-4,
                   points: int = 4) -> dict[str, float]:
    """Per-parameter relative error between reverse-mode and central-difference gradients."""
    from .training import backward, finite_diff_grad, loss_cross_entropy, record, relative_error

    g = path_graph(4) if g is None else g
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((g.num_nodes, num_features))
    labels = rng.integers(num_classes, size=g.num_nodes)
    mask = np.ones(g.num_nodes, dtype=bool)
    store = init_params(cfg, num_features, num_classes, seed=seed)
    # move the epsilons off zero so their tanh slope matters
    with torch.no_grad():
        for name in store:
            if name.endswith(".eps"):
                store[name].copy_(torch.as_tensor(rng.uniform(-0.5, 0.5, store[name].shape), dtype=DTYPE))

    def loss():
        return loss_cross_entropy(forward(cfg, store, g, raw), labels, mask)

    analytic = backward(record(loss, store))
    numeric = finite_diff_grad(loss, store, step, points)
    return {name: relative_error(analytic[name], numeric[name]) for name in store}


# ---------------------------------------------------------------- suites

def gating_suite(num_cases: int = 100, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    failures, worst, gated_cases, ignored_cases = [], 0.0, 0, 0
    for case in range(num_cases):
        n = int(rng.integers(3, 13))
        d = int(rng.integers(1, 4))
        g = random_graph(n, float(rng.uniform(0.2, 0.7)), rng)
        sheaf = random_sheaf(n, d, rng, source_zero_prob=0.3, target_zero_prob=0.3)
        node = int(rng.integers(n))
        x = rng.standard_normal((n, d, 2))
        rep = check_prop1(g, sheaf, x, node, seed=int(rng.integers(2**31)))
        worst = max(worst, rep.max_residual)
        gated_cases += rep.target_is_zero
        ignored_cases += bool(rep.silent_neighbors)
        if not rep.holds:
            failures.append(case)
    return {"passed": not failures and worst < STRUCTURAL_ZERO, "cases": num_cases, "failures": failures,
            "max_residual": worst, "gated_cases": gated_cases, "cases_with_silent_neighbors": ignored_cases,
            "seconds": time.perf_counter() - t0}


def receptive_field_suite(depth: int = 6, layers=(1, 2), trees_per_layer: int = 3, seed: int = 0) -> dict:
    """Receptive fields of random models on random trees stay inside the 2t-hop ball."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    violations, checked, sizes = 0, 0, {}
    for t in layers:
        for k in range(trees_per_layer):
            g = random_tree(depth, rng)
            cfg = ModelConfig(stalk_dim=2, hidden_channels=3, num_layers=t, activation="gelu",
                              map_predictor="mlp2", predictor_hidden=8)
            params = init_params(cfg, 4, 2, seed=int(rng.integers(2**31)))
            raw = rng.standard_normal((g.num_nodes, 4))
            field_ = receptive_field(cfg, params, g, raw, 0)
            ball = hop_ball(g, 0, 2 * t)
            violations += len(field_ - ball)
            checked += 1
            sizes[f"t={t}/tree={k}"] = {"field": len(field_), "ball": len(ball), "nodes": g.num_nodes}
    # a fixed path where t = 1 must reach two hops
    g = path_graph(5)
    cfg = ModelConfig(stalk_dim=2, hidden_channels=3, num_layers=1, activation="gelu", predictor_hidden=8)
    field_ = receptive_field(cfg, init_params(cfg, 4, 2, seed=seed), g, np.random.default_rng(seed).standard_normal((5, 4)), 0)
    two_hop = 2 in field_
    return {"passed": violations == 0 and two_hop, "violations": violations, "checked": checked,
            "two_hop_sensitive": two_hop, "fields": sizes, "seconds": time.perf_counter() - t0}


def relay_suite(lengths=(2, 3, 4, 6), dims=(1, 2), seed: int = 0) -> dict:
    reports = [check_relay(t, d, seed) for t in lengths for d in dims]
    return {"passed": all(r.holds for r in reports),
            "runs": [{k: v for k, v in asdict(r).items() if k not in ("jacobian", "oracle_jacobian")} for r in reports]}


def trivial_reduction_suite(num_graphs: int = 20, max_nodes: int = 50, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    exact, worst = True, 0.0
    for _ in range(num_graphs):
        n = int(rng.integers(2, max_nodes + 1))
        g = random_graph(n, float(rng.uniform(0.05, 0.4)), rng)
        sheaf = DirectedSheaf.constant(n, 1)
        lap = dense_graph_laplacian(g)
        out_d = build_out(sheaf, g).to_dense().numpy()
        in_d = build_in_transpose(sheaf, g).to_dense().numpy()
        exact &= bool(np.array_equal(out_d, lap) and np.array_equal(in_d, lap))
        x = torch.as_tensor(rng.standard_normal((n, 1, 3)), dtype=DTYPE)
        got = compose_apply(build_in_transpose(sheaf, g), build_out(sheaf, g), x).reshape(n, 3).numpy()
        worst = max(worst, float(np.abs(got - lap @ lap @ x.reshape(n, 3).numpy()).max()))
    return {"passed": exact and worst < 1e-10, "exact_match": exact, "max_composition_error": worst}


def block_identity_suite(num_sheaves: int = 50, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    off_equal, worst_diag = True, 0.0
    for _ in range(num_sheaves):
        n, d = int(rng.integers(2, 12)), int(rng.integers(1, 5))
        g = random_graph(n, 0.4, rng)
        sheaf = random_sheaf(n, d, rng, source_zero_prob=0.2, target_zero_prob=0.2)
        out_op, in_op = build_out(sheaf, g), build_in_transpose(sheaf, g)
        off_equal &= bool(torch.equal(out_op.offdiag, in_op.offdiag))
        for op, scale, mode in ((out_op, sheaf.source_scale, "out"), (in_op, sheaf.target_scale, "in")):
            diag = normalize(op, mode).diag_blocks()
            live = (torch.as_tensor(g.degree) > 0) & (scale > 0)
            if live.any():
                worst_diag = max(worst_diag, float((diag[live] - torch.eye(d, dtype=DTYPE)).abs().max()))
    return {"passed": off_equal and worst_diag < 1e-10, "offdiag_equal": off_equal, "max_diag_error": worst_diag}


def undirected_contrast_suite(num_cases: int = 20, seed: int = 0) -> dict:
    """Zeroing a flat-bundle map O_i silences i in both directions at once."""
    rng = np.random.default_rng(seed)
    worst, ok = 0.0, True
    for _ in range(num_cases):
        n, d = int(rng.integers(3, 10)), int(rng.integers(1, 4))
        g = random_graph(n, 0.5, rng)
        i = int(rng.integers(n))
        if len(g.neighbors(i)) == 0:
            continue
        maps = householder_orthogonal(torch.as_tensor(rng.standard_normal((n, d, d)), dtype=DTYPE))
        maps[i] = 0.0
        op = build_undirected_flat(maps, g)
        x = torch.as_tensor(rng.standard_normal((n, d, 2)), dtype=DTYPE)
        base = apply(op, x)
        for j in g.neighbors(i):
            z = x.clone()
            z[j] += torch.as_tensor(rng.standard_normal((d, 2)), dtype=DTYPE)
            worst = max(worst, float((apply(op, z)[i] - base[i]).abs().max()))
        z = x.clone()
        z[i] += torch.as_tensor(rng.standard_normal((d, 2)), dtype=DTYPE)
        moved = apply(op, z)
        for j in g.neighbors(i):
            worst = max(worst, float((moved[j] - base[j]).abs().max()))
    return {"passed": ok and worst < STRUCTURAL_ZERO, "max_residual": worst}


def run_all(seed: int = 0) -> dict:
    report = {
        "gating": gating_suite(seed=seed),
        "receptive_field": receptive_field_suite(seed=seed),
        "relay": relay_suite(seed=seed),
        "trivial_reduction": trivial_reduction_suite(seed=seed),
        "block_identity": block_identity_suite(seed=seed),
        "undirected_contrast": undirected_contrast_suite(seed=seed),
    }
    report["passed"] = all(v["passed"] for v in report.values())
    return report
