import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from coopsheaf.graph import bfs_distances, cycle_graph, from_undirected_edges, path_graph, random_graph, random_tree
from coopsheaf.laplacian import (
    BlockOperator,
    apply,
    build_in_transpose,
    build_out,
    build_undirected_flat,
    compose_apply,
    normalize,
)
from coopsheaf.sheaf import DTYPE, DirectedSheaf, householder_orthogonal, random_sheaf
from coopsheaf.verify import (
    dense_composition,
    dense_flat_laplacian,
    dense_graph_laplacian,
    dense_in_laplacian,
    dense_out_laplacian,
)


def t(x):
    return torch.as_tensor(x, dtype=DTYPE)


def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def test_trivial_single_edge():
    g = from_undirected_edges([(0, 1)], 2)
    op = build_out(DirectedSheaf.constant(2, 1), g)
    assert torch.equal(op.to_dense(), t([[1.0, -1.0], [-1.0, 1.0]]))


def test_zero_target_clears_row_offdiag(rng):
    g = cycle_graph(4)
    sheaf = random_sheaf(4, 2, rng).with_zeros(target=[0])
    op = build_out(sheaf, g)
    for j in g.neighbors(0):
        assert torch.equal(op.block(0, int(j)), torch.zeros(2, 2, dtype=DTYPE))
    expected = g.degree[0] * sheaf.source_scale[0] ** 2 * torch.eye(2, dtype=DTYPE)
    assert torch.allclose(op.block(0, 0), expected, rtol=0, atol=1e-15)


def test_rotations_on_triangle_match_oracle():
    g = cycle_graph(3)
    rots = t(np.stack([rotation(a) for a in (0.3, 1.1, -0.7)]))
    rots2 = t(np.stack([rotation(a) for a in (2.0, -0.4, 0.9)]))
    sheaf = DirectedSheaf(t([0.5, 1.0, 1.5]), rots, t([1.2, 0.7, 0.9]), rots2)
    assert np.abs(build_out(sheaf, g).to_dense().numpy() - dense_out_laplacian(sheaf, g)).max() < 1e-12
    assert np.abs(build_in_transpose(sheaf, g).to_dense().numpy() - dense_in_laplacian(sheaf, g).T).max() < 1e-12


def test_trivial_in_equals_out():
    g = random_graph(8, 0.4, np.random.default_rng(0))
    sheaf = DirectedSheaf.constant(8, 1)
    assert torch.equal(build_out(sheaf, g).to_dense(), build_in_transpose(sheaf, g).to_dense())


def test_zero_source_clears_column(rng):
    g = cycle_graph(5)
    sheaf = random_sheaf(5, 2, rng).with_zeros(source=[2])
    dense = build_in_transpose(sheaf, g).to_dense().reshape(5, 2, 5, 2)
    for i in g.neighbors(2):
        assert torch.equal(dense[int(i), :, 2, :], torch.zeros(2, 2, dtype=DTYPE))


def test_normalize_trivial_two_regular():
    g = cycle_graph(6)
    op = normalize(build_out(DirectedSheaf.constant(6, 1), g), "out")
    expected = np.eye(6) - g.adjacency() / 2.0
    assert np.abs(op.to_dense().numpy() - expected).max() < 1e-15


def test_normalize_frozen_zero_rows_and_columns(rng):
    g = cycle_graph(5)
    sheaf = random_sheaf(5, 2, rng).with_zeros(source=[1])
    dense = normalize(build_out(sheaf, g), "out").to_dense().reshape(5, 2, 5, 2)
    assert torch.equal(dense[1], torch.zeros(2, 5, 2, dtype=DTYPE))
    assert torch.equal(dense[:, :, 1], torch.zeros(5, 2, 2, dtype=DTYPE))


def test_normalize_isolated_node():
    g = from_undirected_edges([(0, 1)], 3)
    dense = normalize(build_out(DirectedSheaf.constant(3, 1), g), "out").to_dense()
    assert torch.equal(dense[2], torch.zeros(3, dtype=DTYPE))


def test_normalized_diag_is_identity(rng):
    for _ in range(10):
        n, d = int(rng.integers(2, 9)), int(rng.integers(1, 4))
        g = random_graph(n, 0.5, rng)
        sheaf = random_sheaf(n, d, rng)
        diag = normalize(build_in_transpose(sheaf, g), "in").diag_blocks()
        live = torch.as_tensor(g.degree) > 0
        if live.any():
            assert float((diag[live] - torch.eye(d, dtype=DTYPE)).abs().max()) < 1e-10


def test_normalize_rejects_non_conformal_diag():
    op = BlockOperator(2, 2, torch.tensor([0, 1]), torch.tensor([1, 0]), torch.zeros(2, 2, 2, dtype=DTYPE),
                       diag_dense=t([[[1.0, 0.5], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]]))
    with pytest.raises(ValueError, match="scalar multiple"):
        normalize(op, "out")


def test_normalize_rejects_wrong_mode(rng):
    op = build_out(random_sheaf(3, 1, rng), path_graph(3))
    with pytest.raises(ValueError):
        normalize(op, "in")
    with pytest.raises(ValueError):
        normalize(op, "sideways")


def test_explicit_and_factored_forms_agree(rng):
    g = random_graph(7, 0.5, rng)
    sheaf = random_sheaf(7, 3, rng)
    fac = build_out(sheaf, g)
    exp = BlockOperator(7, 3, fac.rows, fac.cols, fac.offdiag, diag_scale=fac.diag_scale, kind="out")
    x = t(rng.standard_normal((7, 3, 4)))
    assert float((apply(fac, x) - apply(exp, x)).abs().max()) < 1e-12
    assert float((normalize(fac, "out").to_dense() - normalize(exp, "out").to_dense()).abs().max()) < 1e-12


def test_operator_needs_one_diagonal():
    with pytest.raises(ValueError):
        BlockOperator(1, 1, torch.tensor([], dtype=torch.long), torch.tensor([], dtype=torch.long),
                      torch.zeros(0, 1, 1, dtype=DTYPE))


def test_zero_operator_gives_zero(rng):
    g = path_graph(4)
    sheaf = random_sheaf(4, 2, rng).with_zeros(source=range(4), target=range(4))
    x = t(rng.standard_normal((4, 2, 3)))
    assert torch.equal(apply(build_out(sheaf, g), x), torch.zeros_like(x))


def test_identity_diag_is_noop(rng):
    g = from_undirected_edges([], 3)
    op = BlockOperator(3, 2, g.source_index, g.target_index, torch.zeros(0, 2, 2, dtype=DTYPE),
                       diag_scale=torch.ones(3, dtype=DTYPE))
    x = t(rng.standard_normal((6, 5)))
    assert torch.equal(apply(op, x), x)


def test_apply_matches_dense_product(rng):
    g = random_graph(6, 0.6, rng)
    sheaf = random_sheaf(6, 3, rng)
    x = t(rng.standard_normal((18, 4)))
    for op in (build_out(sheaf, g), build_in_transpose(sheaf, g)):
        assert float((apply(op, x) - op.to_dense() @ x).abs().max()) < 1e-12


def test_apply_shape_errors(rng):
    op = build_out(random_sheaf(3, 2, rng), path_graph(3))
    with pytest.raises(ValueError):
        apply(op, torch.zeros(5, 2, dtype=DTYPE))
    with pytest.raises(ValueError):
        apply(op, torch.zeros(3, 3, 1, dtype=DTYPE))


def test_compose_shape_mismatch(rng):
    a = build_out(random_sheaf(3, 2, rng), path_graph(3))
    b = build_out(random_sheaf(4, 2, rng), path_graph(4))
    with pytest.raises(ValueError):
        compose_apply(a, b, torch.zeros(3, 2, 1, dtype=DTYPE))


def test_build_rejects_size_mismatch(rng):
    with pytest.raises(ValueError):
        build_out(random_sheaf(3, 2, rng), path_graph(4))


def test_compose_zero_target_row(rng):
    g = random_graph(6, 0.7, rng)
    sheaf = random_sheaf(6, 2, rng).with_zeros(target=[3])
    x = t(rng.standard_normal((6, 2, 3)))
    out = compose_apply(build_in_transpose(sheaf, g), build_out(sheaf, g), x)
    assert torch.equal(out[3], torch.zeros(2, 3, dtype=DTYPE))


def test_compose_all_zero_targets(rng):
    g = random_graph(6, 0.7, rng)
    sheaf = random_sheaf(6, 2, rng).with_zeros(target=range(6))
    x = t(rng.standard_normal((6, 2, 3)))
    assert torch.equal(compose_apply(build_in_transpose(sheaf, g), build_out(sheaf, g), x), torch.zeros_like(x))


def test_compose_trivial_is_laplacian_squared(rng):
    g = random_graph(10, 0.3, rng)
    sheaf = DirectedSheaf.constant(10, 1)
    x = t(rng.standard_normal((10, 3)))
    lap = t(dense_graph_laplacian(g))
    got = compose_apply(build_in_transpose(sheaf, g), build_out(sheaf, g), x)
    assert float((got - lap @ lap @ x).abs().max()) < 1e-10


def test_compose_ignores_silent_neighbor(rng):
    g = cycle_graph(5)
    sheaf = random_sheaf(5, 2, rng).with_zeros(source=[1])
    ops = build_in_transpose(sheaf, g), build_out(sheaf, g)
    x = t(rng.standard_normal((5, 2, 2)))
    z = x.clone()
    z[1] += 10.0
    assert float((compose_apply(*ops, z)[0] - compose_apply(*ops, x)[0]).abs().max()) < 1e-12


def test_compose_matches_dense_oracle(rng):
    g = random_graph(7, 0.5, rng)
    sheaf = random_sheaf(7, 2, rng)
    x = t(rng.standard_normal((14, 3)))
    got = compose_apply(build_in_transpose(sheaf, g), build_out(sheaf, g), x).numpy()
    assert np.abs(got - dense_composition(sheaf, g) @ x.numpy()).max() < 1e-10


def test_compose_two_hop_sparsity(rng):
    g = random_tree(5, rng)
    n = g.num_nodes
    sheaf = random_sheaf(n, 2, rng)
    dense = dense_composition(sheaf, g).reshape(n, 2, n, 2)
    for i in range(n):
        far = bfs_distances(g, i) > 2
        assert np.abs(dense[i][:, far]).max(initial=0.0) == 0.0
    x = t(rng.standard_normal((n, 2, 1)))
    ops = build_in_transpose(sheaf, g), build_out(sheaf, g)
    base = compose_apply(*ops, x)
    dist = bfs_distances(g, 0)
    for j in np.flatnonzero(dist > 2):
        z = x.clone()
        z[j] += 1.0
        assert torch.equal(compose_apply(*ops, z)[0], base[0])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(1, 3), st.integers(0, 2**16))
def test_linearity(n, d, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(n, 0.5, rng)
    sheaf = random_sheaf(n, d, rng, source_zero_prob=0.2, target_zero_prob=0.2)
    ops = build_in_transpose(sheaf, g), build_out(sheaf, g)
    x, y = t(rng.standard_normal((n, d, 2))), t(rng.standard_normal((n, d, 2)))
    a, b = rng.standard_normal(2)
    lhs = apply(ops[1], a * x + b * y)
    assert float((lhs - (a * apply(ops[1], x) + b * apply(ops[1], y))).abs().max()) < 1e-10
    lhs = compose_apply(*ops, a * x + b * y)
    assert float((lhs - (a * compose_apply(*ops, x) + b * compose_apply(*ops, y))).abs().max()) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 9), st.integers(1, 4), st.integers(0, 2**16))
def test_offdiag_blocks_equal(n, d, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(n, 0.5, rng)
    sheaf = random_sheaf(n, d, rng, source_zero_prob=0.3, target_zero_prob=0.3)
    assert torch.equal(build_out(sheaf, g).offdiag, build_in_transpose(sheaf, g).offdiag)


def test_flat_identity_maps_give_graph_laplacian(rng):
    g = random_graph(6, 0.5, rng)
    op = build_undirected_flat(torch.eye(1, dtype=DTYPE).expand(6, 1, 1), g)
    assert np.array_equal(op.to_dense().numpy(), dense_graph_laplacian(g))


def test_flat_zero_map_cancels_both_directions(rng):
    g = cycle_graph(4)
    maps = householder_orthogonal(t(rng.standard_normal((4, 2, 2))))
    maps[0] = 0.0
    dense = build_undirected_flat(maps, g).to_dense().reshape(4, 2, 4, 2)
    for j in g.neighbors(0):
        assert torch.equal(dense[0, :, int(j)], torch.zeros(2, 2, dtype=DTYPE))
        assert torch.equal(dense[int(j), :, 0], torch.zeros(2, 2, dtype=DTYPE))


def test_flat_random_rotations_match_oracle(rng):
    g = random_graph(6, 0.6, rng)
    maps = householder_orthogonal(t(rng.standard_normal((6, 3, 3))))
    op = build_undirected_flat(maps, g)
    assert np.abs(op.to_dense().numpy() - dense_flat_laplacian(maps.numpy(), g)).max() < 1e-12


def test_flat_rejects_bad_shape():
    with pytest.raises(ValueError):
        build_undirected_flat(torch.zeros(3, 2, 3, dtype=DTYPE), path_graph(3))
