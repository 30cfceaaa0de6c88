"""Block-sparse directed sheaf Laplacians.

Operators are stored block-CSR style: one d x d block per arc plus a block
diagonal. For conformal maps every diagonal block is a scalar times the
identity, so the diagonal is kept as a length-n vector of scalars, and each
off-diagonal block factors as ``arc_scale[e] * left[i] @ right[j]`` with
per-node orthogonal factors. Products then cost one small matmul per node
instead of one per arc; explicit blocks are materialized only on request.

Feature matrices are handled as (n, d, h) tensors; a flattened (n*d, h)
input is accepted and returned in the same shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .graph import DirectedGraph
from .sheaf import DTYPE, DirectedSheaf

CONFORMAL_TOL = 1e-8


def set_deterministic(flag: bool = True) -> None:
    """Fix the summation order of scatter operations so results are bit-reproducible."""
    torch.use_deterministic_algorithms(flag)
    if flag:
        torch.set_num_threads(1)


@dataclass(frozen=True, eq=False)
class BlockOperator:
    num_nodes: int
    dimension: int
    rows: torch.Tensor
    cols: torch.Tensor
    blocks: torch.Tensor | None = None
    diag_scale: torch.Tensor | None = None
    diag_dense: torch.Tensor | None = None
    kind: str = ""
    arc_scale: torch.Tensor | None = None
    left: torch.Tensor | None = None
    right: torch.Tensor | None = None

    def __post_init__(self):
        if (self.diag_scale is None) == (self.diag_dense is None):
            raise ValueError("exactly one of diag_scale / diag_dense must be given")
        factored = (self.arc_scale, self.left, self.right)
        if all(f is None for f in factored) == (self.blocks is None):
            raise ValueError("give either explicit blocks or arc_scale/left/right factors")
        if self.blocks is None and any(f is None for f in factored):
            raise ValueError("factored form needs arc_scale, left and right together")

    @property
    def factored(self) -> bool:
        return self.blocks is None

    @property
    def offdiag(self) -> torch.Tensor:
        """Explicit (m, d, d) off-diagonal blocks, one per arc."""
        if self.blocks is not None:
            return self.blocks
        return self.arc_scale[:, None, None] * (self.left[self.rows] @ self.right[self.cols])

    @property
    def shape(self) -> tuple[int, int]:
        nd = self.num_nodes * self.dimension
        return nd, nd

    def diag_blocks(self) -> torch.Tensor:
        if self.diag_dense is not None:
            return self.diag_dense
        eye = torch.eye(self.dimension, dtype=DTYPE)
        return self.diag_scale[:, None, None] * eye

    def to_dense(self) -> torch.Tensor:
        n, d = self.num_nodes, self.dimension
        dense = torch.zeros(n, d, n, d, dtype=DTYPE)
        idx = torch.arange(n)
        dense[idx, :, idx, :] = self.diag_blocks()
        dense[self.rows, :, self.cols, :] = self.offdiag
        return dense.reshape(n * d, n * d)

    def block(self, i: int, j: int) -> torch.Tensor:
        if i == j:
            return self.diag_blocks()[i]
        hit = ((self.rows == i) & (self.cols == j)).nonzero()
        if len(hit) == 0:
            return torch.zeros(self.dimension, self.dimension, dtype=DTYPE)
        return self.offdiag[hit[0, 0]]

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        return apply(self, x)


def _check(sheaf: DirectedSheaf, g: DirectedGraph) -> None:
    if sheaf.num_nodes != g.num_nodes:
        raise ValueError(f"sheaf has {sheaf.num_nodes} nodes, graph has {g.num_nodes}")


def _arc_scale(sheaf: DirectedSheaf, g: DirectedGraph) -> torch.Tensor:
    # block (i, j) = -T_i^T S_j = -(cT_i cS_j) R_i^T Q_j, shared by both operators
    return -(sheaf.target_scale[g.source_index] * sheaf.source_scale[g.target_index])


def build_out(sheaf: DirectedSheaf, g: DirectedGraph) -> BlockOperator:
    """Out-degree sheaf Laplacian: diag |N(i)| S_i^T S_i, off-diagonal -T_i^T S_j."""
    _check(sheaf, g)
    return BlockOperator(
        g.num_nodes, sheaf.dimension, g.source_index, g.target_index,
        diag_scale=g.degree_tensor * sheaf.source_scale**2, kind="out",
        arc_scale=_arc_scale(sheaf, g), left=sheaf.target_orth.transpose(-1, -2), right=sheaf.source_orth,
    )


def build_in_transpose(sheaf: DirectedSheaf, g: DirectedGraph) -> BlockOperator:
    """Transposed in-degree sheaf Laplacian: diag |N(i)| T_i^T T_i, off-diagonal -T_i^T S_j."""
    _check(sheaf, g)
    return BlockOperator(
        g.num_nodes, sheaf.dimension, g.source_index, g.target_index,
        diag_scale=g.degree_tensor * sheaf.target_scale**2, kind="in_t",
        arc_scale=_arc_scale(sheaf, g), left=sheaf.target_orth.transpose(-1, -2), right=sheaf.source_orth,
    )


def build_undirected_flat(orthogonal_maps: torch.Tensor, g: DirectedGraph) -> BlockOperator:
    """Flat vector-bundle Laplacian: diag |N(i)| I, off-diagonal -O_i^T O_j."""
    maps = torch.as_tensor(orthogonal_maps, dtype=DTYPE)
    if maps.dim() != 3 or maps.shape[0] != g.num_nodes or maps.shape[1] != maps.shape[2]:
        raise ValueError(f"expected ({g.num_nodes}, d, d) maps, got {tuple(maps.shape)}")
    return BlockOperator(
        g.num_nodes, maps.shape[-1], g.source_index, g.target_index,
        diag_scale=g.degree_tensor.clone(), kind="flat",
        arc_scale=-torch.ones(len(g.source_index), dtype=DTYPE), left=maps.transpose(-1, -2), right=maps,
    )


def _diag_scalars(op: BlockOperator) -> torch.Tensor:
    if op.diag_scale is not None:
        return op.diag_scale
    blocks = op.diag_dense
    s = torch.diagonal(blocks, dim1=-2, dim2=-1).mean(-1)
    resid = (blocks - s[:, None, None] * torch.eye(op.dimension, dtype=DTYPE)).abs().amax(dim=(-1, -2))
    bad = (resid > CONFORMAL_TOL).nonzero().flatten()
    if len(bad):
        raise ValueError(f"diagonal block of node {int(bad[0])} is not a scalar multiple of the identity")
    return s


def normalize(op: BlockOperator, mode: str) -> BlockOperator:
    """``D^{-1/2} L D^{-1/2}`` with D the block diagonal of ``op``; zero blocks stay zero."""
    if mode not in ("out", "in"):
        raise ValueError(f"mode must be 'out' or 'in', got {mode!r}")
    expected = {"out": "out", "in": "in_t"}[mode]
    if op.kind and op.kind != expected:
        raise ValueError(f"cannot normalize a {op.kind!r} operator in mode {mode!r}")
    s = _diag_scalars(op)
    positive = s > 0
    safe = torch.where(positive, s, torch.ones_like(s))
    inv_sqrt = torch.where(positive, safe.rsqrt(), torch.zeros_like(s))
    coef = inv_sqrt[op.rows] * inv_sqrt[op.cols]
    if op.factored:
        return BlockOperator(
            op.num_nodes, op.dimension, op.rows, op.cols, diag_scale=positive.to(DTYPE), kind=op.kind,
            arc_scale=coef * op.arc_scale, left=op.left, right=op.right,
        )
    return BlockOperator(
        op.num_nodes, op.dimension, op.rows, op.cols, coef[:, None, None] * op.blocks,
        diag_scale=positive.to(DTYPE), kind=op.kind,
    )


def _as_blocks(op: BlockOperator, x: torch.Tensor) -> torch.Tensor:
    n, d = op.num_nodes, op.dimension
    if x.dim() == 2:
        if x.shape[0] != n * d:
            raise ValueError(f"feature matrix has {x.shape[0]} rows, operator expects {n * d}")
        return x.reshape(n, d, -1)
    if x.dim() == 3 and x.shape[:2] == (n, d):
        return x
    raise ValueError(f"feature shape {tuple(x.shape)} incompatible with n={n}, d={d}")


def apply(op: BlockOperator, x: torch.Tensor) -> torch.Tensor:
    """Block-sparse product ``op @ x``."""
    xb = _as_blocks(op, x)
    if op.diag_scale is not None:
        out = op.diag_scale[:, None, None] * xb
    else:
        out = op.diag_dense @ xb
    if not len(op.rows):
        return out.reshape(x.shape)
    if op.factored:
        # sum_j c_ij L_i R_j x_j = L_i sum_j c_ij (R_j x_j)
        moved = _small_matmul(op.right, xb)
        gathered = torch.zeros_like(xb).index_add(0, op.rows, op.arc_scale[:, None, None] * moved[op.cols])
        out = out + _small_matmul(op.left, gathered)
    else:
        out = out.index_add(0, op.rows, op.blocks @ xb[op.cols])
    return out.reshape(x.shape)


def _small_matmul(a: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return torch.einsum("nab,nbh->nah", a, x)


def compose_apply(in_t: BlockOperator, out: BlockOperator, x: torch.Tensor) -> torch.Tensor:
    """``in_t @ (out @ x)`` without forming the product operator."""
    if (in_t.num_nodes, in_t.dimension) != (out.num_nodes, out.dimension):
        raise ValueError("operators disagree in size")
    return apply(in_t, apply(out, x))
