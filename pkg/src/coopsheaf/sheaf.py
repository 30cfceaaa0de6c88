"""Per-node source/target conformal maps and the node roles they induce.

A conformal map is ``C * Q`` with ``C >= 0`` and ``Q`` orthogonal. Each node
carries one source map (used on every arc it emits) and one target map (used
on every arc it receives).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
DEGENERATE_NORM = 1e-8
DEFAULT_ROLE_TOL = 1e-3


class Role(enum.Enum):
    STANDARD = "standard"
    LISTEN = "listen"
    BROADCAST = "broadcast"
    ISOLATE = "isolate"


@dataclass(frozen=True)
class ConformalMap:
    scale: torch.Tensor
    orthogonal: torch.Tensor

    @property
    def dimension(self) -> int:
        return self.orthogonal.shape[-1]

    def matrix(self) -> torch.Tensor:
        return self.scale * self.orthogonal


@dataclass(frozen=True)
class ConformalMapPair:
    source: ConformalMap
    target: ConformalMap

    def __post_init__(self):
        if self.source.dimension != self.target.dimension:
            raise ValueError("source and target maps differ in dimension")


@dataclass(frozen=True, eq=False)
class DirectedSheaf:
    """Stacked conformal maps for all nodes.

    ``source_scale`` and ``target_scale`` have shape (n,); the orthogonal
    factors have shape (n, d, d).
    """

    source_scale: torch.Tensor
    source_orth: torch.Tensor
    target_scale: torch.Tensor
    target_orth: torch.Tensor

    def __post_init__(self):
        n, d, d2 = self.source_orth.shape
        if d != d2 or self.target_orth.shape != (n, d, d):
            raise ValueError("orthogonal factors must be (n, d, d) and agree between source and target")
        if self.source_scale.shape != (n,) or self.target_scale.shape != (n,):
            raise ValueError("scales must have shape (n,)")

    @property
    def num_nodes(self) -> int:
        return self.source_orth.shape[0]

    @property
    def dimension(self) -> int:
        return self.source_orth.shape[-1]

    def source_maps(self) -> torch.Tensor:
        return self.source_scale[:, None, None] * self.source_orth

    def target_maps(self) -> torch.Tensor:
        return self.target_scale[:, None, None] * self.target_orth

    def pair(self, i: int) -> ConformalMapPair:
        return ConformalMapPair(
            ConformalMap(self.source_scale[i], self.source_orth[i]),
            ConformalMap(self.target_scale[i], self.target_orth[i]),
        )

    @property
    def maps(self) -> list[ConformalMapPair]:
        return [self.pair(i) for i in range(self.num_nodes)]

    @classmethod
    def from_pairs(cls, pairs: list[ConformalMapPair]) -> DirectedSheaf:
        return cls(
            torch.stack([torch.as_tensor(p.source.scale, dtype=DTYPE) for p in pairs]),
            torch.stack([torch.as_tensor(p.source.orthogonal, dtype=DTYPE) for p in pairs]),
            torch.stack([torch.as_tensor(p.target.scale, dtype=DTYPE) for p in pairs]),
            torch.stack([torch.as_tensor(p.target.orthogonal, dtype=DTYPE) for p in pairs]),
        )

    @classmethod
    def constant(cls, num_nodes: int, dimension: int = 1) -> DirectedSheaf:
        """Every map is the identity; with ``dimension=1`` this is the trivial sheaf."""
        one = torch.ones(num_nodes, dtype=DTYPE)
        eye = torch.eye(dimension, dtype=DTYPE).expand(num_nodes, dimension, dimension).clone()
        return cls(one, eye, one.clone(), eye.clone())

    def with_zeros(self, source=None, target=None) -> DirectedSheaf:
        """Copy with the listed nodes' source and/or target scales set to exactly zero."""
        s, t = self.source_scale.clone(), self.target_scale.clone()
        if source is not None:
            s[torch.as_tensor(source, dtype=torch.long)] = 0.0
        if target is not None:
            t[torch.as_tensor(target, dtype=torch.long)] = 0.0
        return DirectedSheaf(s, self.source_orth, t, self.target_orth)

    def roles(self, tol: float = DEFAULT_ROLE_TOL) -> list[Role]:
        return [role_of(p, tol) for p in self.maps]


def householder_orthogonal(reflection_vectors: torch.Tensor) -> torch.Tensor:
    """Product of Householder reflections ``I - 2 v v^T / |v|^2``.

    ``reflection_vectors`` has shape (..., k, d); the result has shape (..., d, d).
    A vector with norm below 1e-8 contributes an identity factor (and no gradient).
    """
    v = torch.as_tensor(reflection_vectors, dtype=DTYPE)
    if v.dim() < 2:
        raise ValueError("expected shape (..., k, d)")
    *batch, k, d = v.shape
    q = torch.eye(d, dtype=DTYPE).expand(*batch, d, d)
    for r in range(k):
        vr = v[..., r, :]
        sq = (vr * vr).sum(-1, keepdim=True)
        degenerate = sq < DEGENERATE_NORM**2
        coef = torch.where(degenerate, torch.zeros_like(sq), 2.0 / torch.where(degenerate, torch.ones_like(sq), sq))
        # Q H = Q - coef (Q v) v^T
        qv = (q @ vr.unsqueeze(-1)).squeeze(-1)
        q = q - coef.unsqueeze(-1) * qv.unsqueeze(-1) * vr.unsqueeze(-2)
    return q


def conformal_from_params(scale_param, reflection_vectors, frozen_zero: bool = False) -> ConformalMap:
    """Map ``softplus(scale_param) * Q(reflection_vectors)``, or the zero map when frozen."""
    scale_param = torch.as_tensor(scale_param, dtype=DTYPE)
    q = householder_orthogonal(reflection_vectors)
    scale = torch.zeros_like(scale_param) if frozen_zero else F.softplus(scale_param)
    return ConformalMap(scale, q)


def role_of(pair: ConformalMapPair, tol: float = DEFAULT_ROLE_TOL) -> Role:
    if tol < 0:
        raise ValueError("tol must be non-negative")
    silent_source = abs(float(pair.source.scale)) <= tol
    silent_target = abs(float(pair.target.scale)) <= tol
    if silent_source and silent_target:
        return Role.ISOLATE
    if silent_source:
        return Role.LISTEN
    if silent_target:
        return Role.BROADCAST
    return Role.STANDARD


def random_sheaf(
    num_nodes: int,
    dimension: int,
    rng: np.random.Generator,
    *,
    scale_range: tuple[float, float] = (0.5, 1.5),
    source_zero_prob: float = 0.0,
    target_zero_prob: float = 0.0,
) -> DirectedSheaf:
    """Sheaf with random orthogonal factors and scales, some frozen to zero."""

    def orth():
        vecs = torch.as_tensor(rng.standard_normal((num_nodes, dimension, dimension)), dtype=DTYPE)
        return householder_orthogonal(vecs)

    def scales(zero_prob):
        c = rng.uniform(*scale_range, size=num_nodes)
        c[rng.random(num_nodes) < zero_prob] = 0.0
        return torch.as_tensor(c, dtype=DTYPE)

    return DirectedSheaf(scales(source_zero_prob), orth(), scales(target_zero_prob), orth())
