"""Cellular sheaves over directed graphs and cooperative sheaf diffusion."""

from .graph import DirectedGraph, bfs_distances, from_undirected_edges
from .laplacian import (
    BlockOperator,
    apply,
    build_in_transpose,
    build_out,
    build_undirected_flat,
    compose_apply,
    normalize,
)
from .model import ModelConfig, forward, init_params
from .sheaf import (
    ConformalMap,
    ConformalMapPair,
    DirectedSheaf,
    Role,
    conformal_from_params,
    householder_orthogonal,
    role_of,
)
from .store import ParameterStore

__version__ = "0.1.0"
