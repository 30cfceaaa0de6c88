"""Cooperative sheaf diffusion model and a GCN baseline.

Parameters live in a flat :class:`ParameterStore` with dotted names::

    encoder.weight, encoder.bias
    layers.{t}.W1, layers.{t}.W2, layers.{t}.eps
    layers.{t}.source.*, layers.{t}.target.*     map predictors (eta / phi)
    layers.{t}.norm.weight, layers.{t}.norm.bias  only with layer_norm
    readout.weight, readout.bias

Hidden features are (n, d, h) tensors: a d x h block per node.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .graph import DirectedGraph
from .laplacian import build_in_transpose, build_out, compose_apply, normalize
from .sheaf import DTYPE, DirectedSheaf, householder_orthogonal
from .store import ParameterStore

ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "identity": lambda x: x,
    "gelu": F.gelu,
    "relu": F.relu,
}

_MEANAGG = re.compile(r"^meanagg-(\d+)$")


@dataclass
class ModelConfig:
    stalk_dim: int = 3
    hidden_channels: int = 32
    num_layers: int = 2
    activation: str = "gelu"
    left_weights: bool = True
    right_weights: bool = True
    map_predictor: str = "mlp2"
    predictor_hidden: int = 32
    num_reflections: int | None = None
    dsn_mode: bool = False
    dropout: float = 0.0
    input_dropout: float = 0.0
    epsilon_learnable: bool = True
    layer_norm: bool = False
    normalized: bool = True
    model: str = "csnn"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stalk_dim < 1 or self.hidden_channels < 1 or self.num_layers < 1:
            raise ValueError("stalk_dim, hidden_channels and num_layers must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}")
        for p in ("dropout", "input_dropout"):
            if not 0.0 <= getattr(self, p) < 1.0:
                raise ValueError(f"{p} must lie in [0, 1)")
        if self.map_predictor != "mlp2" and not _MEANAGG.match(self.map_predictor):
            raise ValueError(f"map_predictor must be 'mlp2' or 'meanagg-k', got {self.map_predictor!r}")
        if self.num_reflections is not None and self.num_reflections < 1:
            raise ValueError("num_reflections must be >= 1")
        if self.model not in ("csnn", "gcn"):
            raise ValueError(f"model must be 'csnn' or 'gcn', got {self.model!r}")

    @property
    def reflections(self) -> int:
        return self.num_reflections or self.stalk_dim

    @property
    def aggregation_rounds(self) -> int:
        m = _MEANAGG.match(self.map_predictor)
        return int(m.group(1)) if m else 0

    @property
    def width(self) -> int:
        return self.stalk_dim * self.hidden_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LayerParams:
    W1: torch.Tensor | None
    W2: torch.Tensor | None
    epsilon: torch.Tensor  # (d,) shared across nodes, or (n, d)
    predictor: dict[str, torch.Tensor]

    @classmethod
    def from_store(cls, params: ParameterStore, t: int, cfg: ModelConfig) -> LayerParams:
        p = f"layers.{t}"
        eps = params[f"{p}.eps"] if cfg.epsilon_learnable else torch.zeros(cfg.stalk_dim, dtype=DTYPE)
        return cls(
            W1=params.get(f"{p}.W1"),
            W2=params.get(f"{p}.W2"),
            epsilon=torch.tanh(eps),
            predictor=params.prefixed(p),
        )


# ---------------------------------------------------------------- initialization

def _normal(gen: torch.Generator, *shape: int, std: float) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=DTYPE) * std


def _linear(store: ParameterStore, name: str, fan_in: int, fan_out: int, gen: torch.Generator) -> None:
    store.add(f"{name}.weight", _normal(gen, fan_in, fan_out, std=1.0 / math.sqrt(fan_in)))
    store.add(f"{name}.bias", torch.zeros(fan_out, dtype=DTYPE))


def _init_predictor(store: ParameterStore, prefix: str, cfg: ModelConfig, gen: torch.Generator) -> None:
    hidden, out = cfg.predictor_hidden, 1 + cfg.reflections * cfg.stalk_dim
    rounds = cfg.aggregation_rounds
    if rounds == 0:
        _linear(store, f"{prefix}.lin1", cfg.width, hidden, gen)
        _linear(store, f"{prefix}.lin2", hidden, out, gen)
    else:
        fan_in = cfg.width
        for r in range(rounds):
            store.add(f"{prefix}.agg{r}.self", _normal(gen, fan_in, hidden, std=1.0 / math.sqrt(2 * fan_in)))
            store.add(f"{prefix}.agg{r}.nbr", _normal(gen, fan_in, hidden, std=1.0 / math.sqrt(2 * fan_in)))
            store.add(f"{prefix}.agg{r}.bias", torch.zeros(hidden, dtype=DTYPE))
            fan_in = hidden
        _linear(store, f"{prefix}.head", hidden, out, gen)
    # random bias keeps the reflection vectors away from the degenerate zero vector
    bias = store[f"{prefix}.{'lin2' if rounds == 0 else 'head'}.bias"]
    with torch.no_grad():
        bias[1:] = _normal(gen, out - 1, std=1.0)


def init_params(cfg: ModelConfig, input_dim: int, num_classes: int, seed: int = 0) -> ParameterStore:
    gen = torch.Generator().manual_seed(seed)
    if cfg.model == "gcn":
        return _init_gcn(cfg, input_dim, num_classes, gen)
    d, h = cfg.stalk_dim, cfg.hidden_channels
    store = ParameterStore()
    _linear(store, "encoder", input_dim, cfg.width, gen)
    for t in range(cfg.num_layers):
        p = f"layers.{t}"
        if cfg.left_weights:
            store.add(f"{p}.W1", torch.eye(d, dtype=DTYPE) + _normal(gen, d, d, std=0.01))
        if cfg.right_weights:
            store.add(f"{p}.W2", _normal(gen, h, h, std=1.0 / math.sqrt(h)))
        if cfg.epsilon_learnable:
            store.add(f"{p}.eps", torch.zeros(d, dtype=DTYPE))
        _init_predictor(store, f"{p}.source", cfg, gen)
        _init_predictor(store, f"{p}.target", cfg, gen)
        if cfg.layer_norm:
            store.add(f"{p}.norm.weight", torch.ones(cfg.width, dtype=DTYPE))
            store.add(f"{p}.norm.bias", torch.zeros(cfg.width, dtype=DTYPE))
    _linear(store, "readout", cfg.width, num_classes, gen)
    return store


# ---------------------------------------------------------------- building blocks

def _dense(x: torch.Tensor, p: dict[str, torch.Tensor], name: str) -> torch.Tensor:
    return x @ p[f"{name}.weight"] + p[f"{name}.bias"]


def _layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps=1e-5)


def neighbor_mean(x: torch.Tensor, g: DirectedGraph) -> torch.Tensor:
    total = torch.zeros_like(x).index_add(0, g.source_index, x[g.target_index])
    deg = g.degree_tensor.clamp(min=1.0)
    return total / deg.reshape(-1, *([1] * (x.dim() - 1)))


def encode_input(raw: torch.Tensor, params: ParameterStore, cfg: ModelConfig) -> torch.Tensor:
    raw = torch.as_tensor(raw, dtype=DTYPE)
    w = params["encoder.weight"]
    if raw.dim() != 2 or raw.shape[1] != w.shape[0]:
        raise ValueError(f"expected (n, {w.shape[0]}) input features, got {tuple(raw.shape)}")
    x = ACTIVATIONS[cfg.activation](raw @ w + params["encoder.bias"])
    return x.reshape(raw.shape[0], cfg.stalk_dim, cfg.hidden_channels)


def _predictor_output(x: torch.Tensor, g: DirectedGraph, p: dict[str, torch.Tensor], cfg: ModelConfig) -> torch.Tensor:
    rounds = cfg.aggregation_rounds
    if rounds == 0:
        return _dense(F.gelu(_dense(x, p, "lin1")), p, "lin2")
    for r in range(rounds):
        x = F.gelu(x @ p[f"agg{r}.self"] + neighbor_mean(x, g) @ p[f"agg{r}.nbr"] + p[f"agg{r}.bias"])
    return _dense(x, p, "head")


def predict_maps(
    x: torch.Tensor,
    g: DirectedGraph,
    predictor: dict[str, torch.Tensor],
    cfg: ModelConfig,
    frozen_source=None,
    frozen_target=None,
) -> DirectedSheaf:
    """Source maps from the ``source.*`` network, target maps from ``target.*``.

    ``frozen_source`` / ``frozen_target`` are optional boolean node masks whose
    maps are forced to exactly zero.
    """
    n, d = x.shape[0], cfg.stalk_dim
    flat = x.reshape(n, -1)
    out = []
    for side, frozen in (("source", frozen_source), ("target", frozen_target)):
        p = {k[len(side) + 1:]: v for k, v in predictor.items() if k.startswith(side + ".")}
        raw = _predictor_output(flat, g, p, cfg)
        orth = householder_orthogonal(raw[:, 1:].reshape(n, cfg.reflections, d))
        scale = torch.ones(n, dtype=DTYPE) if cfg.dsn_mode else F.softplus(raw[:, 0])
        if frozen is not None:
            scale = torch.where(torch.as_tensor(frozen, dtype=torch.bool), torch.zeros_like(scale), scale)
        out += [scale, orth]
    return DirectedSheaf(*out)


def diffusion_term(x: torch.Tensor, sheaf: DirectedSheaf, g: DirectedGraph, normalized: bool = True) -> torch.Tensor:
    """``(L^in)^T L^out x`` (or its normalized counterpart) for x of shape (n, d, h)."""
    out_op, in_op = build_out(sheaf, g), build_in_transpose(sheaf, g)
    if normalized:
        out_op, in_op = normalize(out_op, "out"), normalize(in_op, "in")
    return compose_apply(in_op, out_op, x)


def csnn_layer(x: torch.Tensor, sheaf: DirectedSheaf, g: DirectedGraph, lp: LayerParams, cfg: ModelConfig) -> torch.Tensor:
    """``(1 + eps) x - act((Delta^in)^T Delta^out (I (x) W1) x W2)``."""
    n, d = g.num_nodes, cfg.stalk_dim
    if x.dim() != 3 or x.shape[:2] != (n, d):
        raise ValueError(f"expected features of shape ({n}, {d}, h), got {tuple(x.shape)}")
    y = x
    if cfg.left_weights and lp.W1 is not None:
        y = torch.einsum("ab,nbh->nah", lp.W1, y)
    if cfg.right_weights and lp.W2 is not None:
        y = y @ lp.W2
    diff = diffusion_term(y, sheaf, g, cfg.normalized)
    eps = lp.epsilon.reshape(-1, d, 1) if lp.epsilon.dim() == 2 else lp.epsilon.reshape(1, d, 1)
    return (1.0 + eps) * x - ACTIVATIONS[cfg.activation](diff)


def readout(x: torch.Tensor, params: ParameterStore) -> torch.Tensor:
    flat = x.reshape(x.shape[0], -1)
    w = params["readout.weight"]
    if flat.shape[1] != w.shape[0]:
        raise ValueError(f"readout expects {w.shape[0]} features per node, got {flat.shape[1]}")
    return flat @ w + params["readout.bias"]


def forward(
    cfg: ModelConfig,
    params: ParameterStore,
    g: DirectedGraph,
    raw_features,
    *,
    training: bool = False,
    frozen_source=None,
    frozen_target=None,
    trace: list | None = None,
) -> torch.Tensor:
    """Per-node class logits. ``trace``, when given, collects each layer's sheaf."""
    if cfg.model == "gcn":
        return gcn_forward(cfg, params, g, raw_features, training=training)
    raw = torch.as_tensor(raw_features, dtype=DTYPE)
    raw = F.dropout(raw, cfg.input_dropout, training=training)
    x = encode_input(raw, params, cfg)
    for t in range(cfg.num_layers):
        lp = LayerParams.from_store(params, t, cfg)
        x = F.dropout(x, cfg.dropout, training=training)
        sheaf = predict_maps(x, g, lp.predictor, cfg, frozen_source, frozen_target)
        if trace is not None:
            trace.append(sheaf)
        x = csnn_layer(x, sheaf, g, lp, cfg)
        if cfg.layer_norm:
            n = x.shape[0]
            x = _layer_norm(x.reshape(n, -1), params[f"layers.{t}.norm.weight"], params[f"layers.{t}.norm.bias"])
            x = x.reshape(n, cfg.stalk_dim, cfg.hidden_channels)
    return readout(x, params)


# ---------------------------------------------------------------- GCN baseline

def gcn_propagation(g: DirectedGraph) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Rows, cols and weights of D^{-1/2} (A + I) D^{-1/2}."""
    n = g.num_nodes
    loops = torch.arange(n)
    rows = torch.cat([g.source_index, loops])
    cols = torch.cat([g.target_index, loops])
    inv_sqrt = (g.degree_tensor + 1.0).rsqrt()
    return rows, cols, inv_sqrt[rows] * inv_sqrt[cols]


def gcn_layer(x: torch.Tensor, g: DirectedGraph, w: torch.Tensor, activation: str = "identity") -> torch.Tensor:
    x = torch.as_tensor(x, dtype=DTYPE)
    w = torch.as_tensor(w, dtype=DTYPE)
    if x.dim() != 2 or x.shape[0] != g.num_nodes or x.shape[1] != w.shape[0]:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)}, W {tuple(w.shape)}, n={g.num_nodes}")
    rows, cols, vals = gcn_propagation(g)
    xw = x @ w
    out = torch.zeros(g.num_nodes, w.shape[1], dtype=DTYPE).index_add(0, rows, vals[:, None] * xw[cols])
    return ACTIVATIONS[activation](out)


def _init_gcn(cfg: ModelConfig, input_dim: int, num_classes: int, gen: torch.Generator) -> ParameterStore:
    h = cfg.hidden_channels
    store = ParameterStore()
    _linear(store, "encoder", input_dim, h, gen)
    for t in range(cfg.num_layers):
        store.add(f"layers.{t}.W", _normal(gen, h, h, std=1.0 / math.sqrt(h)))
        store.add(f"layers.{t}.bias", torch.zeros(h, dtype=DTYPE))
        if cfg.layer_norm:
            store.add(f"layers.{t}.norm.weight", torch.ones(h, dtype=DTYPE))
            store.add(f"layers.{t}.norm.bias", torch.zeros(h, dtype=DTYPE))
    _linear(store, "readout", h, num_classes, gen)
    return store


def gcn_forward(cfg: ModelConfig, params: ParameterStore, g: DirectedGraph, raw_features, *, training: bool = False):
    """GCN sharing depth, width and activation with the sheaf model."""
    raw = torch.as_tensor(raw_features, dtype=DTYPE)
    raw = F.dropout(raw, cfg.input_dropout, training=training)
    x = raw @ params["encoder.weight"] + params["encoder.bias"]
    for t in range(cfg.num_layers):
        x = F.dropout(x, cfg.dropout, training=training)
        x = ACTIVATIONS[cfg.activation](gcn_layer(x, g, params[f"layers.{t}.W"]) + params[f"layers.{t}.bias"])
        if cfg.layer_norm:
            x = _layer_norm(x, params[f"layers.{t}.norm.weight"], params[f"layers.{t}.norm.bias"])
    return readout(x, params)


def permute_features(raw: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Rows moved so that row i lands at position perm[i]."""
    out = np.empty_like(raw)
    out[perm] = raw
    return out
