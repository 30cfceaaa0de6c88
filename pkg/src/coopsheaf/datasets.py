"""Node-classification datasets: synthetic generators and a JSON graph format.

Graph file schema (UTF-8 JSON)::

    {
      "num_nodes": int,
      "edges": [[i, j], ...],             undirected; doubled on load
      "features": [[float, ...], ...],     num_nodes rows of equal width
      "labels": [int, ...],                -1 marks an unlabeled node
      "splits": [{"train": [...], "val": [...], "test": [...]}, ...],
      "metric": "accuracy" | "roc_auc",
      "num_classes": int,                  optional
      "meta": {...}                        optional, free-form
    }

Split lists hold node indices. Within one split the three lists are disjoint.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import jsonschema
import numpy as np
import torch

from .graph import DirectedGraph, disjoint_union, from_undirected_edges, path_graph
from .sheaf import DTYPE, DirectedSheaf, householder_orthogonal

UNLABELED = -1

GRAPH_SCHEMA = {
    "type": "object",
    "required": ["num_nodes", "edges", "features", "labels", "splits", "metric"],
    "properties": {
        "num_nodes": {"type": "integer", "minimum": 0},
        "edges": {"type": "array", "items": {
            "type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2}},
        "features": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "labels": {"type": "array", "items": {"type": "integer", "minimum": UNLABELED}},
        "splits": {"type": "array", "items": {
            "type": "object",
            "required": ["train", "val", "test"],
            "properties": {k: {"type": "array", "items": {"type": "integer"}} for k in ("train", "val", "test")},
        }},
        "metric": {"enum": ["accuracy", "roc_auc"]},
        "num_classes": {"type": "integer", "minimum": 1},
        "meta": {"type": "object"},
    },
}


class DatasetError(ValueError):
    """A data file that does not match the documented schema."""


@dataclass(eq=False)
class NodeDataset:
    graph: DirectedGraph
    features: np.ndarray
    labels: np.ndarray
    splits: list[dict[str, np.ndarray]]
    metric: str = "accuracy"
    num_classes: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.graph.num_nodes
        if self.features.shape[0] != n or self.labels.shape != (n,):
            raise ValueError("features and labels must have one row per node")
        if not self.num_classes:
            self.num_classes = int(self.labels.max()) + 1 if (self.labels >= 0).any() else 1
        if (self.labels >= self.num_classes).any():
            raise ValueError("label out of range")
        self.splits = [{k: np.asarray(s[k], dtype=np.int64) for k in ("train", "val", "test")} for s in self.splits]

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def masks(self, split: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not 0 <= split < len(self.splits):
            raise IndexError(f"split {split} out of range; dataset has {len(self.splits)}")
        out = []
        for key in ("train", "val", "test"):
            m = np.zeros(self.num_nodes, dtype=bool)
            m[self.splits[split][key]] = True
            out.append(m)
        return tuple(out)

    def to_json_dict(self) -> dict:
        out = {
            "num_nodes": self.num_nodes,
            "edges": [list(e) for e in self.graph.undirected_edges()],
            "features": self.features.tolist(),
            "labels": self.labels.tolist(),
            "splits": [{k: v.tolist() for k, v in s.items()} for s in self.splits],
            "metric": self.metric,
            "num_classes": self.num_classes,
        }
        if self.meta:
            out["meta"] = self.meta
        return out


def save_graph_json(ds: NodeDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ds.to_json_dict(), fh)


def parse_graph_json(data: Any, source: str = "<data>") -> NodeDataset:
    try:
        jsonschema.validate(data, GRAPH_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "(root)"
        raise DatasetError(f"{source}: field {where}: {exc.message}") from None
    n = data["num_nodes"]
    if len(data["features"]) != n:
        raise DatasetError(f"{source}: field features: expected {n} rows, got {len(data['features'])}")
    widths = {len(r) for r in data["features"]}
    if len(widths) > 1:
        raise DatasetError(f"{source}: field features: rows have differing widths {sorted(widths)}")
    if len(data["labels"]) != n:
        raise DatasetError(f"{source}: field labels: expected {n} entries, got {len(data['labels'])}")
    try:
        g = from_undirected_edges(data["edges"], n)
    except ValueError as exc:
        raise DatasetError(f"{source}: field edges: {exc}") from None
    for s_idx, split in enumerate(data["splits"]):
        seen: set[int] = set()
        for key in ("train", "val", "test"):
            idx = split[key]
            bad = [i for i in idx if not 0 <= i < n]
            if bad:
                raise DatasetError(f"{source}: field splits/{s_idx}/{key}: node {bad[0]} out of range [0, {n})")
            if seen.intersection(idx):
                raise DatasetError(f"{source}: field splits/{s_idx}/{key}: overlaps another mask of the split")
            seen.update(idx)
    features = np.asarray(data["features"], dtype=np.float64).reshape(n, -1)
    try:
        return NodeDataset(g, features, data["labels"], data["splits"], data["metric"],
                           data.get("num_classes", 0), data.get("meta", {}))
    except ValueError as exc:
        raise DatasetError(f"{source}: {exc}") from None


def load_graph_json(path) -> NodeDataset:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise DatasetError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_graph_json(data, str(path))


# ---------------------------------------------------------------- NeighborsMatch

def binary_tree_edges(depth: int) -> list[tuple[int, int]]:
    """Complete binary tree in heap order: node k has children 2k+1 and 2k+2."""
    return [(k, c) for k in range(2**depth - 1) for c in (2 * k + 1, 2 * k + 2)]


def neighborsmatch_width(depth: int) -> int:
    return 2 * (2**depth + 1)


def _tree_features(depth: int, key: int, values: Sequence[int]) -> np.ndarray:
    """Rows are [one-hot key | one-hot value]; index 0 of either half means blank.

    The root carries the queried key and a blank value; leaf ``l`` carries key
    ``l + 1`` and its value; internal nodes are blank in both halves.
    """
    leaves = 2**depth
    n = 2 ** (depth + 1) - 1
    feats = np.zeros((n, neighborsmatch_width(depth)))
    feats[:, 0] = 1.0
    feats[:, leaves + 1] = 1.0
    feats[0, 0], feats[0, key] = 0.0, 1.0
    first_leaf = leaves - 1
    for leaf, value in enumerate(values):
        row = first_leaf + leaf
        feats[row, 0], feats[row, leaf + 1] = 0.0, 1.0
        feats[row, leaves + 1], feats[row, leaves + 1 + value] = 0.0, 1.0
    return feats


def gen_neighborsmatch(depth: int, num_examples: int, seed: int = 0) -> list[NodeDataset]:
    """Binary trees of the given depth whose root must report the value of the leaf matching its key.

    Each leaf holds a distinct key in 1..2^depth and a value drawn from a random
    permutation of the classes. Examples enumerate all keys for each sampled
    permutation, as in the original benchmark. The label (value - 1) sits on the
    root only.
    """
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if num_examples < 1:
        raise ValueError("num_examples must be >= 1")
    rng = np.random.default_rng(seed)
    leaves = 2**depth
    num_perms = math.ceil(num_examples / leaves)
    if math.factorial(leaves) <= 10 * num_perms:
        pool = list(itertools.permutations(range(1, leaves + 1)))
        chosen = rng.choice(len(pool), size=min(num_perms, len(pool)), replace=False)
        perms = [pool[i] for i in chosen]
    else:
        seen, perms = set(), []
        while len(perms) < num_perms:
            p = tuple(int(v) for v in rng.permutation(leaves) + 1)
            if p not in seen:
                seen.add(p)
                perms.append(p)
    tree = from_undirected_edges(binary_tree_edges(depth), 2 ** (depth + 1) - 1)
    out = []
    for values in perms:
        for key in range(1, leaves + 1):
            if len(out) == num_examples:
                break
            labels = np.full(tree.num_nodes, UNLABELED)
            labels[0] = values[key - 1] - 1
            out.append(NodeDataset(
                tree, _tree_features(depth, key, values), labels,
                [{"train": [0], "val": [], "test": []}], "accuracy", leaves,
                {"depth": depth, "key": key, "values": list(values)},
            ))
    return out


def merge_examples(examples: Sequence[NodeDataset], train_fraction: float = 1.0, seed: int = 0,
                   meta: dict | None = None) -> NodeDataset:
    """Disjoint union of single-root examples; roots are split into train / test."""
    graph, offsets = disjoint_union([e.graph for e in examples])
    features = np.concatenate([e.features for e in examples])
    labels = np.concatenate([e.labels for e in examples])
    roots = np.asarray(offsets, dtype=np.int64)
    order = np.random.default_rng(seed).permutation(len(roots))
    cut = int(round(train_fraction * len(roots)))
    split = {"train": np.sort(roots[order[:cut]]), "val": np.array([], np.int64),
             "test": np.sort(roots[order[cut:]])}
    info = dict(meta or {})
    info["trees"] = [[int(o), int(e.num_nodes)] for o, e in zip(offsets, examples)]
    return NodeDataset(graph, features, labels, [split], examples[0].metric, examples[0].num_classes, info)


def neighborsmatch_dataset(depth: int, num_examples: int, seed: int = 0, train_fraction: float = 1.0) -> NodeDataset:
    examples = gen_neighborsmatch(depth, num_examples, seed)
    return merge_examples(examples, train_fraction, seed,
                          {"task": "neighborsmatch", "depth": depth, "seed": seed, "num_examples": len(examples)})


def neighborsmatch_label(features: np.ndarray, depth: int) -> int:
    """Re-derive a tree's label from its features alone."""
    leaves = 2**depth
    key = int(np.argmax(features[0, :leaves + 1]))
    for row in features[leaves - 1:]:
        if int(np.argmax(row[:leaves + 1])) == key:
            return int(np.argmax(row[leaves + 1:])) - 1
    raise ValueError("no leaf carries the root's key")


# ---------------------------------------------------------------- relay path

@dataclass(eq=False)
class RelaySchedule:
    """Path 0 - 1 - ... - t with per-layer frozen maps carrying node t's feature to node 0.

    At layer l (1-based) only the target map of node t - l and the source map of
    node t - l + 1 are nonzero. ``epsilons[l]`` is an (n, d) residual weight:
    -1 on that layer's receiving node, 0 elsewhere, so the receiver keeps only
    the relayed message.
    """

    graph: DirectedGraph
    sheaves: list[DirectedSheaf]
    epsilons: list[torch.Tensor]
    far: int
    endpoint: int = 0

    @property
    def num_layers(self) -> int:
        return len(self.sheaves)

    def receiver(self, layer: int) -> int:
        return self.far - layer - 1

    def sender(self, layer: int) -> int:
        return self.far - layer


def gen_relay_path(length: int, stalk_dim: int, seed: int = 0, scale: float = 1.0) -> RelaySchedule:
    if length < 1 or stalk_dim < 1:
        raise ValueError("length and stalk_dim must be >= 1")
    rng = np.random.default_rng(seed)
    n = length + 1
    g = path_graph(n)
    sheaves, epsilons = [], []
    for layer in range(length):
        receiver, sender = length - layer - 1, length - layer
        vecs = torch.as_tensor(rng.standard_normal((2, n, stalk_dim, stalk_dim)), dtype=DTYPE)
        s_scale = torch.zeros(n, dtype=DTYPE)
        t_scale = torch.zeros(n, dtype=DTYPE)
        s_scale[sender] = scale
        t_scale[receiver] = scale
        sheaves.append(DirectedSheaf(s_scale, householder_orthogonal(vecs[0]), t_scale, householder_orthogonal(vecs[1])))
        eps = torch.zeros(n, stalk_dim, dtype=DTYPE)
        eps[receiver] = -1.0
        epsilons.append(eps)
    return RelaySchedule(g, sheaves, epsilons, far=length)
