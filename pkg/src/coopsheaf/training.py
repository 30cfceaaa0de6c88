"""Gradients, optimizer, losses, metrics and the full-graph training loop.

Reverse-mode gradients come from torch autograd: a :class:`Tape` holds the
closure that produced a scalar together with the recorded output, and
:func:`backward` sweeps it into the store's gradient slots.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from .datasets import NodeDataset
from .laplacian import set_deterministic
from .model import ModelConfig, forward, init_params
from .sheaf import DTYPE
from .store import ParameterStore

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "coopsheaf-checkpoint"
CHECKPOINT_VERSION = 1

# (offset in steps, weight) pairs for central differences
_STENCILS = {
    2: ((1, 0.5), (-1, -0.5)),
    4: ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12)),
}


class Tape:
    """One recorded scalar-valued forward pass over a parameter store."""

    def __init__(self, fn: Callable[[], torch.Tensor], store: ParameterStore):
        self.fn = fn
        self.store = store
        self.output = fn()
        if self.output.numel() != 1:
            raise ValueError(f"tape output must be a scalar, got shape {tuple(self.output.shape)}")
        self.consumed = False

    @property
    def value(self) -> float:
        return float(self.output.detach())

    def replay(self) -> torch.Tensor:
        with torch.no_grad():
            return self.fn()


def record(fn: Callable[[], torch.Tensor], store: ParameterStore) -> Tape:
    return Tape(fn, store)


def backward(tape: Tape) -> dict[str, torch.Tensor]:
    """Fill ``tape.store.grads`` with d(output)/d(parameter) and return them."""
    if tape.consumed:
        raise RuntimeError("tape was already swept; record a new forward pass")
    names = list(tape.store)
    tensors = [tape.store[n] for n in names]
    if not tape.output.requires_grad:
        grads = [None] * len(tensors)
    else:
        grads = torch.autograd.grad(tape.output, tensors, allow_unused=True)
    tape.consumed = True
    for name, t, g in zip(names, tensors, grads):
        tape.store.grads[name] = torch.zeros_like(t).detach() if g is None else g.detach()
    return tape.store.grads


def finite_diff_grad(
    scalar_fn: Callable[[], torch.Tensor | float],
    params: ParameterStore | Mapping[str, torch.Tensor],
    step: float = 1e-5,
    points: int = 2,
) -> dict[str, torch.Tensor]:
    """Central differences, one coordinate at a time.

    ``points=2`` is ``(f(p + h) - f(p - h)) / 2h``; ``points=4`` adds the ``2h`` samples
    and cancels the ``h**2`` truncation term. ``scalar_fn`` reads the parameter
    tensors in place; each is restored afterwards.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if points not in _STENCILS:
        raise ValueError(f"points must be one of {sorted(_STENCILS)}")
    stencil = _STENCILS[points]
    tensors = params.params if isinstance(params, ParameterStore) else params
    out = {}
    with torch.no_grad():
        for name, t in tensors.items():
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                acc = 0.0
                for offset, weight in stencil:
                    flat[k] = orig + offset * step
                    acc += weight * float(scalar_fn())
                flat[k] = orig
                gflat[k] = acc / step
            out[name] = g
    return out


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> float:
    """``|a - b| / max(|a| + |b|, floor)`` in the Euclidean norm."""
    num = float(torch.linalg.norm((a - b).reshape(-1)))
    den = float(torch.linalg.norm(a.reshape(-1)) + torch.linalg.norm(b.reshape(-1)))
    return num / max(den, floor)


def adam_step(
    store: ParameterStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> ParameterStore:
    """Adam with decoupled weight decay, in place on ``store``."""
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    with torch.no_grad():
        for name, p in store.params.items():
            g = store.grads[name]
            m = store.first_moment.setdefault(name, torch.zeros_like(g))
            v = store.second_moment.setdefault(name, torch.zeros_like(g))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            if weight_decay:
                p.mul_(1 - lr * weight_decay)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return store


def loss_cross_entropy(logits: torch.Tensor, labels, mask) -> torch.Tensor:
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any()):
        raise ValueError("mask selects no nodes")
    labels = torch.as_tensor(labels, dtype=torch.long)
    return F.cross_entropy(logits[mask], labels[mask])


def metric(kind: str, scores, labels, mask) -> float:
    scores = torch.as_tensor(scores).detach()
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask selects no nodes")
    if kind == "accuracy":
        pred = scores.argmax(-1).numpy() if scores.dim() == 2 else (scores.numpy() > 0).astype(int)
        return float((pred[mask] == labels[mask]).mean())
    if kind == "roc_auc":
        s = scores.numpy()
        if s.ndim == 2:
            s = s[:, 1] - s[:, 0]
        s, y = s[mask], labels[mask]
        if set(np.unique(y)) - {0, 1}:
            raise ValueError("roc_auc needs binary labels")
        pos, neg = int((y == 1).sum()), int((y == 0).sum())
        if pos == 0 or neg == 0:
            raise ValueError("roc_auc needs both classes under the mask")
        ranks = rankdata(s)  # average ranks give ties half credit
        return float((ranks[y == 1].sum() - pos * (pos + 1) / 2) / (pos * neg))
    raise ValueError(f"unknown metric {kind!r}")


@dataclass
class Schedule:
    epochs: int = 200
    lr: float = 0.02
    weight_decay: float = 0.0
    seed: int = 0
    eval_every: int = 10
    split: int = 0
    stop_at_train_metric: float | None = None

    def validate(self) -> None:
        if self.epochs < 0 or self.eval_every < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError(f"invalid schedule {self}")


@dataclass
class TrainResult:
    history: list[dict]
    best: ParameterStore
    best_epoch: int
    final: ParameterStore
    summary: dict = field(default_factory=dict)


def _evaluate(cfg, store, ds, masks, epoch) -> dict:
    train_mask, val_mask, test_mask = masks
    with torch.no_grad():
        logits = forward(cfg, store, ds.graph, ds.features)
    rec = {"epoch": epoch, "train_loss": float(loss_cross_entropy(logits, ds.labels, train_mask))}
    rec["train_metric"] = metric(ds.metric, logits, ds.labels, train_mask)
    for name, m in (("val", val_mask), ("test", test_mask)):
        if m.any():
            rec[f"{name}_loss"] = float(loss_cross_entropy(logits, ds.labels, m))
            rec[f"{name}_metric"] = metric(ds.metric, logits, ds.labels, m)
        else:
            rec[f"{name}_loss"] = rec[f"{name}_metric"] = None
    return rec


def train(
    cfg: ModelConfig,
    dataset: NodeDataset,
    schedule: Schedule,
    *,
    deterministic: bool = True,
    on_eval: Callable[[dict], None] | None = None,
    init: ParameterStore | None = None,
) -> TrainResult:
    """Full-graph Adam training; keeps the parameters with the best validation metric.

    Without a validation set the best training metric decides.
    """
    schedule.validate()
    if deterministic:
        set_deterministic(True)
    torch.manual_seed(schedule.seed)
    masks = dataset.masks(schedule.split)
    if not masks[0].any():
        raise ValueError("dataset has an empty train mask")
    store = init.copy() if init is not None else init_params(
        cfg, dataset.num_features, dataset.num_classes, seed=schedule.seed)
    select_key = "val_metric" if masks[1].any() else "train_metric"

    history = []
    best, best_epoch, best_score = store.copy(), 0, -math.inf

    def evaluate(epoch):
        nonlocal best, best_epoch, best_score
        rec = _evaluate(cfg, store, dataset, masks, epoch)
        history.append(rec)
        if on_eval:
            on_eval(rec)
        if rec[select_key] > best_score:
            best, best_epoch, best_score = store.copy(), epoch, rec[select_key]
        return rec

    rec = evaluate(0)
    labels = torch.as_tensor(dataset.labels, dtype=torch.long)
    train_mask = torch.as_tensor(masks[0])
    for epoch in range(1, schedule.epochs + 1):
        tape = record(
            lambda: loss_cross_entropy(forward(cfg, store, dataset.graph, dataset.features, training=True),
                                       labels, train_mask),
            store,
        )
        backward(tape)
        adam_step(store, schedule.lr, weight_decay=schedule.weight_decay)
        if epoch % schedule.eval_every == 0 or epoch == schedule.epochs:
            rec = evaluate(epoch)
            log.debug("epoch %d: %s", epoch, rec)
            target = schedule.stop_at_train_metric
            if target is not None and rec["train_metric"] >= target:
                break

    summary = {
        "best_epoch": best_epoch,
        "selected_by": select_key,
        "final_epoch": history[-1]["epoch"],
        "final_train_metric": history[-1]["train_metric"],
        "best_train_metric": max(r["train_metric"] for r in history),
    }
    best_rec = next(r for r in history if r["epoch"] == best_epoch)
    summary["test_metric_at_best"] = best_rec["test_metric"]
    return TrainResult(history, best, best_epoch, store, summary)


def history_jsonl(history: list[dict]) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in history)


def save_checkpoint(path, cfg: ModelConfig, store: ParameterStore, meta: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "meta": meta or {},
        "params": store.to_lists(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple[ModelConfig, ParameterStore, dict]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return ModelConfig.from_dict(payload["config"]), ParameterStore.from_lists(payload["params"]), payload["meta"]


def schedule_from_dict(data: Mapping) -> Schedule:
    known = set(asdict(Schedule()))
    return Schedule(**{k: v for k, v in data.items() if k in known})
