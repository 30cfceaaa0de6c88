"""Named parameter tensors with gradient slots and optimizer state."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Mapping

import numpy as np
import torch

from .sheaf import DTYPE


class ParameterStore:
    def __init__(self, params: Mapping[str, torch.Tensor] | None = None):
        self.params: OrderedDict[str, torch.Tensor] = OrderedDict()
        self.grads: dict[str, torch.Tensor] = {}
        self.first_moment: dict[str, torch.Tensor] = {}
        self.second_moment: dict[str, torch.Tensor] = {}
        self.step_count = 0
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = torch.as_tensor(value, dtype=DTYPE).detach().clone().requires_grad_(True)
        self.params[name] = t
        self.grads[name] = torch.zeros_like(t, requires_grad=False)
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def get(self, name: str, default=None):
        return self.params.get(name, default)

    def prefixed(self, prefix: str) -> dict[str, torch.Tensor]:
        """Parameters under ``prefix.``, keyed by the remainder of the name."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}

    def num_scalars(self) -> int:
        return sum(t.numel() for t in self.params.values())

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.zero_()

    def copy(self) -> ParameterStore:
        out = ParameterStore(self.params)
        out.step_count = self.step_count
        out.first_moment = {k: v.clone() for k, v in self.first_moment.items()}
        out.second_moment = {k: v.clone() for k, v in self.second_moment.items()}
        return out

    def to_lists(self) -> dict[str, dict]:
        return {
            name: {"shape": list(t.shape), "data": t.detach().numpy().ravel().tolist()}
            for name, t in self.params.items()
        }

    @classmethod
    def from_lists(cls, payload: Mapping[str, Mapping]) -> ParameterStore:
        return cls({
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in payload.items()
        })
