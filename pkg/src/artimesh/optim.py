"""Named parameter store with learning-rate groups, plus Adam.

Field-prior parameters (template SDF and canonical feature field) train at
1e-3; everything else at 1e-4.  Non-finite gradients skip the update for
that parameter and are counted.
"""

from __future__ import annotations

import logging

import numpy as np

from .tape import Tensor

log = logging.getLogger(__name__)

PRIOR_GROUP = "prior"
OTHER_GROUP = "other"
GROUP_LR = {PRIOR_GROUP: 1e-3, OTHER_GROUP: 1e-4}


class ParamStore:
    """Ordered mapping name -> parameter Tensor with a lr-group tag."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._groups: dict[str, str] = {}
        self.frozen = False

    def register(self, name: str, tensor: Tensor, group: str = OTHER_GROUP) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        if group not in GROUP_LR:
            raise ValueError(f"unknown lr group: {group}")
        if self.frozen:
            raise RuntimeError("cannot register parameters after the first optimizer step")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._groups[name] = group
        return tensor

    def register_all(self, prefix: str, named_tensors, group: str = OTHER_GROUP) -> None:
        for name, t in named_tensors:
            self.register(f"{prefix}.{name}", t, group)

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def group_of(self, name: str) -> str:
        return self._groups[name]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Per-parameter gradients; parameters never reached get zeros."""
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self._params.items()
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self._params.items()}


class Adam:
    """Standard Adam with bias correction and a NaN skip-and-log policy."""

    def __init__(self, store: ParamStore, lr_scale: float = 1.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 group_lr: dict | None = None):
        self.store = store
        self.lr_scale = lr_scale
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.group_lr = dict(group_lr or GROUP_LR)
        self.step_count = 0
        self.skipped = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, only: set | None = None) -> None:
        """Apply one Adam update from the gradients currently in the store.

        `only` restricts the update to a subset of parameter names (used by
        albedo-only finetuning); all other parameters are left untouched.
        """
        self.store.frozen = True
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in self.store.items():
            if only is not None and name not in only:
                continue
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                log.warning("non-finite gradient for %s, skipping update", name)
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            lr = self.group_lr[self.store.group_of(name)] * self.lr_scale
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict:
        return {
            "step": self.step_count,
            "skipped": self.skipped,
            "m": dict(self.m),
            "v": dict(self.v),
        }

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        self.skipped = int(state.get("skipped", 0))
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}


def adam_step(store: ParamStore, optimizer: Adam, only: set | None = None) -> None:
    """Convenience wrapper matching the one-step update contract."""
    assert optimizer.store is store
    optimizer.step(only=only)
