"""Deterministic AdamW / SGD with per-group learning-rate policy.

Groups either follow the scheduled learning rate (scaled by `lr_scale`) or
pin their own flat rate via `lr_const` — used for parameters whose useful
gradient signal only appears late in training, where a cosine tail would
starve them. Weight decay is decoupled (applied to the parameter directly,
never through the moment estimates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grad_engine import DenseArray


@dataclass
class ParamGroup:
    params: list[DenseArray]
    weight_decay: float = 0.0
    lr_scale: float = 1.0
    lr_const: float | None = None
    kind: str = "adam"            # "adam" | "sgd"
    name: str = ""

    def effective_lr(self, scheduled_lr: float) -> float:
        return self.lr_const if self.lr_const is not None else scheduled_lr * self.lr_scale


class Optimizer:
    def __init__(self, groups: list[ParamGroup], betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.groups = groups
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = [[np.zeros_like(p.data) for p in g.params] for g in groups]
        self._v = [[np.zeros_like(p.data) for p in g.params] for g in groups]

    def step(self, scheduled_lr: float) -> None:
        """One update from the gradients currently stored on the parameters.
        Parameters with no gradient this step are only weight-decayed."""
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for gi, group in enumerate(self.groups):
            lr = group.effective_lr(scheduled_lr)
            for pi, p in enumerate(group.params):
                if group.weight_decay:
                    p.data = p.data * (1.0 - lr * group.weight_decay)
                g = p.grad
                if g is None:
                    continue
                g = g.astype(p.data.dtype, copy=False)
                if group.kind == "sgd":
                    p.data = p.data - lr * g
                    continue
                m = self._m[gi][pi] = b1 * self._m[gi][pi] + (1.0 - b1) * g
                v = self._v[gi][pi] = b2 * self._v[gi][pi] + (1.0 - b2) * g * g
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                p.data = p.data - lr * update

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params:
                p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for group in self.groups:
            for p in group.params:
                if p.grad is not None:
                    total += float((p.grad.astype(np.float64) ** 2).sum())
        return math.sqrt(total)


def warmup_cosine_lr(step: int, total_steps: int, lr_start: float,
                     warmup_frac: float = 0.1, lr_min: float = 0.0) -> float:
    """Linear warmup to `lr_start`, then cosine decay to `lr_min`."""
    if total_steps < 1:
        raise ValueError(f"warmup_cosine_lr: total_steps must be >= 1, got {total_steps}")
    warmup = int(round(warmup_frac * total_steps))
    if step < warmup:
        return lr_start * (step + 1) / warmup
    span = max(total_steps - warmup, 1)
    frac = min((step - warmup) / span, 1.0)
    return lr_min + (lr_start - lr_min) * 0.5 * (1.0 + math.cos(math.pi * frac))
