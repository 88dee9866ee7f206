from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import torch


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OneCycleSchedule:
    max_lr: float
    total_steps: int
    warmup_frac: float = 0.1
    start_div: float = 25.0
    final_div: float = 1e4

    def __post_init__(self):
        if self.max_lr < 0:
            raise ValueError("max_lr must be non-negative")
        if self.total_steps < 1:
            raise ValueError("total_steps must be at least 1")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie strictly between 0 and 1")

    @property
    def initial_lr(self) -> float:
        return self.max_lr / self.start_div

    @property
    def min_lr(self) -> float:
        return self.initial_lr / self.final_div


def _cos_interp(start: float, end: float, pct: float) -> float:
    return end + (start - end) * (1.0 + math.cos(math.pi * pct)) / 2.0


def onecycle_lr(step: float, sched: OneCycleSchedule) -> float:
    """Learning rate at ``step``: cosine warmup to ``max_lr``, then cosine annealing."""
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    peak = sched.warmup_frac * sched.total_steps
    if step <= peak:
        return _cos_interp(sched.initial_lr, sched.max_lr, step / peak)
    return _cos_interp(sched.max_lr, sched.min_lr, (step - peak) / (sched.total_steps - peak))


class CheckedAdamW(torch.optim.AdamW):
    """AdamW that refuses to step on NaN/Inf gradients."""

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    bad = int((~torch.isfinite(p.grad)).sum())
                    raise NonFiniteGradientError(
                        f"{bad} non-finite gradient entries in a parameter of shape {tuple(p.shape)}"
                    )
        return super().step(closure)


def make_optimizer(params: Iterable[torch.nn.Parameter], lr: float, weight_decay: float = 0.001) -> CheckedAdamW:
    return CheckedAdamW(params, lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=weight_decay)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


@torch.no_grad()
def clip_grad_norm(params: Iterable[torch.Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total
