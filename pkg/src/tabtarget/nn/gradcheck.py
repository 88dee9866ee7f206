from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch


def _value(f: Callable[[], torch.Tensor]) -> float:
    out = f()
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    v = out.item()
    if not np.isfinite(v):
        raise FloatingPointError(f"non-finite loss {v} during gradient check")
    return v


class ReluPattern:
    """Records which inputs of every ``nn.ReLU`` under ``module`` were positive in the last forward.

    Use as a context manager; calling the instance returns the flattened pattern.
    """

    def __init__(self, module: torch.nn.Module):
        self.module = module
        self._handles: list = []
        self._parts: list[torch.Tensor] = []

    def _hook(self, _mod, inputs, _out):
        self._parts.append((inputs[0] > 0).flatten())

    def __enter__(self) -> "ReluPattern":
        self._handles = [m.register_forward_hook(self._hook) for m in self.module.modules() if isinstance(m, torch.nn.ReLU)]
        return self

    def __exit__(self, *exc) -> None:
        for h in self._handles:
            h.remove()
        self._handles = []

    def reset(self) -> None:
        self._parts = []

    def __call__(self) -> torch.Tensor:
        return torch.cat(self._parts) if self._parts else torch.zeros(0, dtype=torch.bool)


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-6,
    samples_per_tensor: int | None = None,
    atol: float = 1e-5,
    seed: int = 0,
    pattern: ReluPattern | None = None,
    min_eps: float = 1e-9,
) -> float:
    """Max relative error between backprop and central finite differences.

    ``f`` re-runs the computation from scratch on every call and must be
    deterministic. Relative error per coordinate is ``|a - b| / max(|a|, |b|, atol)``;
    ``atol`` keeps vanishing gradients from dominating. With ``samples_per_tensor``
    only that many random coordinates of each tensor are probed.

    Central differences are meaningless when ``x - eps`` and ``x + eps`` sit on
    different linear pieces of a ReLU. Given a ``pattern`` recorder, a probe whose
    sign pattern differs from the unperturbed one is retried with ``eps / 10``
    down to ``min_eps``.
    """
    params = list(params)
    loss = f()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()} during gradient check")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    reference = None
    if pattern is not None:
        pattern.reset()
        _value(f)
        reference = pattern()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        gflat = g.reshape(-1)
        n = flat.numel()
        idx = np.arange(n)
        if samples_per_tensor is not None and n > samples_per_tensor:
            idx = rng.choice(n, size=samples_per_tensor, replace=False)
        for i in idx:
            numeric = _central(f, flat, int(i), eps, pattern, reference, min_eps)
            analytic = float(gflat[i])
            denom = max(abs(numeric), abs(analytic), atol)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def _central(f, flat, i, eps, pattern, reference, min_eps) -> float:
    orig = float(flat[i])
    while True:
        with torch.no_grad():
            if pattern is not None:
                pattern.reset()
            flat[i] = orig + eps
            up = _value(f)
            same = pattern is None or torch.equal(pattern(), reference)
            if pattern is not None:
                pattern.reset()
            flat[i] = orig - eps
            down = _value(f)
            same = same and (pattern is None or torch.equal(pattern(), reference))
            flat[i] = orig
        if same or eps / 10 < min_eps:
            return (up - down) / (2 * eps)
        eps /= 10
