from __future__ import annotations

import math
from typing import Callable

import torch
from torch import nn


class LoraLinear(nn.Module):
    """Frozen linear map plus a trainable rank-``r`` update scaled by ``alpha / r``."""

    def __init__(self, base: nn.Linear, r: int, alpha: float, dropout: float = 0.0):
        super().__init__()
        out_f, in_f = base.weight.shape
        if r < 1 or r > min(in_f, out_f):
            raise ValueError(f"LoRA rank {r} must lie in [1, min({in_f}, {out_f})]")
        self.base = base
        self.r = r
        self.alpha = alpha
        self.scaling = alpha / r
        w = base.weight
        self.lora_A = nn.Parameter(torch.empty(r, in_f, dtype=w.dtype, device=w.device))
        self.lora_B = nn.Parameter(torch.zeros(out_f, r, dtype=w.dtype, device=w.device))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        self.lora_dropout = nn.Dropout(dropout)
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x):
        delta = (self.lora_dropout(x) @ self.lora_A.T) @ self.lora_B.T
        return self.base(x) + self.scaling * delta

    def merged(self) -> nn.Linear:
        out = nn.Linear(self.in_features, self.out_features, bias=self.base.bias is not None)
        out = out.to(dtype=self.base.weight.dtype, device=self.base.weight.device)
        with torch.no_grad():
            out.weight.copy_(self.base.weight + self.scaling * (self.lora_B @ self.lora_A))
            if self.base.bias is not None:
                out.bias.copy_(self.base.bias)
        return out


def lora_wrap(base: nn.Linear, r: int, alpha: float, dropout: float = 0.0) -> LoraLinear:
    return LoraLinear(base, r, alpha, dropout)


def _replace(root: nn.Module, name: str, new: nn.Module) -> None:
    parent_name, _, attr = name.rpartition(".")
    parent = root.get_submodule(parent_name) if parent_name else root
    setattr(parent, attr, new)


def wrap_modules(
    root: nn.Module,
    select: Callable[[str, nn.Linear], bool],
    r: int,
    alpha: float,
    dropout: float = 0.0,
) -> list[str]:
    """Wrap every ``nn.Linear`` for which ``select(name, module)`` holds; returns wrapped names."""
    targets = [
        (name, mod)
        for name, mod in root.named_modules()
        if isinstance(mod, nn.Linear) and select(name, mod)
    ]
    for name, mod in targets:
        _replace(root, name, LoraLinear(mod, r, alpha, dropout))
    return [name for name, _ in targets]


def merge_lora(root: nn.Module) -> nn.Module:
    """Fold every adapter into its base weight, in place."""
    wrapped = [(name, mod) for name, mod in root.named_modules() if isinstance(mod, LoraLinear)]
    for name, mod in wrapped:
        _replace(root, name, mod.merged())
    return root


def lora_parameters(root: nn.Module) -> list[nn.Parameter]:
    params = []
    for mod in root.modules():
        if isinstance(mod, LoraLinear):
            params += [mod.lora_A, mod.lora_B]
    return params


def mark_only_lora_trainable(root: nn.Module) -> None:
    for p in root.parameters():
        p.requires_grad_(False)
    for p in lora_parameters(root):
        p.requires_grad_(True)
