from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class EncoderLayerConfig:
    d: int
    heads: int
    ff: int | None = None
    dropout: float = 0.1
    norm_style: str = "pre"
    activation: str = "relu"

    def __post_init__(self):
        if self.d <= 0 or self.heads <= 0:
            raise ValueError(f"d and heads must be positive, got d={self.d} heads={self.heads}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.norm_style not in ("pre", "post"):
            raise ValueError(f"norm_style must be 'pre' or 'post', got {self.norm_style!r}")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.ff is None:
            object.__setattr__(self, "ff", 4 * self.d)


def encoder_layer_param_count(d: int, ff: int | None = None) -> int:
    """Closed-form parameter count of one encoder layer (biases everywhere, two layer norms)."""
    ff = 4 * d if ff is None else ff
    attention = 4 * (d * d + d)
    feed_forward = (d * ff + ff) + (ff * d + d)
    norms = 2 * (2 * d)
    return attention + feed_forward + norms


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product self-attention with separate Q/K/V/output projections.

    Projections are kept as distinct ``nn.Linear`` modules so adapters can wrap
    each of them individually.
    """

    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} is not divisible by heads={heads}")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.attn_dropout = nn.Dropout(dropout)

    def forward(self, x, key_padding_mask=None, need_weights: bool = False):
        # x: (batch, seq, d); key_padding_mask: (batch, seq), True marks padding
        b, s, _ = x.shape
        q = self.q_proj(x).view(b, s, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(b, s, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(x).view(b, s, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = self.attn_dropout(weights) @ v
        out = out.transpose(1, 2).reshape(b, s, self.d)
        out = self.out_proj(out)
        return out, (weights if need_weights else None)


class EncoderLayer(nn.Module):
    """Transformer encoder layer without positional information.

    Follows the usual dropout placement: on attention weights, after the
    attention block, inside and after the feed-forward block.
    """

    def __init__(self, cfg: EncoderLayerConfig):
        super().__init__()
        self.cfg = cfg
        self.self_attn = MultiHeadAttention(cfg.d, cfg.heads, cfg.dropout)
        self.linear1 = nn.Linear(cfg.d, cfg.ff)
        self.linear2 = nn.Linear(cfg.ff, cfg.d)
        self.norm1 = nn.LayerNorm(cfg.d)
        self.norm2 = nn.LayerNorm(cfg.d)
        self.dropout = nn.Dropout(cfg.dropout)
        self.dropout1 = nn.Dropout(cfg.dropout)
        self.dropout2 = nn.Dropout(cfg.dropout)
        # a module rather than a function so hooks can see its inputs
        self.activation = nn.ReLU() if cfg.activation == "relu" else nn.GELU()

    def _sa_block(self, x, key_padding_mask):
        out, _ = self.self_attn(x, key_padding_mask)
        return self.dropout1(out)

    def _ff_block(self, x):
        return self.dropout2(self.linear2(self.dropout(self.activation(self.linear1(x)))))

    def forward(self, x, key_padding_mask=None):
        if x.dim() != 3 or x.shape[-1] != self.cfg.d:
            raise ValueError(f"expected input of shape (batch, seq, {self.cfg.d}), got {tuple(x.shape)}")
        if x.shape[1] < 1:
            raise ValueError("sequence length must be at least 1")
        if self.cfg.norm_style == "pre":
            x = x + self._sa_block(self.norm1(x), key_padding_mask)
            x = x + self._ff_block(self.norm2(x))
        else:
            x = self.norm1(x + self._sa_block(x, key_padding_mask))
            x = self.norm2(x + self._ff_block(x))
        return x
