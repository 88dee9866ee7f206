"""Fusion block, interaction encoder, shared heads and the full forward pass."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .encode import (
    FROZEN_TABLE,
    TINY_TRAINABLE,
    EmbeddingCache,
    FrozenTableEncoder,
    NumericEncoder,
    SemanticEncoderConfig,
    TextEncoder,
    Tokenizer,
)
from .ingest import CLASSIFICATION, REGRESSION
from .nn.layers import EncoderLayer, EncoderLayerConfig
from .verbalize import ElementSequence, VerbalizedTable


class ContractError(ValueError):
    """Input violates a forward-pass precondition."""


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    fusion_layers: int = 1
    fusion_heads: int = 2
    interaction_layers: int = 3
    interaction_heads: int = 4
    ff_mult: int = 4
    dropout: float = 0.1
    head_hidden_mult: int = 4
    semantic: SemanticEncoderConfig = SemanticEncoderConfig()

    def __post_init__(self):
        if self.semantic.d != self.d:
            raise ValueError(f"semantic encoder width {self.semantic.d} differs from model width {self.d}")

    @property
    def head_hidden(self) -> int:
        return self.head_hidden_mult * self.d

    def with_vocab(self, vocab_size: int) -> "ModelConfig":
        return replace(self, semantic=replace(self.semantic, vocab_size=vocab_size))

    def with_unfrozen(self, k: int) -> "ModelConfig":
        return replace(self, semantic=replace(self.semantic, unfrozen_layers=k))

    def to_dict(self) -> dict[str, str]:
        out = {f.name: str(getattr(self, f.name)) for f in fields(self) if f.name != "semantic"}
        out.update({f"semantic.{f.name}": str(getattr(self.semantic, f.name)) for f in fields(self.semantic)})
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, str]) -> "ModelConfig":
        def conv(value: str, default):
            if isinstance(default, bool):
                if value not in ("True", "False"):
                    raise ValueError(f"bad boolean {value!r}")
                return value == "True"
            return type(default)(value)

        base, sem = cls(), SemanticEncoderConfig()
        sem_kw = {f.name: conv(raw[f"semantic.{f.name}"], getattr(sem, f.name)) for f in fields(sem) if f"semantic.{f.name}" in raw}
        kw = {f.name: conv(raw[f.name], getattr(base, f.name)) for f in fields(cls) if f.name != "semantic" and f.name in raw}
        return cls(**kw, semantic=SemanticEncoderConfig(**sem_kw))


def paper_preset(vocab_size: int = 30522) -> ModelConfig:
    sem = SemanticEncoderConfig(TINY_TRAINABLE, vocab_size, 512, 2, 384, 12, 12, 6, 0.1, True, "gelu")
    return ModelConfig(384, 1, 2, 6, 6, 4, 0.1, 4, sem)


def desk_preset(vocab_size: int = 1024, unfrozen_layers: int = 1) -> ModelConfig:
    sem = SemanticEncoderConfig(TINY_TRAINABLE, vocab_size, 512, 2, 64, 2, 4, unfrozen_layers, 0.1, False, "gelu")
    return ModelConfig(64, 1, 2, 3, 4, 4, 0.1, 4, sem)


PRESETS = {"paper": paper_preset, "desk": desk_preset}


class PredictionHead(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)


@dataclass
class Batch:
    """Rows of a single dataset, with element strings deduplicated."""

    strings: list[str]
    index: torch.Tensor  # (B, e) into ``strings``
    numeric: torch.Tensor  # (B, e)
    n_targets: int
    task: str
    labels: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.index.shape[0]


def make_batch(table: VerbalizedTable, rows: Sequence[int] | np.ndarray | None = None) -> Batch:
    rows = np.arange(table.n) if rows is None else np.asarray(rows, dtype=np.int64)
    sub = table.index[rows]
    uniq, inverse = np.unique(sub, return_inverse=True)
    labels = table.labels[rows]
    label_t = torch.as_tensor(labels, dtype=torch.long if table.task == CLASSIFICATION else torch.float32)
    return Batch(
        [table.strings[u] for u in uniq],
        torch.as_tensor(inverse.reshape(sub.shape), dtype=torch.long),
        torch.as_tensor(table.numeric[rows], dtype=torch.float32),
        table.n_targets,
        table.task,
        label_t,
    )


def batch_from_sequences(seqs: Sequence[ElementSequence]) -> Batch:
    if not seqs:
        raise ContractError("empty batch")
    first = seqs[0]
    target_strings = [e.semantic for e in first.elements[: first.n_targets]]
    for s in seqs[1:]:
        same = (
            len(s) == len(first)
            and s.n_targets == first.n_targets
            and s.dataset == first.dataset
            and s.task == first.task
            and [e.semantic for e in s.elements[: s.n_targets]] == target_strings
        )
        if not same:
            raise ContractError("all sequences in a batch must come from one dataset")
    strings: list[str] = []
    lookup: dict[str, int] = {}
    index = np.empty((len(seqs), len(first)), dtype=np.int64)
    numeric = np.empty((len(seqs), len(first)), dtype=np.float32)
    for i, s in enumerate(seqs):
        for j, e in enumerate(s.elements):
            k = lookup.setdefault(e.semantic, len(strings))
            if k == len(strings):
                strings.append(e.semantic)
            index[i, j] = k
            numeric[i, j] = e.numeric
    labels = None
    if all(s.true_label is not None for s in seqs):
        dtype = torch.long if first.task == CLASSIFICATION else torch.float32
        labels = torch.tensor([s.true_label for s in seqs], dtype=dtype)
    return Batch(strings, torch.from_numpy(index), torch.from_numpy(numeric), first.n_targets, first.task, labels)


class TabularModel(nn.Module):
    """Verbalized elements -> encoders -> fusion -> interaction -> shared heads."""

    def __init__(self, cfg: ModelConfig, tokenizer: Tokenizer | None = None, table: dict | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        if cfg.semantic.variant == TINY_TRAINABLE:
            if tokenizer is None:
                raise ValueError("the trainable text encoder needs a tokenizer")
            self.semantic = TextEncoder(cfg.semantic, tokenizer)
        else:
            self.semantic = FrozenTableEncoder(table, d)
        self.numeric = NumericEncoder(d, cfg.dropout)
        fusion_cfg = EncoderLayerConfig(d, cfg.fusion_heads, cfg.ff_mult * d, cfg.dropout, "post", "relu")
        self.fusion = nn.ModuleList(EncoderLayer(fusion_cfg) for _ in range(cfg.fusion_layers))
        inter_cfg = EncoderLayerConfig(d, cfg.interaction_heads, cfg.ff_mult * d, cfg.dropout, "pre", "relu")
        self.interaction = nn.ModuleList(EncoderLayer(inter_cfg) for _ in range(cfg.interaction_layers))
        self.cls_head = PredictionHead(d, cfg.head_hidden)
        self.reg_head = PredictionHead(d, cfg.head_hidden)
        self.cache = EmbeddingCache()
        self.use_cache = True

    @property
    def tokenizer(self) -> Tokenizer | None:
        return getattr(self.semantic, "tokenizer", None)

    def set_unfrozen_layers(self, k: int) -> None:
        self.semantic.set_unfrozen_layers(k)
        self.cfg = self.cfg.with_unfrozen(k)

    def component_counts(self) -> dict[str, int]:
        def n(mod):
            return sum(p.numel() for p in mod.parameters())

        return {
            "semantic": n(self.semantic),
            "numerical": n(self.numeric),
            "fusion": n(self.fusion),
            "interaction": n(self.interaction),
            "prediction": n(self.cls_head) + n(self.reg_head),
        }

    def embed_strings(self, strings: Sequence[str]) -> torch.Tensor:
        frozen = isinstance(self.semantic, FrozenTableEncoder) or self.semantic.n_trainable == 0
        static = frozen or (not self.semantic.training and not torch.is_grad_enabled())
        if self.use_cache and static:
            out = self.cache.encode(self.semantic, strings)
        else:
            out = self.semantic.encode(strings)
        return out.to(self.numeric.net[0].weight.dtype)

    def fuse(self, sem: torch.Tensor, num: torch.Tensor) -> torch.Tensor:
        """(..., d) semantic and numeric embeddings -> (..., d) fused embedding."""
        if sem.shape != num.shape or sem.shape[-1] != self.cfg.d:
            raise ContractError(f"fusion inputs must both have width {self.cfg.d}")
        lead = sem.shape[:-1]
        x = torch.stack([sem.reshape(-1, self.cfg.d), num.reshape(-1, self.cfg.d)], dim=1)
        for layer in self.fusion:
            x = layer(x)
        return x.mean(dim=1).reshape(*lead, self.cfg.d)

    def interact(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() != 3 or tokens.shape[1] < 2:
            raise ContractError("interaction needs at least one target token and one feature per row")
        for layer in self.interaction:
            tokens = layer(tokens)
        return tokens

    def forward(self, batch: Batch) -> torch.Tensor:
        """Class logits (B, C) for classification, standardized predictions (B,) for regression."""
        if batch.task == CLASSIFICATION and batch.n_targets < 2:
            raise ContractError("classification needs at least 2 target tokens")
        if batch.task == REGRESSION and batch.n_targets != 1:
            raise ContractError("regression uses exactly one target token")
        sem = self.embed_strings(batch.strings)[batch.index]
        num = self.numeric(batch.numeric.to(sem.dtype))
        tokens = self.interact(self.fuse(sem, num))
        # contiguous: strided inputs make the kernel choice depend on requires_grad, which breaks bit-exact zero-shot parity
        targets = tokens[:, : batch.n_targets].contiguous()
        if batch.task == CLASSIFICATION:
            return self.cls_head(targets)
        return self.reg_head(targets[:, 0])

    def predict(self, batch: Batch) -> torch.Tensor:
        """Probabilities for classification, standardized values for regression."""
        out = self(batch)
        return torch.softmax(out, dim=-1) if batch.task == CLASSIFICATION else out

    def predict_sequences(self, seqs: Sequence[ElementSequence]) -> torch.Tensor:
        return self.predict(batch_from_sequences(seqs))


def predict_classification(target_embs: torch.Tensor, head: PredictionHead) -> torch.Tensor:
    """Softmax over the shared head's per-token logits; ``target_embs`` is (..., C, d)."""
    return torch.softmax(head(target_embs), dim=-1)


def predict_regression(target_emb: torch.Tensor, head: PredictionHead) -> torch.Tensor:
    return head(target_emb)


def build_model(cfg: ModelConfig, tokenizer: Tokenizer | None = None, table: dict | None = None, seed: int = 0) -> TabularModel:
    torch.manual_seed(seed)
    return TabularModel(cfg, tokenizer, table)


@torch.no_grad()
def predict_table(model: TabularModel, table: VerbalizedTable, batch_size: int = 512) -> np.ndarray:
    """Eval-mode predictions for every row of ``table``."""
    was_training = model.training
    model.eval()
    try:
        outs = [
            model.predict(make_batch(table, np.arange(i, min(i + batch_size, table.n)))).double().numpy()
            for i in range(0, table.n, batch_size)
        ]
    finally:
        model.train(was_training)
    return np.concatenate(outs) if outs else np.zeros((0,))
