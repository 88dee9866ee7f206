"""Semantic and numeric element encoders."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .nn.layers import EncoderLayer, EncoderLayerConfig

PAD, UNK = "[PAD]", "[UNK]"
TOKEN_RE = re.compile(r"\w+|[^\w\s]")

TINY_TRAINABLE = "tiny_trainable"
FROZEN_TABLE = "frozen_table"


class Tokenizer:
    """Lowercased word/punctuation tokenizer over a fixed vocabulary."""

    def __init__(self, tokens: Sequence[str], max_positions: int = 512):
        tokens = list(tokens)
        if tokens[:2] != [PAD, UNK]:
            tokens = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}
        self.max_positions = max_positions
        self._memo: dict[str, list[int]] = {}

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self.tokens)

    @staticmethod
    def split(text: str) -> list[str]:
        return TOKEN_RE.findall(text.lower())

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1, max_size: int | None = None, max_positions: int = 512) -> "Tokenizer":
        counts = Counter()
        for text in texts:
            counts.update(cls.split(text))
        ranked = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - 2)]
        return cls([PAD, UNK] + ranked, max_positions)

    def tokenize(self, text: str) -> list[int]:
        ids = self._memo.get(text)
        if ids is None:
            ids = [self.ids.get(t, self.unk_id) for t in self.split(text)][: self.max_positions] or [self.unk_id]
            if len(self._memo) < 1_000_000:
                self._memo[text] = ids
        return ids

    def pad(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        """Token ids (n, T) and validity mask (n, T) for a batch of strings."""
        seqs = [self.tokenize(t) for t in texts]
        width = max(len(s) for s in seqs)
        ids = torch.zeros(len(seqs), width, dtype=torch.long)
        mask = torch.zeros(len(seqs), width, dtype=torch.bool)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
            mask[i, : len(s)] = True
        return ids, mask


@dataclass(frozen=True)
class SemanticEncoderConfig:
    variant: str = TINY_TRAINABLE
    vocab_size: int = 1024
    max_positions: int = 512
    type_vocab: int = 2
    d: int = 64
    layers: int = 2
    heads: int = 4
    unfrozen_layers: int = 1
    dropout: float = 0.1
    pooler: bool = False
    activation: str = "gelu"
    pooling: str = "mean"

    def __post_init__(self):
        if self.variant not in (TINY_TRAINABLE, FROZEN_TABLE):
            raise ValueError(f"unknown semantic encoder variant {self.variant!r}")
        if not 0 <= self.unfrozen_layers <= self.layers:
            raise ValueError(f"unfrozen_layers={self.unfrozen_layers} outside [0, {self.layers}]")
        if self.pooling != "mean":
            raise ValueError("only mean pooling is supported")


def text_encoder_param_count(cfg: SemanticEncoderConfig) -> int:
    from .nn.layers import encoder_layer_param_count

    d = cfg.d
    embeddings = (cfg.vocab_size + cfg.max_positions + cfg.type_vocab) * d + 2 * d
    pooler = d * d + d if cfg.pooler else 0
    return embeddings + cfg.layers * encoder_layer_param_count(d) + pooler


class TextEncoder(nn.Module):
    """Word-level post-norm transformer over each string separately, mean-pooled.

    Only the top ``unfrozen_layers`` layers receive gradients; embeddings are
    trainable only when every layer is. The optional pooler is carried for
    parameter parity with BERT-style encoders and is unused by mean pooling.
    Frozen layers always run in eval mode, so their output per string is static
    and is memoized; only the unfrozen top layers are recomputed.
    """

    def __init__(self, cfg: SemanticEncoderConfig, tokenizer: Tokenizer):
        super().__init__()
        if len(tokenizer) > cfg.vocab_size:
            raise ValueError(f"tokenizer has {len(tokenizer)} tokens, vocab_size is {cfg.vocab_size}")
        self.cfg = cfg
        self.tokenizer = tokenizer
        d = cfg.d
        self.word_embeddings = nn.Embedding(cfg.vocab_size, d)
        self.position_embeddings = nn.Embedding(cfg.max_positions, d)
        self.token_type_embeddings = nn.Embedding(cfg.type_vocab, d)
        self.embed_norm = nn.LayerNorm(d)
        self.embed_dropout = nn.Dropout(cfg.dropout)
        layer_cfg = EncoderLayerConfig(d, cfg.heads, 4 * d, cfg.dropout, "post", cfg.activation)
        self.layers = nn.ModuleList(EncoderLayer(layer_cfg) for _ in range(cfg.layers))
        self.pooler = nn.Linear(d, d) if cfg.pooler else None
        self._train_requested = True
        self._prefix_store: dict[str, torch.Tensor] = {}
        self._prefix_version: tuple | None = None
        self.unfrozen_layers = cfg.unfrozen_layers
        self.set_unfrozen_layers(cfg.unfrozen_layers)

    @property
    def n_trainable(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def set_unfrozen_layers(self, k: int) -> None:
        if not 0 <= k <= len(self.layers):
            raise ValueError(f"unfrozen layers {k} outside [0, {len(self.layers)}]")
        self.unfrozen_layers = k
        for p in self.parameters():
            p.requires_grad_(False)
        top = len(self.layers) - k
        for layer in self.layers[top:]:
            for p in layer.parameters():
                p.requires_grad_(True)
        if k == len(self.layers):
            for mod in (self.word_embeddings, self.position_embeddings, self.token_type_embeddings, self.embed_norm):
                for p in mod.parameters():
                    p.requires_grad_(True)
        self.train(self._train_requested)

    @property
    def n_frozen_layers(self) -> int:
        return len(self.layers) - self.unfrozen_layers

    def _frozen_modules(self) -> list[nn.Module]:
        if self.unfrozen_layers == len(self.layers):
            return []
        emb = [self.word_embeddings, self.position_embeddings, self.token_type_embeddings, self.embed_norm, self.embed_dropout]
        return emb + list(self.layers[: self.n_frozen_layers])

    def train(self, mode: bool = True):
        # frozen layers stay in eval mode, so the frozen prefix is a fixed function of the string
        self._train_requested = mode
        super().train(mode)
        for mod in self._frozen_modules():
            mod.eval()
        return self

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.word_embeddings(ids) + self.position_embeddings(pos)[None] + self.token_type_embeddings.weight[0]
        return self.embed_dropout(self.embed_norm(x))

    @staticmethod
    def _pool(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        m = mask.to(x.dtype)[..., None]
        return (x * m).sum(1) / m.sum(1)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self._embed(ids)
        pad = ~mask
        for layer in self.layers:
            x = layer(x, pad)
        return self._pool(x, mask)

    def _prefix(self, strings: Sequence[str]) -> list[torch.Tensor]:
        """Per-string hidden states after the frozen layers, memoized until those weights change."""
        version = weights_version(nn.ModuleList(self._frozen_modules()))
        if version != self._prefix_version:
            self._prefix_store = {}
            self._prefix_version = version
        todo = [s for s in dict.fromkeys(strings) if s not in self._prefix_store]
        if todo:
            ids, mask = self.tokenizer.pad(todo)
            dev = self.word_embeddings.weight.device
            ids, mask = ids.to(dev), mask.to(dev)
            with torch.no_grad():
                x = self._embed(ids)
                for layer in self.layers[: self.n_frozen_layers]:
                    x = layer(x, ~mask)
            lengths = mask.sum(1).tolist()
            for s, h, n in zip(todo, x, lengths):
                self._prefix_store[s] = h[:n].detach()
        return [self._prefix_store[s] for s in strings]

    def encode(self, strings: Sequence[str]) -> torch.Tensor:
        if not self._frozen_modules():
            ids, mask = self.tokenizer.pad(strings)
            return self(ids.to(self.word_embeddings.weight.device), mask.to(self.word_embeddings.weight.device))
        hidden = self._prefix(strings)
        longest = max(h.shape[0] for h in hidden)
        x = hidden[0].new_zeros((len(hidden), longest, self.cfg.d))
        mask = torch.zeros((len(hidden), longest), dtype=torch.bool, device=x.device)
        for i, h in enumerate(hidden):
            x[i, : h.shape[0]] = h
            mask[i, : h.shape[0]] = True
        for layer in self.layers[self.n_frozen_layers :]:
            x = layer(x, ~mask)
        return self._pool(x, mask)


class FrozenTableEncoder(nn.Module):
    """Fixed string -> vector lookup; unknown strings are an error."""

    def __init__(self, table: dict[str, np.ndarray] | None = None, d: int | None = None):
        super().__init__()
        table = table or {}
        if d is None:
            if not table:
                raise ValueError("empty table needs an explicit width")
            d = len(next(iter(table.values())))
        self.d = d
        self.keys = list(table)
        self.lookup = {k: i for i, k in enumerate(self.keys)}
        mat = np.stack([np.asarray(table[k], dtype=np.float32) for k in self.keys]) if table else np.zeros((0, d), np.float32)
        if mat.shape[1] != d:
            raise ValueError(f"table vectors have width {mat.shape[1]}, expected {d}")
        self.register_buffer("table", torch.from_numpy(mat))
        self.unfrozen_layers = 0

    @property
    def n_trainable(self) -> int:
        return 0

    def encode(self, strings: Sequence[str]) -> torch.Tensor:
        missing = [s for s in strings if s not in self.lookup]
        if missing:
            raise KeyError(f"{len(missing)} strings not in the frozen embedding table, e.g. {missing[0]!r}")
        return self.table[[self.lookup[s] for s in strings]]

    def set_unfrozen_layers(self, k: int) -> None:
        if k != 0:
            raise ValueError("a frozen table has no layers to unfreeze")


def read_frozen_table(path: str | Path) -> dict[str, np.ndarray]:
    """Header ``d=<int>``, then ``<string>\\t<d space-separated floats>`` per line.

    Strings are stored with backslash escapes (``\\n``, ``\\t``, ``\\\\``).
    """
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("d="):
        raise ValueError(f"{path}: missing 'd=<int>' header")
    d = int(lines[0][2:])
    table = {}
    for lineno, line in enumerate(lines[1:], 2):
        if not line:
            continue
        key, sep, vec = line.rpartition("\t")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected a tab between string and vector")
        values = np.array(vec.split(), dtype=np.float32)
        if values.size != d:
            raise ValueError(f"{path}:{lineno}: expected {d} values, got {values.size}")
        table[_unescape(key)] = values
    return table


def write_frozen_table(table: dict[str, np.ndarray], path: str | Path) -> None:
    d = len(next(iter(table.values())))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"d={d}\n")
        for key, vec in table.items():
            fh.write(_escape(key) + "\t" + " ".join(repr(float(v)) for v in vec) + "\n")


def _escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace("\n", "\\n").replace("\t", "\\t")


def _unescape(s: str) -> str:
    return re.sub(r"\\(.)", lambda m: {"n": "\n", "t": "\t"}.get(m.group(1), m.group(1)), s)


class NumericEncoder(nn.Module):
    """1 -> 2d -> d MLP applied to each element's clipped z-score."""

    def __init__(self, d: int, dropout: float = 0.1):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(1, 2 * d), nn.ReLU(), nn.Dropout(dropout), nn.Linear(2 * d, d))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z.unsqueeze(-1))


def numeric_encoder_param_count(d: int) -> int:
    return (1 * 2 * d + 2 * d) + (2 * d * d + d)


def weights_version(module: nn.Module) -> tuple:
    # in-place optimizer updates and load_state_dict both bump a tensor's version counter
    return tuple((p.data_ptr(), p._version) for p in module.parameters())


class EmbeddingCache:
    """String -> embedding memo, dropped whenever the encoder weights change."""

    def __init__(self):
        self._store: dict[str, torch.Tensor] = {}
        self._version: tuple | None = None
        self.hits = 0
        self.misses = 0

    def clear(self) -> None:
        self._store.clear()
        self._version = None

    def __len__(self) -> int:
        return len(self._store)

    def encode(self, encoder, strings: Sequence[str]) -> torch.Tensor:
        version = weights_version(encoder)
        if version != self._version:
            self._store.clear()
            self._version = version
        todo = [s for s in dict.fromkeys(strings) if s not in self._store]
        self.misses += len(todo)
        self.hits += len(strings) - len(todo)
        if todo:
            with torch.no_grad():
                fresh = encoder.encode(todo)
            for s, v in zip(todo, fresh):
                self._store[s] = v.detach()
        return torch.stack([self._store[s] for s in strings])
