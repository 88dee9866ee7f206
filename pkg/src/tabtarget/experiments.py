"""Desk-scale trend experiments on synthetic task families.

``transfer_trend`` pretrains on nested corpora of increasing size and finetunes on
held-out family members; ``unfreezing_trend`` compares a frozen text encoder with
one whose top layer is trainable, starting from a reconstruction warm start.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import torch
from torch import nn

from . import synthetic
from .encode import TextEncoder
from .evaluation import ScoreMatrix, normalize_scores
from .ingest import SplitSpec
from .model import build_model, desk_preset
from .train import FinetuneConfig, PretrainConfig, build_tokenizer, finetune, prepare, pretrain

log = logging.getLogger(__name__)

DOWNSTREAM_SPLIT = SplitSpec(train_frac=0.2, val_frac=0.1, test_frac=0.7)


@dataclass
class TrendConfig:
    corpus_sizes: tuple[int, ...] = (0, 4, 16)
    seeds: tuple[int, ...] = (0, 1, 2)
    n_tasks: int = 4
    corpus_rows: int = 500
    task_rows: int = 600
    family_seed: int = 0
    pretrain: PretrainConfig = PretrainConfig(epochs=30, mini_batch=32, accumulation=1, max_lr=3e-4, patience=10)
    adapt: FinetuneConfig = FinetuneConfig(epochs=60, mini_batch=32, accumulation=1, max_lr=1e-3, patience=10)
    scratch: FinetuneConfig = FinetuneConfig.full_finetune(epochs=60, mini_batch=32, accumulation=1, max_lr=3e-4, patience=10)


@dataclass
class TrendResult:
    matrix: ScoreMatrix
    means: dict[str, float]
    seconds: float
    notes: list[str] = field(default_factory=list)


def _summarize(matrix: ScoreMatrix) -> dict[str, float]:
    return {m: s.mean for m, s in normalize_scores(matrix).summary.items()}


def transfer_trend(cfg: TrendConfig = TrendConfig()) -> TrendResult:
    """Downstream test scores for models pretrained on 0, 4, 16, ... family datasets."""
    start = time.time()
    fam = synthetic.ConceptFamily(cfg.family_seed)
    matrix: ScoreMatrix = {}
    notes = []
    largest = max(cfg.corpus_sizes)
    for seed in cfg.seeds:
        corpus = [prepare(fam.sample(s), SplitSpec.pretraining(seed)) for s in synthetic.corpus_specs(largest, rows=cfg.corpus_rows, seed=seed)]
        tasks = [prepare(fam.sample(s), replace(DOWNSTREAM_SPLIT, seed=seed)) for s in synthetic.heldout_specs(cfg.n_tasks, rows=cfg.task_rows, seed=seed)]
        # one shared vocabulary per seed keeps the comparison about weights, not tokenization
        tok = build_tokenizer(corpus + tasks, extra=fam.vocabulary())
        model_cfg = desk_preset(len(tok))
        for size in cfg.corpus_sizes:
            name = f"pretrain_{size}"
            base = build_model(model_cfg, tok, seed=seed)
            if size:
                res = pretrain(corpus[:size], base, replace(cfg.pretrain, seed=seed))
                notes.append(f"seed {seed} {name}: best epoch {res.best_epoch}, val {res.best_metric:.3f}")
                ft_cfg = replace(cfg.adapt, seed=seed)
            else:
                ft_cfg = replace(cfg.scratch, seed=seed)
            for task in tasks:
                out = finetune(base, task, ft_cfg)
                matrix.setdefault((task.name, str(seed)), {})[name] = float(out.test_metric)
                log.info("seed %d %s %s: %.4f", seed, name, task.name, out.test_metric)
    return TrendResult(matrix, _summarize(matrix), time.time() - start, notes)


def bag_of_words_warm_start(encoder: TextEncoder, texts: list[str], steps: int = 300, lr: float = 1e-3, batch: int = 64, seed: int = 0) -> float:
    """Briefly train the whole text encoder so its pooled output reconstructs each string's word set.

    Returns the final reconstruction loss. The decoder is discarded afterwards.
    """
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    k = encoder.unfrozen_layers
    encoder.set_unfrozen_layers(len(encoder.layers))
    tok = encoder.tokenizer
    decoder = nn.Linear(encoder.cfg.d, len(tok))
    params = [p for p in encoder.parameters() if p.requires_grad] + list(decoder.parameters())
    opt = torch.optim.AdamW(params, lr=lr)
    targets = torch.zeros(len(texts), len(tok))
    for i, t in enumerate(texts):
        targets[i, tok.tokenize(t)] = 1.0
    targets[:, tok.pad_id] = 0.0
    encoder.train()
    loss = torch.tensor(float("nan"))
    for _ in range(steps):
        idx = torch.randint(len(texts), (min(batch, len(texts)),), generator=g)
        emb = encoder.encode([texts[i] for i in idx.tolist()])
        loss = nn.functional.binary_cross_entropy_with_logits(decoder(emb), targets[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    encoder.set_unfrozen_layers(k)
    encoder.eval()
    return float(loss.detach())


@dataclass
class UnfreezeConfig:
    unfrozen: tuple[int, ...] = (0, 1)
    seeds: tuple[int, ...] = (0, 1, 2)
    n_tasks: int = 4
    train_rows: int = 300
    filler_words: int = 4
    warm_steps: int = 300
    fit: FinetuneConfig = FinetuneConfig.full_finetune(epochs=40, mini_batch=32, accumulation=1, max_lr=3e-4, patience=10)


def unfreezing_trend(cfg: UnfreezeConfig = UnfreezeConfig()) -> TrendResult:
    """Downstream scores on text-cue tasks with k frozen-vs-unfrozen top encoder layers."""
    start = time.time()
    matrix: ScoreMatrix = {}
    notes = []
    split = SplitSpec(train_frac=0.5, val_frac=0.1, test_frac=0.4)
    for seed in cfg.seeds:
        tasks = []
        for t in range(cfg.n_tasks):
            ds = synthetic.text_task(2 * cfg.train_rows, seed=1000 * seed + t, n_filler=cfg.filler_words, name=f"notes{t}")
            tasks.append(prepare(ds, replace(split, seed=seed)))
        tok = build_tokenizer(tasks, extra=synthetic.text_vocabulary())
        texts = sorted({s for p in tasks for s in p.train.strings})
        warm = build_model(desk_preset(len(tok)), tok, seed=seed)
        loss = bag_of_words_warm_start(warm.semantic, texts, cfg.warm_steps, seed=seed)
        notes.append(f"seed {seed}: warm-start reconstruction loss {loss:.4f}")
        state = {k: v.clone() for k, v in warm.state_dict().items()}
        for k in cfg.unfrozen:
            name = f"unfrozen_{k}"
            model = build_model(desk_preset(len(tok), unfrozen_layers=k), tok, seed=seed)
            model.load_state_dict(state)
            model.set_unfrozen_layers(k)
            for task in tasks:
                out = finetune(model, task, replace(cfg.fit, seed=seed))
                matrix.setdefault((task.name, str(seed)), {})[name] = float(out.test_metric)
                log.info("seed %d %s %s: %.4f", seed, name, task.name, out.test_metric)
    return TrendResult(matrix, _summarize(matrix), time.time() - start, notes)


def is_non_decreasing(values: list[float]) -> bool:
    return all(b >= a for a, b in zip(values, values[1:]))


__all__ = [
    "TrendConfig",
    "TrendResult",
    "UnfreezeConfig",
    "bag_of_words_warm_start",
    "is_non_decreasing",
    "transfer_trend",
    "unfreezing_trend",
]
