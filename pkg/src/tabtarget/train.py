"""Multi-dataset pretraining and single-dataset finetuning."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .evaluation import MetricError, auroc, r2
from .encode import Tokenizer
from .ingest import CLASSIFICATION, Dataset, SchemaError, SplitSpec, load_csv, read_sidecar, split
from .model import Batch, TabularModel, make_batch, predict_table
from .nn.lora import lora_parameters, mark_only_lora_trainable, wrap_modules
from .nn.optim import OneCycleSchedule, clip_grad_norm, make_optimizer, onecycle_lr, set_lr
from .verbalize import FULL, VerbalizedTable, Verbalizer, fit_verbalizer

log = logging.getLogger(__name__)

ADAPTED_LINEARS = ("q_proj", "k_proj", "v_proj", "out_proj", "linear1", "linear2")


class NumericFailure(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 50
    per_dataset_epoch_cap: int = 2048
    mini_batch: int = 32
    accumulation: int = 4
    max_lr: float = 5e-5
    weight_decay: float = 0.001
    warmup_frac: float = 0.1
    patience: int = 3
    clip_norm: float = 1.0
    seed: int = 0

    @property
    def effective_batch(self) -> int:
        return self.mini_batch * self.accumulation


@dataclass(frozen=True)
class FinetuneConfig:
    r: int = 32
    alpha: float = 64.0
    adapter_dropout: float = 0.1
    max_lr: float = 0.001
    weight_decay: float = 0.001
    warmup_frac: float = 0.1
    patience: int = 5
    epochs: int = 50
    mini_batch: int = 32
    accumulation: int = 4
    per_epoch_cap: int | None = None
    clip_norm: float = 1.0
    seed: int = 0
    full: bool = False

    @classmethod
    def full_finetune(cls, **overrides) -> "FinetuneConfig":
        return replace(cls(max_lr=2.5e-5, patience=5, full=True), **overrides)


@dataclass
class PreparedDataset:
    """A dataset split and verbalized with artifacts fitted on its own training rows."""

    name: str
    task: str
    verbalizer: Verbalizer
    train: VerbalizedTable
    val: VerbalizedTable
    test: VerbalizedTable | None = None


def prepare(dataset: Dataset, spec: SplitSpec, mode: str = FULL) -> PreparedDataset:
    train, val, test = split(dataset, spec)
    verb = fit_verbalizer(train, mode)
    return PreparedDataset(
        dataset.name,
        dataset.task,
        verb,
        verb.transform(train),
        verb.transform(val),
        verb.transform(test) if test.n else None,
    )


BatchSchedule = list[tuple[int, np.ndarray]]


def make_epoch_batches(sizes: Sequence[int], epoch: int, mini_batch: int, cap: int | None, seed: int) -> BatchSchedule:
    """Per dataset, up to ``cap`` random rows cut into mini-batches; all batches shuffled together."""
    rng = np.random.default_rng([seed, epoch])
    batches: BatchSchedule = []
    for k, n in enumerate(sizes):
        rows = rng.permutation(n)
        if cap is not None:
            rows = rows[:cap]
        batches += [(k, rows[i : i + mini_batch]) for i in range(0, len(rows), mini_batch)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def batches_per_epoch(sizes: Sequence[int], mini_batch: int, cap: int | None) -> int:
    return sum(math.ceil((n if cap is None else min(n, cap)) / mini_batch) for n in sizes)


def loss_fn(outputs: torch.Tensor, labels: torch.Tensor, task: str) -> torch.Tensor:
    """Mean cross-entropy over class logits, or mean squared error."""
    if task == CLASSIFICATION:
        if labels.numel() and (int(labels.max()) >= outputs.shape[-1] or int(labels.min()) < 0):
            raise ValueError(f"label index outside [0, {outputs.shape[-1]})")
        return F.cross_entropy(outputs, labels)
    return F.mse_loss(outputs, labels.to(outputs.dtype))


def table_metric(model: TabularModel, table: VerbalizedTable) -> float:
    preds = predict_table(model, table)
    if table.task == CLASSIFICATION:
        return auroc(preds, table.labels)
    return r2(preds, table.labels)


def mean_metric(model: TabularModel, tables: Sequence[VerbalizedTable]) -> tuple[float, list[float]]:
    """Unweighted mean over datasets of AUROC (classification) or R² (regression)."""
    values = []
    for t in tables:
        try:
            values.append(table_metric(model, t))
        except MetricError as exc:
            log.warning("no validation metric for %s: %s", t.name, exc)
            values.append(float("nan"))
    finite = [v for v in values if not math.isnan(v)]
    return (float(np.mean(finite)) if finite else float("nan")), values


class EarlyStopping:
    """Keeps a copy of the best weights; signals a stop after ``patience`` epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.best_state: dict | None = None
        self.bad_epochs = 0

    def update(self, epoch: int, metric: float, model: torch.nn.Module | None = None) -> bool:
        if metric > self.best:
            self.best, self.best_epoch, self.bad_epochs = metric, epoch, 0
            if model is not None:
                self.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    def restore(self, model: torch.nn.Module) -> None:
        if self.best_state is not None:
            model.load_state_dict(self.best_state)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    metrics: list[float]
    mean_metric: float
    steps: int


@dataclass
class TrainResult:
    model: TabularModel
    history: list[EpochRecord]
    best_epoch: int
    best_metric: float
    names: list[str] = field(default_factory=list)
    initial_metric: float = float("nan")

    def history_rows(self) -> list[list]:
        head = ["epoch"] + [f"metric_{n}" for n in self.names] + ["mean_metric", "lr", "train_loss"]
        rows = [head]
        for h in self.history:
            rows.append([h.epoch, *[f"{v:.8g}" for v in h.metrics], f"{h.mean_metric:.8g}", f"{h.lr:.8g}", f"{h.train_loss:.8g}"])
        return rows

    def write_history(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(self.history_rows())


def accumulate_gradients(model: TabularModel, group: Sequence[Batch]) -> float:
    """Backpropagate the plain average of per-mini-batch mean losses; returns that average."""
    total = 0.0
    for batch in group:
        loss = loss_fn(model(batch), batch.labels, batch.task) / len(group)
        if not torch.isfinite(loss):
            raise NumericFailure(f"non-finite loss {loss.item()} on a {batch.task} batch of {len(batch)} rows")
        loss.backward()
        total += loss.item()
    return total


def _fit(
    model: TabularModel,
    train_tables: Sequence[VerbalizedTable],
    val_tables: Sequence[VerbalizedTable],
    params: list[torch.nn.Parameter],
    *,
    epochs: int,
    mini_batch: int,
    accumulation: int,
    cap: int | None,
    max_lr: float,
    weight_decay: float,
    warmup_frac: float,
    patience: int,
    clip_norm: float,
    seed: int,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    torch.manual_seed(seed)
    names = [t.name for t in train_tables]
    initial, per = mean_metric(model, val_tables)
    stopper = EarlyStopping(patience)
    stopper.update(0, initial, model)
    history: list[EpochRecord] = []
    sizes = [t.n for t in train_tables]
    steps_per_epoch = math.ceil(batches_per_epoch(sizes, mini_batch, cap) / accumulation)
    sched = OneCycleSchedule(max_lr, max(1, epochs * steps_per_epoch), warmup_frac)
    optimizer = make_optimizer(params, onecycle_lr(0, sched), weight_decay) if params else None
    step = 0
    for epoch in range(1, epochs + 1):
        model.train()
        schedule = make_epoch_batches(sizes, epoch, mini_batch, cap, seed)
        losses = []
        lr = onecycle_lr(min(step, sched.total_steps), sched)
        for start in range(0, len(schedule), accumulation):
            group = [make_batch(train_tables[k], rows) for k, rows in schedule[start : start + accumulation]]
            if optimizer is not None:
                optimizer.zero_grad(set_to_none=True)
            losses.append(accumulate_gradients(model, group))
            if optimizer is None:
                continue
            clip_grad_norm(params, clip_norm)
            lr = onecycle_lr(min(step, sched.total_steps), sched)
            set_lr(optimizer, lr)
            optimizer.step()
            step += 1
        metric, per = mean_metric(model, val_tables)
        record = EpochRecord(epoch, lr, float(np.mean(losses)) if losses else float("nan"), per, metric, step)
        history.append(record)
        log.info("epoch %d: mean metric %.4f (lr %.3g, loss %.4f)", epoch, metric, lr, record.train_loss)
        if on_epoch:
            on_epoch(record)
        if stopper.update(epoch, metric, model):
            break
    stopper.restore(model)
    model.eval()
    return TrainResult(model, history, stopper.best_epoch, stopper.best, names, initial)


def pretrain(corpus: Sequence[PreparedDataset], model: TabularModel, cfg: PretrainConfig, on_epoch=None) -> TrainResult:
    """Multi-task pretraining; the returned model carries the best-validation weights."""
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    params = [p for p in model.parameters() if p.requires_grad]
    return _fit(
        model,
        [d.train for d in corpus],
        [d.val for d in corpus],
        params,
        epochs=cfg.epochs,
        mini_batch=cfg.mini_batch,
        accumulation=cfg.accumulation,
        cap=cfg.per_dataset_epoch_cap,
        max_lr=cfg.max_lr,
        weight_decay=cfg.weight_decay,
        warmup_frac=cfg.warmup_frac,
        patience=cfg.patience,
        clip_norm=cfg.clip_norm,
        seed=cfg.seed,
        on_epoch=on_epoch,
    )


def adapter_target_names(model: TabularModel) -> list[str]:
    """Attention and feed-forward linears of fusion, interaction and unfrozen encoder layers."""
    prefixes = ["fusion.", "interaction."]
    semantic_layers = getattr(model.semantic, "layers", None)
    if semantic_layers is not None:
        k = model.semantic.unfrozen_layers
        prefixes += [f"semantic.layers.{i}." for i in range(len(semantic_layers) - k, len(semantic_layers))]
    return [
        name
        for name, mod in model.named_modules()
        if isinstance(mod, torch.nn.Linear) and name.startswith(tuple(prefixes)) and name.rsplit(".", 1)[-1] in ADAPTED_LINEARS
    ]


def add_adapters(model: TabularModel, r: int, alpha: float, dropout: float, seed: int = 0) -> list[str]:
    targets = set(adapter_target_names(model))
    torch.manual_seed(seed)
    wrapped = wrap_modules(model, lambda name, _m: name in targets, r, alpha, dropout)
    mark_only_lora_trainable(model)
    return wrapped


def adapter_param_count(model: TabularModel, r: int) -> int:
    """Closed form: r * (in + out) summed over the matrices adapters would wrap."""
    total = 0
    for name in adapter_target_names(model):
        mod = model.get_submodule(name)
        total += r * (mod.in_features + mod.out_features)
    return total


@dataclass
class FinetuneResult(TrainResult):
    trainable: int = 0
    total: int = 0
    test_metric: float | None = None


def finetune(model: TabularModel, data: PreparedDataset, cfg: FinetuneConfig, on_epoch=None) -> FinetuneResult:
    """Train on one dataset: adapters only (default) or every unfrozen weight (``cfg.full``).

    The input model is left untouched; a trained copy is returned.
    """
    model = copy.deepcopy(model)
    base_total = sum(p.numel() for p in model.parameters())
    if cfg.full:
        params = [p for p in model.parameters() if p.requires_grad]
    else:
        add_adapters(model, cfg.r, cfg.alpha, cfg.adapter_dropout, cfg.seed)
        params = lora_parameters(model)
    trainable = sum(p.numel() for p in params)
    res = _fit(
        model,
        [data.train],
        [data.val],
        params,
        epochs=cfg.epochs,
        mini_batch=cfg.mini_batch,
        accumulation=cfg.accumulation,
        cap=cfg.per_epoch_cap,
        max_lr=cfg.max_lr,
        weight_decay=cfg.weight_decay,
        warmup_frac=cfg.warmup_frac,
        patience=cfg.patience,
        clip_norm=cfg.clip_norm,
        seed=cfg.seed,
        on_epoch=on_epoch,
    )
    test_metric = None
    if data.test is not None:
        try:
            test_metric = table_metric(res.model, data.test)
        except MetricError as exc:
            log.warning("no test metric for %s: %s", data.name, exc)
    return FinetuneResult(
        res.model, res.history, res.best_epoch, res.best_metric, res.names, res.initial_metric,
        trainable=trainable, total=base_total, test_metric=test_metric,
    )


def full_finetune(model: TabularModel, data: PreparedDataset, lr: float = 2.5e-5, patience: int = 5, **overrides) -> FinetuneResult:
    return finetune(model, data, FinetuneConfig.full_finetune(max_lr=lr, patience=patience, **overrides))


@dataclass
class CorpusEntry:
    path: Path
    hints: dict[str, str]
    target: str | None = None


def read_manifest(path: str | Path) -> list[CorpusEntry]:
    """One dataset per line: ``path [column=hint ...]``; relative paths resolve against the manifest.

    A ``<csv>.schema`` sidecar next to a dataset supplies default hints; manifest hints win.
    """
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        first, *rest = line.split()
        csv_path = (path.parent / first) if not Path(first).is_absolute() else Path(first)
        hints: dict[str, str] = {}
        sidecar = csv_path.with_suffix(csv_path.suffix + ".schema")
        if sidecar.exists():
            hints.update(read_sidecar(sidecar))
        for item in rest:
            if "=" not in item:
                raise SchemaError(f"{path}:{lineno}: expected column=hint, got {item!r}")
            k, v = item.split("=", 1)
            hints[k] = v
        entries.append(CorpusEntry(csv_path, hints))
    if not entries:
        raise SchemaError(f"{path}: manifest lists no datasets")
    return entries


def load_corpus(entries: Sequence[CorpusEntry]) -> list[Dataset]:
    """Ingest every dataset before any training so that a bad file fails fast."""
    out = []
    for e in entries:
        try:
            out.append(load_csv(e.path, e.hints, e.target))
        except FileNotFoundError:
            raise SchemaError(f"{e.path}: file not found") from None
        except SchemaError as exc:
            raise SchemaError(f"{e.path}: {exc}") from None
    return out


def corpus_texts(prepared: Iterable[PreparedDataset]) -> list[str]:
    return [s for p in prepared for t in (p.train, p.val) for s in t.strings]


def build_tokenizer(prepared: Iterable[PreparedDataset], max_size: int | None = None, extra: Iterable[str] = ()) -> Tokenizer:
    return Tokenizer.build([*corpus_texts(prepared), *extra], max_size=max_size)
