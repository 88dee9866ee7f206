"""AUROC / R², per-split score normalization, confidence intervals and win rates."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

Z95 = 1.96


class MetricError(ValueError):
    pass


def _binary_auroc(scores: np.ndarray, positive: np.ndarray) -> float:
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs at least one positive and one negative example")
    # doubled average ranks are integers, so the statistic is exact until the final division
    ranks2 = np.rint(2 * rankdata(scores)).astype(np.int64)
    u2 = int(ranks2[positive].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def auroc(scores, labels) -> float:
    """Binary AUROC (ties count one half); one-vs-rest macro average for more classes.

    ``scores`` is a vector of positive-class scores or an (n, C) matrix of class
    scores. In the multiclass case, classes absent from ``labels`` are skipped.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        return _binary_auroc(scores, labels.astype(bool))
    n_classes = scores.shape[1]
    if n_classes == 2:
        return _binary_auroc(scores[:, 1], labels == 1)
    present = np.unique(labels)
    if present.size < 2:
        raise MetricError("AUROC is undefined when only one class is present")
    return float(np.mean([_binary_auroc(scores[:, c], labels == c) for c in present if 0 <= c < n_classes]))


def r2(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if t.size < 2:
        raise MetricError("R² needs at least two targets")
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0:
        raise MetricError("R² is undefined for constant targets")
    return 1.0 - float(((t - p) ** 2).sum()) / ss_tot


def mean_ci(values: Iterable[float]) -> tuple[float, float]:
    """Mean and 95% normal-approximation half-width, using the sample standard deviation."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise MetricError("no values")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), Z95 * float(v.std(ddof=1)) / math.sqrt(v.size)


# (dataset, split) -> model -> raw metric
ScoreMatrix = dict[tuple[str, str], dict[str, float]]


@dataclass
class ModelSummary:
    mean: float
    ci: float
    n: int


@dataclass
class NormalizedScores:
    cells: ScoreMatrix
    summary: dict[str, ModelSummary]
    skipped: list[tuple[str, str]] = field(default_factory=list)


def normalize_cell(raw: Mapping[str, float]) -> dict[str, float]:
    best, worst = max(raw.values()), min(raw.values())
    if best == worst:
        return {m: 1.0 for m in raw}
    return {m: (v - worst) / (best - worst) for m, v in raw.items()}


def normalize_scores(matrix: ScoreMatrix) -> NormalizedScores:
    """Rescale each (dataset, split) so its best model gets 1 and its worst 0."""
    cells: ScoreMatrix = {}
    skipped = []
    for key, raw in matrix.items():
        present = {m: v for m, v in raw.items() if v is not None and not math.isnan(v)}
        if len(present) < 2:
            log.warning("skipping %s/%s: fewer than two models have results", *key)
            skipped.append(key)
            continue
        cells[key] = normalize_cell(present)
    per_model: dict[str, list[float]] = {}
    for cell in cells.values():
        for m, v in cell.items():
            per_model.setdefault(m, []).append(v)
    summary = {m: ModelSummary(*mean_ci(vals), len(vals)) for m, vals in sorted(per_model.items())}
    return NormalizedScores(cells, summary, skipped)


def win_rate(model_a: str, model_b: str, matrix: ScoreMatrix) -> tuple[float, float, int]:
    """Percentage of shared cells where ``model_a`` beats ``model_b`` (ties one half), with CI."""
    outcomes = []
    for raw in matrix.values():
        a, b = raw.get(model_a), raw.get(model_b)
        if a is None or b is None or math.isnan(a) or math.isnan(b):
            continue
        outcomes.append(1.0 if a > b else 0.5 if a == b else 0.0)
    if not outcomes:
        raise MetricError(f"{model_a} and {model_b} share no evaluated cells")
    mean, ci = mean_ci(outcomes)
    return 100 * mean, 100 * ci, len(outcomes)


@dataclass
class ResultRecord:
    dataset: str
    split_seed: str
    model: str
    task: str
    metric_value: float


RESULT_FIELDS = ("dataset", "split_seed", "model", "task", "metric_value")


def read_results(path: str | Path) -> tuple[list[ResultRecord], list[str]]:
    """Parse a results CSV; returns records and per-line error messages."""
    records, errors = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in RESULT_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            return [], [f"line 1: missing columns {missing}"]
        for row in reader:
            line = reader.line_num
            try:
                value = float(row["metric_value"])
                if not math.isfinite(value):
                    raise ValueError("non-finite")
                if not row["dataset"] or not row["model"]:
                    raise ValueError("empty dataset or model")
                records.append(ResultRecord(row["dataset"], row["split_seed"], row["model"], row["task"], value))
            except (TypeError, ValueError) as exc:
                errors.append(f"line {line}: {exc}")
    return records, errors


def to_matrix(records: Iterable[ResultRecord]) -> ScoreMatrix:
    matrix: ScoreMatrix = {}
    for r in records:
        matrix.setdefault((r.dataset, r.split_seed), {})[r.model] = r.metric_value
    return matrix


def write_results(records: Iterable[ResultRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for r in records:
            w.writerow([r.dataset, r.split_seed, r.model, r.task, repr(float(r.metric_value))])


def report(matrix: ScoreMatrix) -> tuple[list[list[str]], str]:
    """CSV rows and a human-readable table of normalized means and pairwise win rates."""
    norm = normalize_scores(matrix)
    models = list(norm.summary)
    rows = [["kind", "model", "opponent", "value", "ci95", "n"]]
    lines = ["Normalized score (95% CI)"]
    for m, s in norm.summary.items():
        rows.append(["normalized", m, "", f"{s.mean:.6f}", f"{s.ci:.6f}", str(s.n)])
        lines.append(f"  {m:<24} {s.mean:.3f} ± {s.ci:.3f}  (n={s.n})")
    all_models = sorted({m for raw in matrix.values() for m in raw})
    for key, raw in sorted(matrix.items()):
        absent = [m for m in all_models if m not in raw]
        if absent:
            lines.append(f"  note: {', '.join(absent)} missing on {key[0]} split {key[1]}")
    for key in norm.skipped:
        lines.append(f"  note: {key[0]} split {key[1]} skipped (fewer than two models)")
    if len(models) >= 2:
        lines.append("Win rate % (row vs column, 95% CI)")
        for a in models:
            cells = []
            for b in models:
                if a == b:
                    cells.append("-")
                    continue
                try:
                    pct, ci, n = win_rate(a, b, matrix)
                except MetricError:
                    cells.append("n/a")
                    continue
                rows.append(["win_rate", a, b, f"{pct:.6f}", f"{ci:.6f}", str(n)])
                cells.append(f"{pct:.1f}±{ci:.1f}")
            lines.append(f"  {a:<24} " + "  ".join(f"{c:>12}" for c in cells))
    return rows, "\n".join(lines)
