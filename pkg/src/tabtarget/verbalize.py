"""Turn table rows into element sequences: target tokens first, then one element per feature."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .ingest import CLASSIFICATION, NUMERICAL, REGRESSION, Dataset, SchemaError, TargetSpec, is_missing

N_BINS = 10
CLIP = 3.0
UNKNOWN = "Unknown Value"
DASH = "–"

FULL = "full"
NAME_BIN = "name_bin"
NAME_ONLY = "name_only"
MODES = (FULL, NAME_BIN, NAME_ONLY)

FEATURE = "feature"
TARGET_TOKEN = "target_token"


def format_number(x: float) -> str:
    """At most 4 significant digits, positional notation, no trailing zeros."""
    x = float(f"{float(x):.4g}")
    if x == 0:
        return "0"
    return np.format_float_positional(x, trim="-")


@dataclass(frozen=True)
class Bin:
    lo: float
    hi: float
    q_lo: int
    q_hi: int


@dataclass(frozen=True)
class NumericArtifact:
    """Training statistics of one numerical column.

    ``edges`` holds the distinct quantile boundaries from the minimum to the
    maximum; ``bins`` are the intervals between consecutive edges with their
    quantile range. A constant column has one degenerate bin that catches
    every value; an all-missing column has no bins.
    """

    mean: float
    std: float
    edges: tuple[float, ...]
    bins: tuple[Bin, ...]

    @property
    def degenerate(self) -> bool:
        return len(self.edges) == 1

    @classmethod
    def from_edges(cls, edges: Sequence[float], mean: float = 0.0, std: float = 1.0, levels: Sequence[float] | None = None):
        """Build from raw (possibly repeated) edges at quantile levels 0, 10, ..., 100."""
        edges = [float(e) for e in edges]
        if levels is None:
            levels = np.linspace(0, 100, len(edges)).tolist()
        if len(edges) != len(levels):
            raise ValueError("edges and levels differ in length")
        if any(b < a for a, b in zip(edges, edges[1:])):
            raise ValueError("edges must be non-decreasing")
        if not edges:
            return cls(mean, std, (), ())
        runs: list[tuple[float, int, int]] = []  # (value, first level, last level)
        for e, q in zip(edges, levels):
            q = int(round(q))
            if runs and runs[-1][0] == e:
                runs[-1] = (e, runs[-1][1], q)
            else:
                runs.append((e, q, q))
        if len(runs) == 1:
            v = runs[0][0]
            return cls(mean, std, (v,), (Bin(v, v, 0, 100),))
        bins = tuple(Bin(a[0], b[0], a[2], b[1]) for a, b in zip(runs, runs[1:]))
        return cls(mean, std, tuple(r[0] for r in runs), bins)

    def bin_index(self, x: float) -> int | str:
        """Bin position for ``x``: an int, or one of 'below', 'above', 'unknown'."""
        if x is None or np.isnan(x) or not self.bins:
            return "unknown"
        if self.degenerate:
            return 0
        if x < self.edges[0]:
            return "below"
        if x > self.edges[-1]:
            return "above"
        # a value equal to an interior edge belongs to the lower bin
        i = int(np.searchsorted(self.edges, x, side="left")) - 1
        return max(i, 0)


def fit_numeric(train_values) -> NumericArtifact:
    """Mean/std and decile edges of the non-missing training values (linear interpolation)."""
    vals = np.asarray(train_values, dtype=np.float64)
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        return NumericArtifact(0.0, 0.0, (), ())
    qs = np.quantile(vals, np.linspace(0, 1, N_BINS + 1))
    return NumericArtifact.from_edges(qs, float(vals.mean()), float(vals.std()))


def standardize(x, artifact: NumericArtifact):
    """Clipped z-score; missing values and constant columns give 0."""
    arr = np.asarray(x, dtype=np.float64)
    if artifact.std > 0:
        z = np.clip((arr - artifact.mean) / artifact.std, -CLIP, CLIP)
    else:
        z = np.zeros_like(arr)
    z = np.where(np.isnan(arr), 0.0, z)
    return float(z) if z.ndim == 0 else z


def _bin_text(b: Bin, mode: str) -> str:
    text = f"{format_number(b.lo)}{DASH}{format_number(b.hi)}"
    if mode == FULL:
        text += f" (Quantile {b.q_lo}{DASH}{b.q_hi}%)"
    return text


def numeric_labels(name: str, artifact: NumericArtifact, mode: str) -> dict:
    """Every string a numerical column can produce, keyed by bin position."""
    if mode not in MODES:
        raise ValueError(f"unknown verbalization mode {mode!r}")
    out: dict = {"unknown": f"{name}: {UNKNOWN}"}
    if mode == NAME_ONLY:
        value = f"{name}: Numeric"
        out.update({"below": value, "above": value})
        out.update({i: value for i in range(len(artifact.bins))})
        return out
    if artifact.bins:
        lo, hi = format_number(artifact.edges[0]), format_number(artifact.edges[-1])
        below, above = f"Lower than {lo}", f"Higher than {hi}"
        if mode == FULL:
            below += " (Quantile 0%)"
            above += " (Quantile 100%)"
        out["below"] = f"{name}: {below}"
        out["above"] = f"{name}: {above}"
    out.update({i: f"{name}: {_bin_text(b, mode)}" for i, b in enumerate(artifact.bins)})
    return out


def verbalize_numeric(name: str, x, artifact: NumericArtifact, mode: str = FULL) -> str:
    key = artifact.bin_index(None if is_missing(x) else float(x))
    return numeric_labels(name, artifact, mode)[key]


def sanitize(value: str) -> str:
    return " ".join(str(value).split())


def verbalize_semantic(name: str, value) -> str:
    text = UNKNOWN if is_missing(value) else sanitize(value)
    if not text:
        text = UNKNOWN
    return f"Predictive Feature: {name}\nFeature Value: {text}"


def verbalize_targets(target: TargetSpec) -> list[str]:
    if target.task == CLASSIFICATION:
        if target.n_classes < 2:
            raise SchemaError(f"classification target {target.name!r} needs at least 2 classes")
        return [f"Target Feature: {target.name}\nFeature Value: {c}" for c in target.classes]
    if target.task == REGRESSION:
        return [f"Numerical Target Feature: {target.name}"]
    raise SchemaError(f"unknown task {target.task!r}")


@dataclass(frozen=True)
class Element:
    semantic: str
    numeric: float
    role: str = FEATURE


@dataclass
class ElementSequence:
    elements: list[Element]
    true_label: float | int | None
    dataset: str = ""
    task: str = CLASSIFICATION

    @property
    def n_targets(self) -> int:
        return sum(e.role == TARGET_TOKEN for e in self.elements)

    def __len__(self) -> int:
        return len(self.elements)

    def to_json(self) -> dict:
        return {
            "elements": [{"role": e.role, "semantic": e.semantic, "numeric": e.numeric} for e in self.elements],
            "true_label": self.true_label,
        }


@dataclass
class VerbalizedTable:
    """A whole split in array form: element strings deduplicated per table."""

    strings: list[str]  # unique element strings
    index: np.ndarray  # (n, e) int64 into ``strings``
    numeric: np.ndarray  # (n, e) float32
    labels: np.ndarray  # (n,) int64 class index or float32 standardized target
    n_targets: int
    task: str
    name: str = ""

    @property
    def n(self) -> int:
        return self.index.shape[0]

    @property
    def e(self) -> int:
        return self.index.shape[1]

    def take(self, rows) -> "VerbalizedTable":
        rows = np.asarray(rows, dtype=np.int64)
        return VerbalizedTable(self.strings, self.index[rows], self.numeric[rows], self.labels[rows], self.n_targets, self.task, self.name)

    def sequences(self) -> list[ElementSequence]:
        out = []
        for i in range(self.n):
            elems = [
                Element(self.strings[self.index[i, j]], float(self.numeric[i, j]), TARGET_TOKEN if j < self.n_targets else FEATURE)
                for j in range(self.e)
            ]
            label = int(self.labels[i]) if self.task == CLASSIFICATION else float(self.labels[i])
            out.append(ElementSequence(elems, label, self.name, self.task))
        return out


@dataclass
class Verbalizer:
    """Verbalization state fitted on one training split; never refitted on other splits."""

    target: TargetSpec
    feature_kinds: dict[str, str]
    numeric: dict[str, NumericArtifact]
    target_artifact: NumericArtifact | None = None
    mode: str = FULL
    _labels: dict = field(default_factory=dict, repr=False)

    def labels_for(self, name: str) -> dict:
        if name not in self._labels:
            self._labels[name] = numeric_labels(name, self.numeric[name], self.mode)
        return self._labels[name]

    def target_strings(self) -> list[str]:
        return verbalize_targets(self.target)

    def encode_label(self, y):
        if self.target.task == CLASSIFICATION:
            return y
        return standardize(y, self.target_artifact)

    def verbalize_example(self, row: Mapping, label=None, dataset: str = "") -> ElementSequence:
        if set(row) != set(self.feature_kinds):
            extra = sorted(set(row) - set(self.feature_kinds))
            absent = sorted(set(self.feature_kinds) - set(row))
            raise SchemaError(f"row does not match schema (unexpected {extra}, missing {absent})")
        elements = [Element(s, 0.0, TARGET_TOKEN) for s in self.target_strings()]
        for name, kind in self.feature_kinds.items():
            value = row[name]
            if kind == NUMERICAL:
                x = None if is_missing(value) else float(value)
                art = self.numeric[name]
                key = art.bin_index(x)
                z = 0.0 if x is None else standardize(x, art)
                elements.append(Element(self.labels_for(name)[key], float(z)))
            else:
                elements.append(Element(verbalize_semantic(name, value), 0.0))
        true_label = None if label is None else self.encode_label(label)
        if true_label is not None:
            true_label = int(true_label) if self.target.task == CLASSIFICATION else float(true_label)
        return ElementSequence(elements, true_label, dataset, self.target.task)

    def transform(self, data: Dataset) -> VerbalizedTable:
        if [c.name for c in data.features] != list(self.feature_kinds):
            raise SchemaError("dataset columns differ from the columns the verbalizer was fitted on")
        n = data.n
        targets = self.target_strings()
        t = len(targets)
        strings: list[str] = list(targets)
        lookup = {s: k for k, s in enumerate(strings)}

        def intern(s: str) -> int:
            k = lookup.get(s)
            if k is None:
                k = lookup[s] = len(strings)
                strings.append(s)
            return k

        index = np.empty((n, t + data.m), dtype=np.int64)
        numeric = np.zeros((n, t + data.m), dtype=np.float32)
        index[:, :t] = np.arange(t)
        for j, col in enumerate(data.features, start=t):
            if col.kind == NUMERICAL:
                art = self.numeric[col.name]
                labels = self.labels_for(col.name)
                ids = {key: intern(s) for key, s in labels.items()}
                index[:, j] = [ids[art.bin_index(x)] for x in col.values]
                numeric[:, j] = standardize(col.values, art)
            else:
                index[:, j] = [intern(verbalize_semantic(col.name, v)) for v in col.values]
        if self.target.task == CLASSIFICATION:
            labels = data.y.astype(np.int64)
        else:
            labels = np.asarray(standardize(data.y, self.target_artifact), dtype=np.float32)
        return VerbalizedTable(strings, index, numeric, labels, t, self.target.task, data.name)


def fit_verbalizer(train: Dataset, mode: str = FULL) -> Verbalizer:
    if mode not in MODES:
        raise ValueError(f"unknown verbalization mode {mode!r}")
    kinds = {c.name: c.kind for c in train.features}
    numeric = {c.name: fit_numeric(c.values) for c in train.features if c.kind == NUMERICAL}
    target_art = fit_numeric(train.y) if train.task == REGRESSION else None
    return Verbalizer(train.schema.target, kinds, numeric, target_art, mode)


def verbalize_example(row: Mapping, verbalizer: Verbalizer, label=None) -> ElementSequence:
    return verbalizer.verbalize_example(row, label)


def dump_jsonl(sequences: Iterable[ElementSequence], fh: IO[str]) -> int:
    count = 0
    for seq in sequences:
        fh.write(json.dumps(seq.to_json(), ensure_ascii=False) + "\n")
        count += 1
    return count
