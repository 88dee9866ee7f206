"""CSV loading, column-kind detection, datetime decomposition, sampling and splits."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

NUMERICAL = "numerical"
SEMANTIC = "semantic"
DATETIME = "datetime"
KINDS = (NUMERICAL, SEMANTIC, DATETIME)

CLASSIFICATION = "classification"
REGRESSION = "regression"

MISSING_MARKERS = frozenset({"", "na", "n/a", "null", "nan"})
NUMERIC_THRESHOLD = 0.9
MAX_INTEGER_CLASSES = 10

WEEKDAYS = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")


class SchemaError(ValueError):
    """Raised when a table cannot be given a valid schema."""


@dataclass(frozen=True)
class Column:
    name: str
    kind: str


@dataclass(frozen=True)
class TargetSpec:
    name: str
    task: str
    classes: tuple[str, ...] = ()

    @property
    def n_classes(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class TableSchema:
    columns: tuple[Column, ...]
    target: TargetSpec
    n: int

    @property
    def m(self) -> int:
        return len(self.columns)

    def kind_of(self, name: str) -> str:
        for col in self.columns:
            if col.name == name:
                return col.kind
        raise KeyError(name)


def is_missing(value) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value)) or (
        isinstance(value, str) and value.strip().lower() in MISSING_MARKERS
    )


_THOUSANDS = re.compile(r"[+-]?\d{1,3}(,\d{3})+(\.\d*)?")


def parse_number(value) -> float | None:
    if is_missing(value):
        return None
    if isinstance(value, (int, float, np.floating, np.integer)):
        x = float(value)
    else:
        s = str(value).strip()
        if _THOUSANDS.fullmatch(s):
            s = s.replace(",", "")
        try:
            x = float(s)
        except ValueError:
            return None
    return x if math.isfinite(x) else None


# Year-first and month-name formats only; dd/mm vs mm/dd orderings are rejected.
_DATE_PATTERNS: tuple[tuple[re.Pattern, tuple[str, ...], bool], ...] = (
    (re.compile(r"\d{4}-\d{2}-\d{2}"), ("%Y-%m-%d",), False),
    (re.compile(r"\d{4}/\d{2}/\d{2}"), ("%Y/%m/%d",), False),
    (re.compile(r"\d{4}[-/]\d{2}[-/]\d{2}[T ]\d{2}:\d{2}(:\d{2}(\.\d{1,6})?)?(Z|[+-]\d{2}:?\d{2})?"), (), True),
    (re.compile(r"\d{1,2} [A-Za-z]{3,9} \d{4}"), ("%d %b %Y", "%d %B %Y"), False),
    (re.compile(r"[A-Za-z]{3,9} \d{1,2}, \d{4}"), ("%b %d, %Y", "%B %d, %Y"), False),
)


def parse_datetime(value) -> tuple[datetime, bool] | None:
    """Parse one cell; returns (datetime, has_time) or None."""
    if is_missing(value):
        return None
    s = str(value).strip()
    for pattern, formats, has_time in _DATE_PATTERNS:
        if not pattern.fullmatch(s):
            continue
        if has_time:
            iso = s.replace("/", "-")
            if iso.endswith("Z"):
                iso = iso[:-1] + "+00:00"
            iso = re.sub(r"([+-]\d{2})(\d{2})$", r"\1:\2", iso)
            try:
                return datetime.fromisoformat(iso), True
            except ValueError:
                return None
        for fmt in formats:
            try:
                return datetime.strptime(s, fmt), False
            except ValueError:
                continue
        return None
    return None


def _looks_numeric(values: Sequence) -> bool:
    present = [v for v in values if not is_missing(v)]
    if not present:
        return False
    ok = sum(parse_number(v) is not None for v in present)
    return ok >= NUMERIC_THRESHOLD * len(present)


def _looks_datetime(values: Sequence) -> bool:
    present = [v for v in values if not is_missing(v)]
    if not present:
        return False
    ok = sum(parse_datetime(v) is not None for v in present)
    return ok >= NUMERIC_THRESHOLD * len(present)


def infer_kind(values: Sequence) -> str:
    if _looks_numeric(values):
        return NUMERICAL
    if _looks_datetime(values):
        return DATETIME
    return SEMANTIC


def canonical_label(value) -> str:
    s = " ".join(str(value).split())
    x = parse_number(s)
    if x is not None and float(x).is_integer():
        return str(int(x))
    return s


def _parse_hint(hint: str) -> tuple[str | None, str | None]:
    """Return (kind, target_task) for one annotation; target_task '' means target without task."""
    h = hint.strip().lower()
    if h in KINDS:
        return h, None
    if h == "target":
        return None, ""
    if h.startswith("target:"):
        task = h.split(":", 1)[1].strip()
        if task not in (CLASSIFICATION, REGRESSION):
            raise SchemaError(f"unknown target task {task!r}")
        return None, task
    raise SchemaError(f"unknown column annotation {hint!r}")


def detect_schema(
    header: Sequence[str],
    rows: Sequence[Sequence[str]],
    annotations: Mapping[str, str] | None = None,
    target: str | None = None,
) -> TableSchema:
    """Assign a kind to every feature column and a task to the target.

    Annotations map column name to a kind (``numerical``/``semantic``/``datetime``)
    or a target designation (``target``, ``target:classification``,
    ``target:regression``) and always override the heuristics. Without any
    designation the last column is the target.
    """
    header = [h.strip() for h in header]
    if not header:
        raise SchemaError("table has no header")
    if not rows:
        raise SchemaError("table has no data rows")
    seen = set()
    for h in header:
        if h in seen:
            raise SchemaError(f"duplicate column name {h!r}")
        seen.add(h)
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise SchemaError(f"row {i + 1} has {len(row)} cells, header has {len(header)}")
    annotations = dict(annotations or {})
    for name in annotations:
        if name not in seen:
            raise SchemaError(f"annotation for unknown column {name!r}")

    kinds: dict[str, str] = {}
    target_task: str | None = None
    for name, hint in annotations.items():
        kind, task = _parse_hint(hint)
        if task is not None:
            if target is not None and target != name:
                raise SchemaError(f"two targets designated: {target!r} and {name!r}")
            target, target_task = name, task
        else:
            kinds[name] = kind
    if target is None:
        target = header[-1]
    if target not in seen:
        raise SchemaError(f"target column {target!r} not in header")

    ti = header.index(target)
    target_values = [row[ti] for row in rows if not is_missing(row[ti])]
    if not target_values:
        raise SchemaError(f"target column {target!r} has no values")
    numeric_target = _looks_numeric(target_values)
    if target_task in (None, ""):
        target_task = REGRESSION if numeric_target else CLASSIFICATION
    elif target_task == CLASSIFICATION and numeric_target:
        xs = [parse_number(v) for v in target_values]
        distinct = {x for x in xs if x is not None}
        if len(distinct) > MAX_INTEGER_CLASSES or not all(float(x).is_integer() for x in distinct):
            raise SchemaError(
                f"numeric target {target!r} can only be classification with at most "
                f"{MAX_INTEGER_CLASSES} distinct integer values"
            )
    if target_task == CLASSIFICATION:
        classes = tuple(sorted({canonical_label(v) for v in target_values}))
        if len(classes) < 2:
            raise SchemaError(f"classification target {target!r} has fewer than 2 classes")
        spec = TargetSpec(target, CLASSIFICATION, classes)
    else:
        if not numeric_target:
            raise SchemaError(f"regression target {target!r} is not numeric")
        spec = TargetSpec(target, REGRESSION)

    columns = []
    for j, name in enumerate(header):
        if name == target:
            continue
        kind = kinds.get(name) or infer_kind([row[j] for row in rows])
        columns.append(Column(name, kind))
    return TableSchema(tuple(columns), spec, len(rows))


@dataclass
class FeatureColumn:
    name: str
    kind: str  # numerical or semantic after datetime decomposition
    values: np.ndarray  # float64 with NaN for numerical, object (str | None) for semantic

    def take(self, idx) -> "FeatureColumn":
        return FeatureColumn(self.name, self.kind, self.values[idx])


def numeric_column(name: str, raw: Sequence) -> FeatureColumn:
    vals = np.array([np.nan if (x := parse_number(v)) is None else x for v in raw], dtype=np.float64)
    return FeatureColumn(name, NUMERICAL, vals)


def semantic_column(name: str, raw: Sequence) -> FeatureColumn:
    vals = np.empty(len(raw), dtype=object)
    vals[:] = [None if is_missing(v) else str(v) for v in raw]
    return FeatureColumn(name, SEMANTIC, vals)


def decompose_datetime(name: str, raw: Sequence) -> list[FeatureColumn]:
    """Split a datetime column into calendar parts.

    Emits year, month, day, weekday (semantic), hour (only if any cell carries
    a time) and seconds since the Unix epoch. Naive timestamps are read as UTC;
    unparseable cells become missing in every derived column.
    """
    parsed = [parse_datetime(v) for v in raw]
    has_time = any(p is not None and p[1] for p in parsed)
    n = len(parsed)
    year, month, day, hour, epoch = (np.full(n, np.nan) for _ in range(5))
    weekday = np.empty(n, dtype=object)
    weekday[:] = None
    for i, p in enumerate(parsed):
        if p is None:
            continue
        dt = p[0]
        year[i], month[i], day[i], hour[i] = dt.year, dt.month, dt.day, dt.hour
        weekday[i] = WEEKDAYS[dt.weekday()]
        aware = dt if dt.tzinfo is not None else dt.replace(tzinfo=timezone.utc)
        epoch[i] = aware.timestamp()
    out = [
        FeatureColumn(f"{name} year", NUMERICAL, year),
        FeatureColumn(f"{name} month", NUMERICAL, month),
        FeatureColumn(f"{name} day", NUMERICAL, day),
        FeatureColumn(f"{name} weekday", SEMANTIC, weekday),
    ]
    if has_time:
        out.append(FeatureColumn(f"{name} hour", NUMERICAL, hour))
    out.append(FeatureColumn(f"{name} epoch seconds", NUMERICAL, epoch))
    return out


@dataclass
class Dataset:
    """A typed table: feature columns (numerical/semantic) plus an encoded target.

    Classification targets are class indices into ``schema.target.classes``;
    regression targets are floats.
    """

    schema: TableSchema
    features: list[FeatureColumn]
    y: np.ndarray
    name: str = "dataset"
    source_rows: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def m(self) -> int:
        return len(self.features)

    @property
    def task(self) -> str:
        return self.schema.target.task

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        src = self.source_rows[idx] if self.source_rows is not None else idx
        return Dataset(
            replace(self.schema, n=len(idx)),
            [c.take(idx) for c in self.features],
            self.y[idx],
            self.name,
            src,
        )

    def select_features(self, names: Sequence[str]) -> "Dataset":
        keep = set(names)
        feats = [c for c in self.features if c.name in keep]
        raw_keep = {c.name for c in self.schema.columns if c.name in keep} | {
            c.name for c in self.schema.columns if c.kind == DATETIME and any(f.name.startswith(c.name + " ") for f in feats)
        }
        schema = replace(self.schema, columns=tuple(c for c in self.schema.columns if c.name in raw_keep))
        return Dataset(schema, feats, self.y, self.name, self.source_rows)

    def row(self, i: int) -> dict:
        return {c.name: (None if c.kind == NUMERICAL and np.isnan(c.values[i]) else c.values[i]) for c in self.features}


def build_dataset(header: Sequence[str], rows: Sequence[Sequence[str]], schema: TableSchema, name: str = "dataset") -> Dataset:
    header = [h.strip() for h in header]
    ti = header.index(schema.target.name)
    regression = schema.target.task == REGRESSION
    # rows without a usable target are dropped
    keep = [
        i for i, row in enumerate(rows)
        if not is_missing(row[ti]) and (not regression or parse_number(row[ti]) is not None)
    ]
    rows = [rows[i] for i in keep]
    cols = {h: [row[j] for row in rows] for j, h in enumerate(header)}
    features: list[FeatureColumn] = []
    for col in schema.columns:
        raw = cols[col.name]
        if col.kind == NUMERICAL:
            features.append(numeric_column(col.name, raw))
        elif col.kind == SEMANTIC:
            features.append(semantic_column(col.name, raw))
        else:
            features.extend(decompose_datetime(col.name, raw))
    traw = cols[schema.target.name]
    if schema.target.task == CLASSIFICATION:
        lookup = {c: k for k, c in enumerate(schema.target.classes)}
        y = np.array([lookup[canonical_label(v)] for v in traw], dtype=np.int64)
    else:
        y = np.array([parse_number(v) for v in traw], dtype=np.float64)
    schema = replace(schema, n=len(rows))
    return Dataset(schema, features, y, name, np.asarray(keep, dtype=np.int64))


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    return header, rows


def read_sidecar(path: str | Path) -> dict[str, str]:
    """Parse ``column = kind`` lines; ``#`` starts a comment."""
    hints = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"{path}:{lineno}: expected 'column = kind'")
        key, value = (s.strip() for s in line.split("=", 1))
        _parse_hint(value)
        hints[key] = value
    return hints


def load_csv(
    path: str | Path,
    annotations: Mapping[str, str] | None = None,
    target: str | None = None,
    name: str | None = None,
) -> Dataset:
    header, rows = read_csv(path)
    schema = detect_schema(header, rows, annotations, target)
    return build_dataset(header, rows, schema, name or Path(path).stem)


def _apportion(weights: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder rounding of ``weights`` (summing to ``total``) to integers."""
    base = np.floor(weights).astype(np.int64)
    rest = int(total - base.sum())
    if rest > 0:
        order = np.lexsort((np.arange(len(weights)), -(weights - base)))
        base[order[:rest]] += 1
    return base


def _stratified_counts(class_counts: np.ndarray, fracs: Sequence[float]) -> np.ndarray:
    """Per-class, per-split counts with exact split totals and each cell within 1 of its ideal."""
    fracs = np.asarray(fracs, dtype=np.float64)
    n = int(class_counts.sum())
    totals = _apportion(fracs * n, n)
    ideal = class_counts[:, None] * fracs[None, :]
    cells = np.floor(ideal + 1e-9).astype(np.int64)
    demand = totals - cells.sum(axis=0)
    residual = class_counts - cells.sum(axis=1)
    frac_part = ideal - cells
    # Gale-Ryser style greedy: biggest residual rows first, to the splits needing most.
    for c in np.argsort(-residual, kind="stable"):
        for _ in range(int(residual[c])):
            open_splits = [s for s in range(len(fracs)) if demand[s] > 0 and cells[c, s] <= ideal[c, s]]
            if not open_splits:
                open_splits = [s for s in range(len(fracs)) if demand[s] > 0]
            s = max(open_splits, key=lambda s: (demand[s], frac_part[c, s]))
            cells[c, s] += 1
            demand[s] -= 1
    return cells


def stratified_sample(y: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    classes, inverse = np.unique(y, return_inverse=True)
    counts = np.bincount(inverse, minlength=len(classes))
    frac = size / len(y)
    take = _stratified_counts(counts, [frac, 1 - frac])[:, 0]
    out = []
    for k in range(len(classes)):
        members = np.flatnonzero(inverse == k)
        out.append(rng.permutation(members)[: take[k]])
    return np.sort(np.concatenate(out))


def subsample(dataset: Dataset, max_rows: int = 300_000, max_features: int = 200, seed: int = 0) -> Dataset:
    """Cap rows (stratified for classification) and features (uniform, order kept)."""
    if max_rows < 1 or max_features < 1:
        raise ValueError("caps must be at least 1")
    rng = np.random.default_rng(seed)
    out = dataset
    if dataset.n > max_rows:
        if dataset.task == CLASSIFICATION:
            idx = stratified_sample(dataset.y, max_rows, rng)
        else:
            idx = np.sort(rng.choice(dataset.n, size=max_rows, replace=False))
        out = out.take(idx)
    if out.m > max_features:
        chosen = set(rng.choice(out.m, size=max_features, replace=False).tolist())
        out = out.select_features([c.name for j, c in enumerate(out.features) if j in chosen])
    return out


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float
    val_frac: float
    test_frac: float
    seed: int = 0
    stratified: bool = True
    val_cap: int | None = None

    def __post_init__(self):
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions sum to {total}, expected 1")
        if min(self.train_frac, self.val_frac, self.test_frac) < 0:
            raise ValueError("split fractions must be non-negative")

    @classmethod
    def pretraining(cls, seed: int = 0) -> "SplitSpec":
        return cls(0.95, 0.05, 0.0, seed, True, 1000)

    @classmethod
    def finetuning(cls, seed: int = 0) -> "SplitSpec":
        # 90/10 train/test, then 10% of the training part held out for validation
        return cls(0.81, 0.09, 0.10, seed, True, None)


def split_indices(dataset: Dataset, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    fracs = (spec.train_frac, spec.val_frac, spec.test_frac)
    parts: list[list[np.ndarray]] = [[], [], []]
    if spec.stratified and dataset.task == CLASSIFICATION:
        classes, inverse = np.unique(dataset.y, return_inverse=True)
        counts = np.bincount(inverse, minlength=len(classes))
        cells = _stratified_counts(counts, fracs)
        for k in range(len(classes)):
            members = rng.permutation(np.flatnonzero(inverse == k))
            bounds = np.cumsum(cells[k])
            for s in range(3):
                parts[s].append(members[(bounds[s - 1] if s else 0) : bounds[s]])
    else:
        perm = rng.permutation(dataset.n)
        bounds = np.cumsum(_apportion(np.asarray(fracs) * dataset.n, dataset.n))
        for s in range(3):
            parts[s].append(perm[(bounds[s - 1] if s else 0) : bounds[s]])
    train, val, test = (np.sort(np.concatenate(p)).astype(np.int64) for p in parts)
    if spec.val_cap is not None and len(val) > spec.val_cap:
        vsub = dataset.take(val)
        if spec.stratified and dataset.task == CLASSIFICATION:
            keep = stratified_sample(vsub.y, spec.val_cap, rng)
        else:
            keep = np.sort(rng.choice(len(val), size=spec.val_cap, replace=False))
        val = val[keep]
    for label, idx, frac in (("train", train, spec.train_frac), ("validation", val, spec.val_frac), ("test", test, spec.test_frac)):
        if frac > 0 and len(idx) == 0:
            raise SchemaError(f"{label} split is empty for {dataset.name!r} ({dataset.n} rows)")
    if dataset.task == CLASSIFICATION:
        missing = set(np.unique(dataset.y).tolist()) - set(np.unique(dataset.y[train]).tolist())
        if missing:
            names = [dataset.schema.target.classes[k] for k in sorted(missing)]
            raise SchemaError(f"classes {names} absent from the training split of {dataset.name!r}")
    return train, val, test


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    train, val, test = split_indices(dataset, spec)
    return dataset.take(train), dataset.take(val), dataset.take(test)
