"""Small synthetic tables: the patient toy example, separable sanity tasks, and task families.

A ``ConceptFamily`` holds a fixed pool of named features whose effect on a latent
score is the same in every dataset drawn from it; datasets differ in which concepts
they use, the units of numeric columns, the target name and the task type. This is
what lets pretraining on more family members help on held-out members.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import CLASSIFICATION, REGRESSION, Dataset, build_dataset, detect_schema

PATIENTS_HEADER = ["Age", "Department", "Report", "Decision"]
PATIENTS_ROWS = [
    ["45", "Cardiology", "Mild chest discomfort.", "Released"],
    ["62", "Neurology", "Complaints of headache and occasional dizziness.", "Hospitalized"],
    ["38", "Oncology", "Completed treatment cycle without adverse reactions.", "Released"],
    ["55", "Neurology", "Reports episodes of vertigo and memory lapses.", "Hospitalized"],
]


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def patients() -> Dataset:
    schema = detect_schema(PATIENTS_HEADER, PATIENTS_ROWS, {"Report": "semantic"}, "Decision")
    return build_dataset(PATIENTS_HEADER, PATIENTS_ROWS, schema, "patients")


def write_patients_csv(path: str | Path) -> Path:
    return write_csv(path, PATIENTS_HEADER, PATIENTS_ROWS)


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def table_to_dataset(header: list[str], rows: list[list[str]], task: str, name: str) -> Dataset:
    target = header[-1]
    hint = f"target:{task}"
    schema = detect_schema(header, rows, {target: hint}, target)
    return build_dataset(header, rows, schema, name)


def separable_classification(n: int = 64, seed: int = 0) -> tuple[Dataset, np.ndarray, np.ndarray]:
    """Two numeric features; label is the sign of a fixed linear function (margin enforced)."""
    rng = np.random.default_rng(seed)
    w = np.array([1.0, -0.7])
    xs = []
    while len(xs) < n:
        x = rng.normal(size=2) * [10.0, 4.0] + [50.0, 20.0]
        if abs((x - [50.0, 20.0]) @ w) > 1.0:
            xs.append(x)
    X = np.array(xs)
    y = ((X - [50.0, 20.0]) @ w > 0).astype(int)
    rows = [[_fmt(a), _fmt(b), "yes" if t else "no"] for (a, b), t in zip(X, y)]
    return table_to_dataset(["pressure", "dose", "response"], rows, CLASSIFICATION, "separable"), X, y


def smooth_regression(n: int = 64, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, size=(n, 2))
    y = 3 * X[:, 0] - 2 * X[:, 1] + 0.5 * X[:, 0] ** 2
    rows = [[_fmt(a), _fmt(b), _fmt(t)] for (a, b), t in zip(X, y)]
    return table_to_dataset(["speed", "load", "yield"], rows, REGRESSION, "smooth")


NUMERIC_CONCEPTS = (
    "age", "income", "weight", "height", "blood pressure", "heart rate", "temperature", "distance",
    "rainfall", "humidity", "price", "mileage", "voltage", "altitude", "salinity", "density",
)
CATEGORICAL_CONCEPTS = {
    "color": ("red", "green", "blue", "yellow"),
    "region": ("north", "south", "east", "west"),
    "material": ("wood", "steel", "glass", "plastic"),
    "season": ("spring", "summer", "autumn", "winter"),
    "shape": ("round", "square", "oval", "triangle"),
    "grade": ("basic", "standard", "premium", "deluxe"),
    "channel": ("online", "retail", "phone", "partner"),
    "climate": ("arid", "tropical", "polar", "temperate"),
}
TARGET_NAMES = ("outcome", "result", "status", "response", "score", "rating")
CLASS_NAMES = ("low", "high")


@dataclass(frozen=True)
class Concept:
    name: str
    weight: float = 0.0
    levels: tuple[str, ...] = ()
    level_effects: tuple[float, ...] = ()

    @property
    def numeric(self) -> bool:
        return not self.levels


@dataclass(frozen=True)
class TaskSpec:
    name: str
    concepts: tuple[int, ...]
    task: str
    n: int
    seed: int


class ConceptFamily:
    """Fixed concept effects shared by every dataset drawn from the family."""

    def __init__(self, seed: int = 0, noise: float = 0.3):
        rng = np.random.default_rng(seed)
        concepts = []
        for name in NUMERIC_CONCEPTS:
            concepts.append(Concept(name, float(rng.choice([-1, 1]) * rng.uniform(0.6, 1.4))))
        for name, levels in CATEGORICAL_CONCEPTS.items():
            eff = rng.normal(size=len(levels))
            eff = (eff - eff.mean()) / eff.std()
            concepts.append(Concept(name, 0.0, levels, tuple(float(e) for e in eff)))
        self.concepts = tuple(concepts)
        self.noise = noise

    def vocabulary(self) -> list[str]:
        words = [c.name for c in self.concepts] + [lv for c in self.concepts for lv in c.levels]
        return words + list(TARGET_NAMES) + list(CLASS_NAMES)

    def table(self, spec: TaskSpec) -> tuple[list[str], list[list[str]]]:
        rng = np.random.default_rng(spec.seed)
        cols = [self.concepts[i] for i in spec.concepts]
        n = spec.n
        score = np.zeros(n)
        columns = []
        for c in cols:
            if c.numeric:
                z = rng.normal(size=n)
                score += c.weight * z
                loc, scale = rng.uniform(-50, 150), rng.uniform(0.5, 30)
                columns.append([_fmt(loc + scale * v) for v in z])
            else:
                k = rng.integers(len(c.levels), size=n)
                score += np.asarray(c.level_effects)[k] * 0.8
                columns.append([c.levels[j] for j in k])
        score = score / np.sqrt(len(cols)) + self.noise * rng.normal(size=n)
        target = TARGET_NAMES[spec.seed % len(TARGET_NAMES)]
        if spec.task == CLASSIFICATION:
            ys = [CLASS_NAMES[int(s > np.median(score))] for s in score]
        else:
            a, b = rng.uniform(2, 20), rng.uniform(-100, 100)
            ys = [_fmt(a * s + b) for s in score]
        header = [c.name for c in cols] + [target]
        return header, [list(r) for r in zip(*columns, ys)]

    def sample(self, spec: TaskSpec) -> Dataset:
        return table_to_dataset(*self.table(spec), spec.task, spec.name)

    def write(self, spec: TaskSpec, directory: str | Path) -> Path:
        """CSV plus a one-line sidecar fixing the task type of the last column."""
        header, rows = self.table(spec)
        path = write_csv(Path(directory) / f"{spec.name}.csv", header, rows)
        path.with_suffix(".csv.schema").write_text(f"{header[-1]} = target:{spec.task}\n", encoding="utf-8")
        return path


def corpus_specs(n_datasets: int, per_dataset: int = 6, rows: int = 500, seed: int = 0, n_concepts: int = 24) -> list[TaskSpec]:
    """Pretraining members, each using a random subset of the concept pool.

    The first ``k`` specs of a larger corpus equal the ``k``-dataset corpus (nested corpora),
    so a larger corpus sees every concept a smaller one sees, and usually more.
    """
    specs = []
    for i in range(n_datasets):
        rng = np.random.default_rng([seed, 1, i])
        chosen = tuple(int(c) for c in rng.choice(n_concepts, size=per_dataset, replace=False))
        task = REGRESSION if i % 4 == 3 else CLASSIFICATION
        specs.append(TaskSpec(f"pre{i:02d}", chosen, task, rows, seed * 1000 + i))
    return specs


def heldout_specs(n_tasks: int = 4, per_dataset: int = 6, rows: int = 600, seed: int = 0, n_concepts: int = 24) -> list[TaskSpec]:
    rng = np.random.default_rng([seed, 2])
    specs = []
    for i in range(n_tasks):
        chosen = tuple(int(c) for c in rng.choice(n_concepts, size=per_dataset, replace=False))
        task = REGRESSION if i == n_tasks - 1 else CLASSIFICATION
        specs.append(TaskSpec(f"task{i}", chosen, task, rows, 10_000 + seed * 100 + i))
    return specs


FILLER_WORDS = (
    "patient", "visit", "noted", "today", "during", "routine", "check", "reported", "after", "with",
    "some", "mild", "general", "review", "later", "follow", "up", "morning", "evening", "brief",
)
POSITIVE_WORDS = ("fever", "infection", "fracture", "bleeding")
NEGATIVE_WORDS = ("stable", "recovered", "normal", "healed")


def text_task(n: int, seed: int, n_filler: int = 4, name: str = "notes") -> Dataset:
    """Label is carried by one cue word buried among filler words in a free-text note."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        y = int(rng.integers(2))
        cue = rng.choice(POSITIVE_WORDS if y else NEGATIVE_WORDS)
        words = list(rng.choice(FILLER_WORDS, size=n_filler))
        words.insert(int(rng.integers(n_filler + 1)), str(cue))
        dept = rng.choice(("ward a", "ward b", "ward c"))
        rows.append([" ".join(words), str(dept), "admitted" if y else "discharged"])
    return table_to_dataset(["note", "unit", "decision"], rows, CLASSIFICATION, name)


def text_vocabulary() -> list[str]:
    return [*FILLER_WORDS, *POSITIVE_WORDS, *NEGATIVE_WORDS, "ward a", "ward b", "ward c", "admitted", "discharged"]
