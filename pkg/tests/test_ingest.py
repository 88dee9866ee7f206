import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabtarget import ingest
from tabtarget.ingest import (
    CLASSIFICATION,
    DATETIME,
    NUMERICAL,
    REGRESSION,
    SEMANTIC,
    SchemaError,
    SplitSpec,
    build_dataset,
    decompose_datetime,
    detect_schema,
    load_csv,
    split_indices,
    subsample,
)
from tabtarget.synthetic import PATIENTS_HEADER, PATIENTS_ROWS, write_csv


def _binary(n, pos_frac, seed=0, extra_cols=1):
    rng = np.random.default_rng(seed)
    n_pos = int(round(n * pos_frac))
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    rng.shuffle(labels)
    header = [f"x{j}" for j in range(extra_cols)] + ["y"]
    rows = [[f"{rng.normal():.4f}" for _ in range(extra_cols)] + ["pos" if t else "neg"] for t in labels]
    schema = detect_schema(header, rows)
    return build_dataset(header, rows, schema, "binary")


# schema detection


def test_patient_table_kinds():
    schema = detect_schema(PATIENTS_HEADER, PATIENTS_ROWS, target="Decision")
    assert schema.kind_of("Age") == NUMERICAL
    assert schema.kind_of("Department") == SEMANTIC
    assert schema.kind_of("Report") == SEMANTIC
    assert schema.target.task == CLASSIFICATION
    assert schema.target.classes == ("Hospitalized", "Released")
    assert schema.n == 4 and schema.m == 3


def test_mostly_unparseable_numbers_are_semantic():
    header = ["age", "y"]
    rows = [["35 years", "a"], ["unknown age", "b"], ["41", "a"], ["52", "b"]]
    assert detect_schema(header, rows).kind_of("age") == SEMANTIC


def test_threshold_boundary():
    # 9 of 10 parse: numerical; 8 of 10: semantic
    nine = [[str(i), "a" if i % 2 else "b"] for i in range(9)] + [["oops", "a"]]
    eight = [[str(i), "a" if i % 2 else "b"] for i in range(8)] + [["oops", "a"], ["bad", "b"]]
    assert detect_schema(["v", "y"], nine).kind_of("v") == NUMERICAL
    assert detect_schema(["v", "y"], eight).kind_of("v") == SEMANTIC


def test_missing_markers_ignored_by_threshold():
    rows = [["1", "a"], ["NA", "b"], ["n/a", "a"], ["NULL", "b"], ["nan", "a"], ["", "b"], ["2", "a"]]
    schema = detect_schema(["v", "y"], rows)
    assert schema.kind_of("v") == NUMERICAL
    ds = build_dataset(["v", "y"], rows, schema)
    assert np.isnan(ds.features[0].values).sum() == 5


def test_hints_override_heuristics():
    schema = detect_schema(PATIENTS_HEADER, PATIENTS_ROWS, {"Age": "semantic"}, "Decision")
    assert schema.kind_of("Age") == SEMANTIC


def test_target_hint_and_default():
    rows = [["1", "2"], ["3", "4"], ["5", "6"]]
    assert detect_schema(["a", "b"], rows).target.name == "b"
    assert detect_schema(["a", "b"], rows).target.task == REGRESSION
    s = detect_schema(["a", "b"], rows, {"a": "target"})
    assert s.target.name == "a" and [c.name for c in s.columns] == ["b"]


def test_integer_target_classification_needs_hint():
    rows = [[str(i), str(i % 3)] for i in range(12)]
    assert detect_schema(["x", "y"], rows).target.task == REGRESSION
    s = detect_schema(["x", "y"], rows, {"y": "target:classification"})
    assert s.target.task == CLASSIFICATION and s.target.n_classes == 3
    floats = [[str(i), str(i / 7)] for i in range(12)]
    with pytest.raises(SchemaError):
        detect_schema(["x", "y"], floats, {"y": "target:classification"})


@pytest.mark.parametrize(
    "header,rows",
    [
        (["a", "b"], []),
        (["a", "a"], [["1", "2"]]),
        (["a", "b"], [["1", "x"], ["2", "x"]]),  # one class only
        (["a", "b"], [["1"]]),
    ],
)
def test_schema_errors(header, rows):
    with pytest.raises(SchemaError):
        detect_schema(header, rows)


def test_unknown_annotation_rejected():
    with pytest.raises(SchemaError):
        detect_schema(PATIENTS_HEADER, PATIENTS_ROWS, {"Weight": "numerical"})


cells = st.one_of(st.integers(-1000, 1000).map(str), st.sampled_from(["NA", "", "red", "blue", "3.5", "x y"]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(cells, cells, st.sampled_from(["a", "b"])), min_size=2, max_size=20))
def test_detection_is_pure(rows):
    rows = [list(r) for r in rows]
    rows[0][2], rows[1][2] = "a", "b"
    s1 = detect_schema(["p", "q", "y"], rows)
    s2 = detect_schema(["p", "q", "y"], [list(r) for r in rows])
    assert s1 == s2
    assert all(c.kind in ingest.KINDS for c in s1.columns)
    assert "y" not in [c.name for c in s1.columns]


# datetimes


def test_datetime_detected_and_decomposed():
    rows = [["2021-03-15", "a"], ["2021-03-16", "b"], ["NA", "a"]]
    schema = detect_schema(["when", "y"], rows)
    assert schema.kind_of("when") == DATETIME
    cols = {c.name: c for c in decompose_datetime("when", [r[0] for r in rows])}
    assert cols["when weekday"].kind == SEMANTIC
    assert cols["when weekday"].values[0] == "Monday"
    assert cols["when epoch seconds"].kind == NUMERICAL
    assert cols["when epoch seconds"].values[0] == 1615766400
    assert cols["when year"].values[1] == 2021 and cols["when month"].values[1] == 3 and cols["when day"].values[1] == 16
    assert "when hour" not in cols
    assert np.isnan(cols["when epoch seconds"].values[2]) and cols["when weekday"].values[2] is None


def test_datetime_against_calendar():
    stamps = ["1999-12-31T23:30:00", "2024-02-29 06:15", "2000-01-01T00:00:00Z"]
    cols = {c.name: c for c in decompose_datetime("t", stamps)}
    for i, s in enumerate(stamps):
        ref = dt.datetime.fromisoformat(s.replace("Z", "+00:00").replace(" ", "T"))
        ref = ref if ref.tzinfo else ref.replace(tzinfo=dt.timezone.utc)
        assert cols["t epoch seconds"].values[i] == ref.timestamp()
        assert cols["t hour"].values[i] == ref.hour
        assert cols["t weekday"].values[i] == ref.strftime("%A")


def test_all_missing_datetime():
    cols = decompose_datetime("t", ["", "NA", None])
    for c in cols:
        if c.kind == NUMERICAL:
            assert np.isnan(c.values).all()
        else:
            assert all(v is None for v in c.values)


def test_ambiguous_day_month_is_semantic():
    rows = [["03/04/2021", "a"], ["05/06/2021", "b"]]
    assert detect_schema(["d", "y"], rows).kind_of("d") == SEMANTIC


# subsampling


def test_subsample_small_unchanged():
    ds = _binary(10, 0.5)
    out = subsample(ds)
    assert out.n == 10 and out.m == ds.m
    assert np.array_equal(out.y, ds.y)


def test_subsample_rows_stratified():
    ds = _binary(1000, 0.3)
    out = subsample(ds, max_rows=100, seed=3)
    assert out.n == 100
    assert abs(int(out.y.sum()) - 30) <= 1


def test_subsample_features_deterministic():
    header = [f"f{j}" for j in range(250)] + ["y"]
    rows = [[str(i * j % 17) for j in range(250)] + [str(i % 2 == 0)] for i in range(6)]
    ds = build_dataset(header, rows, detect_schema(header, rows))
    a, b = subsample(ds, max_features=200, seed=5), subsample(ds, max_features=200, seed=5)
    assert a.m == 200 and [c.name for c in a.features] == [c.name for c in b.features]
    assert a.schema.target.name == "y" and np.array_equal(a.y, ds.y)


def test_subsample_rejects_bad_caps():
    with pytest.raises(ValueError):
        subsample(_binary(10, 0.5), max_rows=0)


# splits


def test_finetuning_split_sizes():
    ds = _binary(100, 0.5)
    tr, va, te = split_indices(ds, SplitSpec.finetuning(0))
    assert (len(tr), len(va), len(te)) == (81, 9, 10)


def test_pretraining_split_val_cap():
    ds = _binary(40_000, 0.4)
    tr, va, te = split_indices(ds, SplitSpec.pretraining(0))
    assert len(va) == 1000 and len(te) == 0
    assert len(set(tr) & set(va)) == 0


def test_split_reproducible():
    ds = _binary(200, 0.25)
    a = split_indices(ds, SplitSpec.finetuning(7))
    b = split_indices(ds, SplitSpec.finetuning(7))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_split_missing_class_in_train():
    header, rows = ["x", "y"], [[str(i), "a"] for i in range(20)] + [["99", "b"]]
    ds = build_dataset(header, rows, detect_schema(header, rows))
    with pytest.raises(SchemaError):
        split_indices(ds, SplitSpec(0.5, 0.0, 0.5, seed=0, stratified=False))


def test_split_fractions_validated():
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.2, 0.2)


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(30, 300),
    pos=st.floats(0.1, 0.9),
    train=st.floats(0.3, 0.8),
    val=st.floats(0.05, 0.2),
    seed=st.integers(0, 10_000),
)
def test_split_properties(n, pos, train, val, seed):
    ds = _binary(n, pos, seed)
    spec = SplitSpec(train, val, 1 - train - val, seed=seed)
    parts = split_indices(ds, spec)
    union = np.concatenate(parts)
    assert len(union) == len(set(union.tolist())) == n
    for idx, frac in zip(parts, (spec.train_frac, spec.val_frac, spec.test_frac)):
        for k in (0, 1):
            ideal = (ds.y == k).sum() * frac
            assert abs((ds.y[idx] == k).sum() - ideal) <= 1


# CSV loading


def test_load_csv_quoting_and_sidecar(tmp_path):
    path = write_csv(tmp_path / "p.csv", PATIENTS_HEADER, PATIENTS_ROWS + [["70", "Cardiology, East", 'He said "fine"', "Released"]])
    path.with_suffix(".csv.schema").write_text("# hints\nReport = semantic\nDecision = target\n")
    ds = load_csv(path, ingest.read_sidecar(path.with_suffix(".csv.schema")))
    assert ds.n == 5 and ds.name == "p"
    assert ds.row(4)["Department"] == "Cardiology, East"
    assert ds.row(4)["Report"] == 'He said "fine"'


def test_rows_with_missing_target_dropped():
    rows = [["1", "a"], ["2", ""], ["3", "b"]]
    ds = build_dataset(["x", "y"], rows, detect_schema(["x", "y"], rows))
    assert ds.n == 2 and list(ds.source_rows) == [0, 2]


def test_empty_file(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(SchemaError):
        load_csv(p)
