import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tabtarget.encode import Tokenizer
from tabtarget.model import (
    ContractError,
    ModelConfig,
    batch_from_sequences,
    build_model,
    desk_preset,
    make_batch,
    paper_preset,
    predict_classification,
    predict_regression,
    predict_table,
)
from tabtarget.nn import grad_check
from tabtarget.synthetic import patients, smooth_regression
from tabtarget.verbalize import Element, ElementSequence, fit_verbalizer


def _setup(ds=None, seed=0):
    ds = ds or patients()
    v = fit_verbalizer(ds)
    table = v.transform(ds)
    tok = Tokenizer.build(table.strings)
    model = build_model(desk_preset(len(tok)), tok, seed=seed).eval()
    return ds, v, table, model


def test_paper_preset_counts():
    model = build_model(paper_preset(), Tokenizer(["a"]))
    counts = model.component_counts()
    assert counts == {
        "semantic": 33_360_000,
        "numerical": 296_832,
        "fusion": 1_774_464,
        "interaction": 10_646_784,
        "prediction": 1_185_794,
    }
    assert sum(counts.values()) == 47_263_874
    assert sum(p.numel() for p in model.reg_head.parameters()) == 592_897


def test_presets():
    p, d = paper_preset(), desk_preset()
    assert (p.d, p.interaction_layers, p.interaction_heads, p.fusion_heads) == (384, 6, 6, 2)
    assert (d.d, d.interaction_layers, d.interaction_heads, d.fusion_heads) == (64, 3, 4, 2)
    assert p.semantic.unfrozen_layers == p.semantic.layers // 2
    with pytest.raises(ValueError):
        ModelConfig(d=32)


def test_config_dict_roundtrip():
    cfg = desk_preset(333, unfrozen_layers=2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_patient_forward_softmax():
    _, _, table, model = _setup()
    probs = predict_table(model, table)
    assert probs.shape == (4, 2)
    assert np.allclose(probs.sum(1), 1.0, atol=1e-6)


def test_fusion_symmetry_and_width():
    _, _, _, model = _setup()
    a, b = torch.randn(3, 64), torch.randn(3, 64)
    assert torch.allclose(model.fuse(a, b), model.fuse(b, a), atol=1e-6)
    assert torch.equal(model.fuse(a, b), model.fuse(a, b))
    with pytest.raises(ContractError):
        model.fuse(a, torch.randn(3, 32))


def test_interaction_equivariance_and_shapes():
    _, _, _, model = _setup()
    x = torch.randn(2, 6, 64)
    perm = torch.tensor([0, 1, 4, 2, 5, 3])
    out = model.interact(x)
    outp = model.interact(x[:, perm])
    assert torch.allclose(out[:, perm], outp, atol=1e-6)
    assert model.interact(torch.randn(1, 3, 64)).shape == (1, 3, 64)
    with pytest.raises(ContractError):
        model.interact(torch.randn(1, 1, 64))


def _row_seqs(v, ds, i, order):
    seq = v.verbalize_example(ds.row(i), int(ds.y[i]))
    t = seq.n_targets
    feats = seq.elements[t:]
    return ElementSequence(seq.elements[:t] + [feats[k] for k in order], seq.true_label, "p", seq.task)


@settings(max_examples=20, deadline=None)
@given(st.permutations([0, 1, 2]), st.integers(0, 3))
def test_column_order_invariance(order, i):
    ds, v, _, model = _setup()
    with torch.no_grad():
        base = model.predict_sequences([_row_seqs(v, ds, i, [0, 1, 2])])
        perm = model.predict_sequences([_row_seqs(v, ds, i, list(order))])
    assert torch.allclose(base, perm, atol=1e-6)


def test_target_token_equivariance():
    ds, v, _, model = _setup()
    seq = v.verbalize_example(ds.row(1), int(ds.y[1]))
    swapped = ElementSequence([seq.elements[1], seq.elements[0]] + seq.elements[2:], 0, "p", seq.task)
    with torch.no_grad():
        a = model.predict_sequences([seq])[0]
        b = model.predict_sequences([swapped])[0]
    assert torch.allclose(a.flip(0), b, atol=1e-6)


def test_identical_target_embeddings_uniform():
    _, _, _, model = _setup()
    for c in (2, 5, 10, 30):
        emb = torch.randn(1, 64).expand(c, 64)
        p = predict_classification(emb, model.cls_head)
        assert torch.allclose(p, torch.full((c,), 1 / c), atol=1e-6)
        with torch.no_grad():
            q = predict_classification(torch.randn(c, 64), model.cls_head)
        assert abs(q.sum().item() - 1) < 1e-6


def test_relabeling_keeps_argmax():
    # class identity only enters through its token; the same embeddings under new names give the same ranking
    _, _, _, model = _setup()
    emb = torch.randn(4, 64)
    a = predict_classification(emb, model.cls_head)
    b = predict_classification(emb[[2, 0, 3, 1]], model.cls_head)
    assert int(a.argmax()) == [2, 0, 3, 1][int(b.argmax())]


def test_regression_forward():
    ds = smooth_regression(20)
    _, _, table, model = _setup(ds)
    out = predict_table(model, table)
    assert out.shape == (20,) and np.all(np.isfinite(out))
    assert predict_regression(torch.randn(5, 64), model.reg_head).shape == (5,)


def test_heads_shared_across_datasets():
    _, _, t1, model = _setup(smooth_regression(10, seed=1))
    names_before = {n for n, _ in model.named_parameters()}
    t2 = fit_verbalizer(smooth_regression(10, seed=2)).transform(smooth_regression(10, seed=2))
    predict_table(model, t1)
    assert {n for n, _ in model.named_parameters()} == names_before
    assert "reg_head.net.0.weight" in names_before and "cls_head.net.0.weight" in names_before
    assert t2.n_targets == t1.n_targets == 1


def test_row_independence():
    _, _, table, model = _setup()
    full = predict_table(model, table)
    dup = model.predict(make_batch(table, [2, 0, 2, 1, 3, 2])).detach().numpy()
    assert np.allclose(dup[0], dup[2]) and np.allclose(dup[0], dup[5])
    assert np.allclose(dup[[1, 3, 4]], full[[0, 1, 3]], atol=1e-6)
    alone = model.predict(make_batch(table, [3])).detach().numpy()
    assert np.allclose(alone[0], full[3], atol=1e-6)


def test_mixed_batch_rejected():
    ds, v, _, _ = _setup()
    a = v.verbalize_example(ds.row(0), 0, dataset="a")
    b = v.verbalize_example(ds.row(1), 1, dataset="b")
    with pytest.raises(ContractError):
        batch_from_sequences([a, b])
    with pytest.raises(ContractError):
        batch_from_sequences([])


def test_classification_needs_two_tokens():
    ds, v, _, model = _setup()
    seq = v.verbalize_example(ds.row(0), 0)
    one = ElementSequence(seq.elements[1:], 0, "p", seq.task)
    one.elements[0] = Element(one.elements[0].semantic, 0.0, "target_token")
    with pytest.raises(ContractError):
        model(batch_from_sequences([one]))


def test_zero_numeric_features():
    ds, v, table, model = _setup()
    cols = [c for c in v.feature_kinds if v.feature_kinds[c] != "numerical"]
    assert all(table.numeric[:, table.n_targets + list(v.feature_kinds).index(c)].max() == 0 for c in cols)


def test_full_model_grad_check_double():
    _, _, table, model = _setup()
    model = model.double().eval()
    model.use_cache = False
    model.set_unfrozen_layers(2)
    batch = make_batch(table)
    batch.numeric = batch.numeric.double()
    labels = batch.labels
    params = [p for p in model.parameters() if p.requires_grad]

    def loss():
        return torch.nn.functional.cross_entropy(model(batch), labels)

    err = grad_check(loss, params, eps=1e-6, samples_per_tensor=3, atol=1e-6)
    assert err <= 1e-4
