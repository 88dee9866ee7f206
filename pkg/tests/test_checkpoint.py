import numpy as np
import pytest
import torch

from tabtarget import checkpoint
from tabtarget.checkpoint import CheckpointError, from_bytes, load, save, to_bytes
from tabtarget.encode import FROZEN_TABLE, SemanticEncoderConfig, Tokenizer
from tabtarget.model import ModelConfig, build_model, desk_preset, predict_table
from tabtarget.synthetic import patients
from tabtarget.train import add_adapters
from tabtarget.verbalize import fit_verbalizer


@pytest.fixture(scope="module")
def setup():
    ds = patients()
    table = fit_verbalizer(ds).transform(ds)
    tok = Tokenizer.build(table.strings)
    model = build_model(desk_preset(len(tok)), tok, seed=3).eval()
    return table, model


def test_roundtrip_forward_bit_exact(setup, tmp_path):
    table, model = setup
    path = tmp_path / "m.ttck"
    save(model, path, {"note": "hello"})
    back, extra = load(path)
    assert extra == {"note": "hello"}
    assert back.cfg == model.cfg
    assert np.array_equal(predict_table(back, table), predict_table(model, table))


def test_save_load_save_byte_identical(setup, tmp_path):
    _, model = setup
    data = to_bytes(model)
    again = to_bytes(from_bytes(data)[0])
    assert data == again


def test_desk_checkpoint_small(setup):
    _, model = setup
    n = sum(p.numel() for p in model.state_dict().values())
    size = len(to_bytes(model))
    assert size < 10 * 1024 * 1024
    assert 4 * n <= size < 4 * n + 64 * 1024


@pytest.mark.parametrize(
    "mutate,message",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + (9).to_bytes(2, "little") + b[6:], "version"),
        (lambda b: b[: len(b) // 2], "truncated"),
        (lambda b: b + b"\0", "trailing"),
    ],
)
def test_corrupt_files_rejected(setup, mutate, message):
    _, model = setup
    with pytest.raises(CheckpointError, match=message):
        from_bytes(mutate(to_bytes(model)))


def test_unknown_tensor_rejected(setup):
    _, model = setup
    data = to_bytes(model)
    name = b"cls_head.net.0.weight"
    forged = data.replace(name, b"cls_head.net.0.wexght", 1)
    with pytest.raises(CheckpointError, match="unknown tensor"):
        from_bytes(forged)


def test_failed_load_writes_nothing(setup, tmp_path):
    _, model = setup
    bad = tmp_path / "bad.ttck"
    bad.write_bytes(b"TTCK")
    with pytest.raises(CheckpointError):
        load(bad)


def test_atomic_write_leaves_no_temp(tmp_path):
    checkpoint.atomic_write_text(tmp_path / "a.txt", "x")
    assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]


def test_adapter_checkpoint_roundtrip(setup):
    table, model = setup
    import copy

    adapted = copy.deepcopy(model)
    add_adapters(adapted, r=4, alpha=8.0, dropout=0.1, seed=0)
    with torch.no_grad():
        for n, p in adapted.named_parameters():
            if "lora_B" in n:
                p.normal_()
    adapted.eval()
    back, _ = from_bytes(to_bytes(adapted))
    assert np.array_equal(predict_table(back, table), predict_table(adapted, table))
    trainable = {n for n, p in back.named_parameters() if p.requires_grad}
    assert trainable and all("lora_" in n for n in trainable)


def test_frozen_table_variant_roundtrip():
    table = {"a": np.ones(8, np.float32), "b": np.zeros(8, np.float32)}
    cfg = ModelConfig(d=8, interaction_heads=2, semantic=SemanticEncoderConfig(FROZEN_TABLE, d=8, layers=0, unfrozen_layers=0))
    model = build_model(cfg, table=table)
    back, _ = from_bytes(to_bytes(model))
    assert torch.equal(back.semantic.encode(["b", "a"]), model.semantic.encode(["b", "a"]))
