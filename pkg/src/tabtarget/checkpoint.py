"""Binary checkpoint format.

Layout (little-endian)::

    magic      4 bytes  b"TTCK"
    version    u16
    config     u32 length + UTF-8 ``key=value`` lines, keys sorted
    strings    u32 length + UTF-8 JSON list (tokenizer vocabulary or frozen-table keys)
    count      u32 number of tensors
    tensor*    u16 name length, name, u8 ndim, u32 dims..., float32 row-major payload

Nothing may follow the last tensor.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .encode import FROZEN_TABLE, Tokenizer
from .model import ModelConfig, TabularModel
from .nn.lora import mark_only_lora_trainable, wrap_modules

MAGIC = b"TTCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _lora_meta(model: TabularModel) -> dict[str, str]:
    from .nn.lora import LoraLinear

    wrapped = [(n, m) for n, m in model.named_modules() if isinstance(m, LoraLinear)]
    if not wrapped:
        return {}
    first = wrapped[0][1]
    return {
        "lora.r": str(first.r),
        "lora.alpha": repr(float(first.alpha)),
        "lora.dropout": repr(float(first.lora_dropout.p)),
        "lora.targets": ",".join(n for n, _ in wrapped),
    }


def to_bytes(model: TabularModel, extra: dict[str, str] | None = None) -> bytes:
    meta = model.cfg.to_dict()
    meta.update(_lora_meta(model))
    for key, value in (extra or {}).items():
        meta[f"extra.{key}"] = value
    for key, value in meta.items():
        if "\n" in key or "\n" in value or "=" in key:
            raise CheckpointError(f"config entry {key!r} cannot be serialized")
    blob = "".join(f"{k}={meta[k]}\n" for k in sorted(meta)).encode("utf-8")
    if model.cfg.semantic.variant == FROZEN_TABLE:
        strings = model.semantic.keys
    else:
        strings = model.tokenizer.tokens
    sblob = json.dumps(strings, ensure_ascii=False).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(blob)), blob, struct.pack("<I", len(sblob)), sblob]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
        parts += [struct.pack("<I", dim) for dim in arr.shape]
        parts.append(arr.tobytes())
    return b"".join(parts)


def save(model: TabularModel, path: str | Path, extra: dict[str, str] | None = None) -> None:
    atomic_write_bytes(path, to_bytes(model, extra))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def from_bytes(data: bytes) -> tuple[TabularModel, dict[str, str]]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        blob = r.take(r.unpack("<I")).decode("utf-8")
        strings = json.loads(r.take(r.unpack("<I")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    meta = dict(line.split("=", 1) for line in blob.splitlines() if line)
    try:
        cfg = ModelConfig.from_dict({k: v for k, v in meta.items() if not k.startswith(("lora.", "extra."))})
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid model config: {exc}") from None

    count = r.unpack("<I")
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        name = r.take(r.unpack("<H")).decode("utf-8")
        ndim = r.unpack("<B")
        shape = tuple(r.unpack("<I") for _ in range(ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = torch.from_numpy(arr.copy())
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after the last tensor")

    if cfg.semantic.variant == FROZEN_TABLE:
        table_t = tensors.get("semantic.table")
        if table_t is None or table_t.shape[0] != len(strings):
            raise CheckpointError("frozen table does not match its key list")
        table = {k: table_t[i].numpy() for i, k in enumerate(strings)}
        model = TabularModel(cfg, table=table)
    else:
        model = TabularModel(cfg, Tokenizer(strings, cfg.semantic.max_positions))
    if "lora.targets" in meta:
        targets = set(meta["lora.targets"].split(","))
        wrap_modules(model, lambda n, _m: n in targets, int(meta["lora.r"]), float(meta["lora.alpha"]), float(meta["lora.dropout"]))
    expected = model.state_dict()
    unknown = sorted(set(tensors) - set(expected))
    absent = sorted(set(expected) - set(tensors))
    if unknown:
        raise CheckpointError(f"unknown tensor name {unknown[0]!r}")
    if absent:
        raise CheckpointError(f"checkpoint lacks tensor {absent[0]!r}")
    for name, t in tensors.items():
        if tuple(expected[name].shape) != tuple(t.shape):
            raise CheckpointError(f"tensor {name!r} has shape {tuple(t.shape)}, expected {tuple(expected[name].shape)}")
    model.load_state_dict(tensors)
    if "lora.targets" in meta:
        mark_only_lora_trainable(model)
    extra = {k[len("extra.") :]: v for k, v in meta.items() if k.startswith("extra.")}
    return model, extra


def load(path: str | Path) -> tuple[TabularModel, dict[str, str]]:
    return from_bytes(Path(path).read_bytes())
