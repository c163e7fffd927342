"""Versioned binary checkpoint container.

Layout, little-endian:
    magic   4 bytes "TSRC"
    version u16     1
    count   u32     number of records
    records: name_len u16, name utf-8, ndim u8, extents u32 * ndim,
             payload float32 * prod(extents)

All model tensors are float32, so the round trip is bitwise lossless.
Non-tensor state (the model config, epoch counter, batch-norm counters)
rides along as records too: the config is encoded as its JSON bytes stored
one byte per float32 value, which keeps the container format uniform and
exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataIOError, FormatError
from .model import Model, ModelConfig

MAGIC = b"TSRC"
VERSION = 1


def _write_record(fh, name: str, array: np.ndarray) -> None:
    # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
    arr = np.asarray(array, dtype="<f4", order="C")
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<H", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<B", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(arr.tobytes())


def _read_record(fh, path):
    raw = fh.read(2)
    if len(raw) < 2:
        raise DataIOError(f"{path}: truncated record header")
    (name_len,) = struct.unpack("<H", raw)
    name = fh.read(name_len).decode("utf-8")
    ndim_raw = fh.read(1)
    if len(ndim_raw) < 1:
        raise DataIOError(f"{path}: truncated record {name!r}")
    (ndim,) = struct.unpack("<B", ndim_raw)
    shape = []
    for _ in range(ndim):
        ext_raw = fh.read(4)
        if len(ext_raw) < 4:
            raise DataIOError(f"{path}: truncated record {name!r}")
        shape.append(struct.unpack("<I", ext_raw)[0])
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = fh.read(count * 4)
    if len(payload) < count * 4:
        raise DataIOError(f"{path}: truncated payload for record {name!r}")
    return name, np.frombuffer(payload, dtype="<f4").reshape(tuple(shape)).copy()


def _config_to_array(config: ModelConfig) -> np.ndarray:
    blob = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    return np.frombuffer(blob, dtype=np.uint8).astype(np.float32)


def _config_from_array(arr: np.ndarray) -> ModelConfig:
    blob = bytes(arr.astype(np.uint8).tobytes())
    return ModelConfig(**json.loads(blob.decode("utf-8")))


def save_checkpoint(model: Model, path) -> None:
    if model.dtype != np.float32:
        raise ConfigError("checkpoints store float32 states only")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records: list[tuple[str, np.ndarray]] = []
    records.append(("__config__", _config_to_array(model.config)))
    records.append(("__meta__", np.asarray(
        [model.epoch, model.seed & 0xFFFF, (model.seed >> 16) & 0xFFFF,
         (model.seed >> 32) & 0xFFFF, (model.seed >> 48) & 0xFFFF],
        dtype=np.float32)))
    for name, p in model.params.items():
        records.append((name, p.data))
    for name, arr in model.running_stats().items():
        records.append((name, arr))
    for name, counter in model.bn_counters().items():
        records.append((f"fusion.{name}.batches_seen", np.asarray([counter], np.float32)))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            _write_record(fh, name, arr)


def load_checkpoint(path) -> Model:
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataIOError(f"{path}: {exc}") from exc
    with fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", fh.read(4))
        records = dict(_read_record(fh, path) for _ in range(count))

    if "__config__" not in records or "__meta__" not in records:
        raise FormatError(f"{path}: missing config/meta records")
    config = _config_from_array(records.pop("__config__"))
    meta = records.pop("__meta__")
    epoch = int(meta[0])
    seed = (int(meta[1]) | (int(meta[2]) << 16) | (int(meta[3]) << 32)
            | (int(meta[4]) << 48))

    model = Model(config, seed)
    model.epoch = epoch
    for name, p in model.params.items():
        if name not in records:
            raise FormatError(f"{path}: missing parameter record {name!r}")
        stored = records.pop(name)
        if stored.shape != p.data.shape:
            raise FormatError(
                f"{path}: shape drift for {name!r}: stored {stored.shape}, "
                f"model expects {p.data.shape}"
            )
        p.data = stored
    if model.fusion is not None:
        for name, bn in model.fusion.bn.items():
            for suffix, target in (("running_mean", "running_mean"),
                                   ("running_var", "running_var")):
                key = f"fusion.{name}.{suffix}"
                if key not in records:
                    raise FormatError(f"{path}: missing record {key!r}")
                stored = records.pop(key)
                if stored.shape != getattr(bn, target).shape:
                    raise FormatError(f"{path}: shape drift for {key!r}")
                setattr(bn, target, stored)
            key = f"fusion.{name}.batches_seen"
            if key not in records:
                raise FormatError(f"{path}: missing record {key!r}")
            bn.batches_seen = int(records.pop(key)[0])
    if records:
        raise FormatError(f"{path}: unexpected records {sorted(records)[:3]}")
    return model
