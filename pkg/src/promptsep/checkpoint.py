"""Deterministic binary checkpoint archive.

Two runs with the same seed and config must produce byte-identical files, so
the format contains no timestamps, no compression, and no dict-order
dependence. Byte layout, all integers little-endian u64:

    magic   8 bytes           b"PSEPCKP1"
    u64     metadata length   followed by that many bytes of UTF-8 JSON
                              (sorted keys)
    u64     entry count
    per entry, sorted by name:
        u64 + bytes           name (UTF-8)
        u64 + bytes           numpy dtype string, e.g. "<f8"
        u64                   ndim
        ndim x u64            shape
        raw bytes             C-order little-endian array data

The model half stores every parameter and buffer under its stable archive
name; the optimizer half stores Adam moments as ``optim.<name>.exp_avg``,
``optim.<name>.exp_avg_sq`` and ``optim.<name>.step`` for each parameter the
optimizer tracks.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Optional

import numpy as np
import torch

from .model import FROZEN_PREFIX, ForgeryDetector, parameter_checksum

MAGIC = b"PSEPCKP1"
FORMAT_VERSION = 1

_OPT_PREFIX = "optim."
_OPT_SLOTS = ("exp_avg", "exp_avg_sq", "step")


class CheckpointError(RuntimeError):
    """Archive is malformed, truncated, or inconsistent with the model."""


def _to_le(arr: np.ndarray) -> np.ndarray:
    # ascontiguousarray promotes 0-dim arrays to shape (1,); scalars such as
    # the optimizer step counter must keep their shape
    if arr.ndim > 0:
        arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def save_archive(path: str, arrays: dict[str, np.ndarray], metadata: dict) -> None:
    """Write the archive atomically (temp file + rename)."""
    names = sorted(arrays)
    if len(names) != len(set(names)):
        raise CheckpointError("duplicate array names")
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(meta_bytes)), meta_bytes,
              struct.pack("<Q", len(names))]
    for name in names:
        arr = _to_le(np.asarray(arrays[name]))
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("ascii")
        chunks.append(struct.pack("<Q", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<Q", len(dtype_b)))
        chunks.append(dtype_b)
        chunks.append(struct.pack("<Q", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack("<Q", dim))
        chunks.append(arr.tobytes(order="C"))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_archive(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated archive: {path}")
        out = view[pos:pos + n]
        pos += n
        return out

    def take_u64() -> int:
        return struct.unpack("<Q", take(8))[0]

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError(f"bad magic, not a checkpoint archive: {path}")
    metadata = json.loads(bytes(take(take_u64())).decode("utf-8"))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(take_u64()):
        name = bytes(take(take_u64())).decode("utf-8")
        dtype = np.dtype(bytes(take(take_u64())).decode("ascii"))
        shape = tuple(take_u64() for _ in range(take_u64()))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = take(count * dtype.itemsize)
        arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes in archive: {path}")
    return arrays, metadata


def _optimizer_arrays(model: ForgeryDetector, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    by_param = {p: name for name, p in model.named_archive_parameters()}
    out: dict[str, np.ndarray] = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = by_param.get(p)
            if name is None:
                raise CheckpointError("optimizer tracks a parameter the model does not own")
            out[f"{_OPT_PREFIX}{name}.exp_avg"] = state["exp_avg"].detach().cpu().numpy()
            out[f"{_OPT_PREFIX}{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
            out[f"{_OPT_PREFIX}{name}.step"] = state["step"].detach().cpu().numpy()
    return out


def save_checkpoint(path: str, model: ForgeryDetector, metadata: dict,
                    optimizer: Optional[torch.optim.Optimizer] = None) -> None:
    """Serialize model (and optionally optimizer) state plus metadata.

    Caller-supplied metadata is augmented with the format version and the
    frozen-base checksum; the latter is re-verified on load.
    """
    arrays = {name: t.detach().cpu().numpy() for name, t in model.archive_state().items()}
    if optimizer is not None:
        arrays.update(_optimizer_arrays(model, optimizer))
    meta = dict(metadata)
    meta["format_version"] = FORMAT_VERSION
    meta["frozen_checksum"] = parameter_checksum(model, FROZEN_PREFIX)
    save_archive(path, arrays, meta)


def load_checkpoint(path: str, model: ForgeryDetector,
                    optimizer: Optional[torch.optim.Optimizer] = None) -> dict:
    """Restore model (and optionally optimizer) state; returns metadata.

    Raises if the archive's frozen-base checksum does not match the restored
    weights, i.e. the file was corrupted or belongs to a different backend.
    """
    arrays, metadata = load_archive(path)
    if metadata.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported format version {metadata.get('format_version')!r} in {path}"
        )
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith(_OPT_PREFIX)}
    expected = {name for name, _ in model.archive_state().items()}
    got = set(model_arrays)
    if expected != got:
        missing = sorted(expected - got)[:3]
        extra = sorted(got - expected)[:3]
        raise CheckpointError(
            f"archive does not match model: missing {missing}, unexpected {extra}"
        )
    model.load_archive_state({k: torch.from_numpy(v) for k, v in model_arrays.items()})
    check = parameter_checksum(model, FROZEN_PREFIX)
    if check != metadata.get("frozen_checksum"):
        raise CheckpointError("frozen-base checksum mismatch after restore")
    if optimizer is not None:
        _restore_optimizer(model, optimizer, arrays)
    return metadata


def _restore_optimizer(model: ForgeryDetector, optimizer: torch.optim.Optimizer,
                       arrays: dict[str, np.ndarray]) -> None:
    by_name = dict(model.named_archive_parameters())
    tracked = [name for name in arrays if name.startswith(_OPT_PREFIX) and name.endswith(".step")]
    for key in tracked:
        name = key[len(_OPT_PREFIX):-len(".step")]
        p = by_name.get(name)
        if p is None:
            raise CheckpointError(f"optimizer state for unknown parameter {name!r}")
        state = {}
        for slot in _OPT_SLOTS:
            arr = arrays.get(f"{_OPT_PREFIX}{name}.{slot}")
            if arr is None:
                raise CheckpointError(f"optimizer state for {name!r} is missing {slot!r}")
            state[slot] = torch.from_numpy(arr.copy())
        optimizer.state[p] = state
