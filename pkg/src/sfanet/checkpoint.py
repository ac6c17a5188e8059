"""Binary checkpoint I/O.

Layout (little-endian): magic ``SFAC``, version u32, record count u32, then
per record a u32 name length, the UTF-8 name, rank u32, extents u64[rank]
and the payload as row-major f32. Parameters, batch-norm running stats and
(optionally) optimizer state all travel as records; optimizer records use
the reserved ``optim.`` name prefix.
"""

from __future__ import annotations

import struct
from typing import Any

import numpy as np

MAGIC = b"SFAC"
VERSION = 1
OPTIM_PREFIX = "optim."


class CheckpointError(ValueError):
    """Malformed or mismatched checkpoint file."""


def write_records(path, records: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(records)))
        for name, arr in records.items():
            arr = np.asarray(arr)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(np.asarray(arr.shape, dtype="<u8").tobytes())
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_records(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    records: dict[str, np.ndarray] = {}
    off = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            if len(blob[off:off + name_len]) != name_len:
                raise CheckpointError(f"{path}: truncated record name")
            off += name_len
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            extents = np.frombuffer(blob, dtype="<u8", count=rank, offset=off)
            off += 8 * rank
            n = int(np.prod(extents)) if rank else 1
            payload = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
            if payload.size != n:
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            off += 4 * n
            records[name] = payload.reshape(tuple(int(e) for e in extents)).copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from exc
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return records


def save_checkpoint(path, model, optimizer_state: dict[str, Any] | None = None) -> None:
    """Write model parameters and running stats, plus optimizer moments when given."""
    records = dict(model.state_records())
    if optimizer_state is not None:
        records[OPTIM_PREFIX + "step"] = np.asarray(float(optimizer_state["step"]))
        for name, arr in optimizer_state["m"].items():
            records[f"{OPTIM_PREFIX}m.{name}"] = arr
        for name, arr in optimizer_state["v"].items():
            records[f"{OPTIM_PREFIX}v.{name}"] = arr
    write_records(path, records)


def load_checkpoint(path, model, strict: bool = True) -> dict[str, Any] | None:
    """Restore model state from ``path``.

    Strict mode demands an exact name/shape match; non-strict installs the
    intersection only (backbone-only imports). Returns the optimizer state
    when the file carries one, else None.
    """
    records = read_records(path)
    model_records = {k: v for k, v in records.items() if not k.startswith(OPTIM_PREFIX)}
    model.load_state_records(model_records, strict=strict)

    step_key = OPTIM_PREFIX + "step"
    if step_key not in records:
        return None
    dtype = model.config.np_dtype
    state = {"step": int(round(float(records[step_key]))), "m": {}, "v": {}}
    for key, arr in records.items():
        if key.startswith(OPTIM_PREFIX + "m."):
            state["m"][key[len(OPTIM_PREFIX) + 2:]] = arr.astype(dtype)
        elif key.startswith(OPTIM_PREFIX + "v."):
            state["v"][key[len(OPTIM_PREFIX) + 2:]] = arr.astype(dtype)
    return state
