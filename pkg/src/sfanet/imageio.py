"""Image and raw-map file I/O.

PNG/PPM/PGM traffic goes through Pillow; raw density maps use a small
little-endian sidecar format (magic ``SFDM``, u32 width, u32 height, u32
reserved, then row-major f32) so exported predictions are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

SIDECAR_MAGIC = b"SFDM"
SIDECAR_HEADER = struct.Struct("<4sIII")


def load_image(path) -> np.ndarray:
    """Read an image as (H, W, 3) float64 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, arr: np.ndarray) -> None:
    """Write a uint8 (H, W) or (H, W, 3) array; format follows the suffix."""
    path = Path(path)
    try:
        Image.fromarray(arr).save(path)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def load_mask(path) -> np.ndarray:
    """Region-of-interest mask: single channel, nonzero means inside."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr != 0).astype(np.float64)


def to_display_u8(values: np.ndarray) -> np.ndarray:
    """Scale a nonnegative map by its max for display; round half to even."""
    peak = float(values.max()) if values.size else 0.0
    if peak <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    scaled = np.clip(values / peak, 0.0, 1.0) * 255.0
    return np.rint(scaled).astype(np.uint8)


def probability_to_u8(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] probabilities to 0..255, round half to even."""
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def resize_bilinear(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of (H, W) or (H, W, C) float data."""
    if arr.ndim == 2:
        im = Image.fromarray(arr.astype(np.float32), mode="F")
        return np.asarray(im.resize((width, height), Image.BILINEAR), dtype=np.float64)
    channels = [
        np.asarray(
            Image.fromarray(arr[:, :, c].astype(np.float32), mode="F").resize(
                (width, height), Image.BILINEAR
            ),
            dtype=np.float64,
        )
        for c in range(arr.shape[2])
    ]
    return np.stack(channels, axis=2)


def write_density_sidecar(path, values: np.ndarray) -> None:
    """Raw f32 map with a 16-byte header; bit-exact round trip."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"sidecar expects a 2-d map, got shape {values.shape}")
    h, w = values.shape
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(SIDECAR_HEADER.pack(SIDECAR_MAGIC, w, h, 0))
            f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write sidecar {path}: {exc}") from exc


def read_density_sidecar(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < SIDECAR_HEADER.size:
        raise ValueError(f"{path}: truncated sidecar header")
    magic, w, h, _ = SIDECAR_HEADER.unpack_from(blob)
    if magic != SIDECAR_MAGIC:
        raise ValueError(f"{path}: not a density sidecar (bad magic)")
    data = np.frombuffer(blob, dtype="<f4", offset=SIDECAR_HEADER.size)
    if data.size != w * h:
        raise ValueError(f"{path}: payload size {data.size} does not match {w}x{h}")
    return data.reshape(h, w).copy()
