"""Synthetic blob dataset for overfit experiments and end-to-end tests.

Each image is a dark background with one bright Gaussian blob per "head",
so a correct pipeline can drive the counting error to zero by memorizing
the training set.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .imageio import save_image


def generate_synthetic_dataset(out_dir, n_images: int = 20, size: int = 128,
                               count_range: tuple[int, int] = (5, 25),
                               seed: int = 0, blob_sigma: float = 3.0) -> Path:
    """Write images, per-image JSON annotations and a manifest; returns the
    manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    margin = 8
    yy, xx = np.mgrid[0:size, 0:size]
    entries = []
    for i in range(n_images):
        count = int(rng.integers(count_range[0], count_range[1] + 1))
        pts = rng.uniform(margin, size - margin, size=(count, 2))
        img = np.full((size, size), 0.08, dtype=np.float64)
        img += rng.normal(0.0, 0.015, size=(size, size))
        for x, y in pts:
            amp = rng.uniform(0.55, 0.95)
            img += amp * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * blob_sigma ** 2))
        img = np.clip(img, 0.0, 1.0)
        rgb = np.repeat(img[:, :, None], 3, axis=2)
        name = f"blobs_{i:03d}"
        save_image(out_dir / f"{name}.png", (rgb * 255.0 + 0.5).astype(np.uint8))
        ann = {
            "image": f"{name}.png",
            "width": size,
            "height": size,
            "points": [[float(x), float(y)] for x, y in pts],
        }
        ann_name = f"{name}.json"
        with open(out_dir / ann_name, "w") as f:
            json.dump(ann, f)
        entries.append(ann_name)
    manifest = out_dir / "manifest.json"
    with open(manifest, "w") as f:
        json.dump(entries, f, indent=0)
    return manifest
