"""Rasterize head-point annotations into training targets.

Each annotated head becomes a truncated Gaussian stamp; stamps are
renormalized to unit mass after image-border clipping so the density map
integrates exactly to the head count. The binary attention target is the
density map smoothed by a small Gaussian and thresholded.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

DENSITY_KERNEL_MU = 15
DENSITY_KERNEL_RHO = 4.0
ATTENTION_KERNEL_MU = 3
ATTENTION_KERNEL_RHO = 2.0
ATTENTION_THRESHOLD = 1e-3

QNRF_TARGET_WIDTH = 1024
QNRF_TARGET_HEIGHT = 768


@dataclass(frozen=True)
class KernelSpec:
    """Square Gaussian window: odd size ``mu`` pixels, std ``rho`` pixels."""

    mu: int
    rho: float

    def __post_init__(self):
        if self.mu < 1 or self.mu % 2 == 0:
            raise ValueError(f"kernel size must be odd and >= 1, got {self.mu}")
        if self.rho <= 0:
            raise ValueError(f"kernel std must be positive, got {self.rho}")

    def window(self) -> np.ndarray:
        """The mu x mu window, normalized to unit sum."""
        c = self.mu // 2
        ax = np.arange(self.mu, dtype=np.float64) - c
        g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * self.rho ** 2))
        return g / g.sum()


@dataclass
class PointAnnotation:
    """Head centers for one image, in pixel coordinates."""

    image_id: str
    width: int
    height: int
    points: np.ndarray  # (C, 2) float64, columns x then y

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass
class DensityMap:
    width: int
    height: int
    values: np.ndarray  # (height, width) float64, people per pixel

    @property
    def count(self) -> float:
        return float(self.values.sum())


@dataclass
class AttentionTarget:
    width: int
    height: int
    values: np.ndarray  # (height, width) float64 in {0, 1}


def render_density(ann: PointAnnotation, kernel: KernelSpec | None = None) -> DensityMap:
    """Sum one unit-mass Gaussian stamp per head.

    Heads are centered on the nearest pixel (round half up, clamped into the
    image); stamps clipped by the border are renormalized so every head
    still contributes exactly 1.0.
    """
    kernel = kernel or KernelSpec(DENSITY_KERNEL_MU, DENSITY_KERNEL_RHO)
    h, w = ann.height, ann.width
    acc = np.zeros((h, w), dtype=np.float64)
    if ann.count == 0:
        return DensityMap(w, h, acc)
    window = kernel.window()
    c = kernel.mu // 2
    for x, y in ann.points:
        px = min(max(int(math.floor(x + 0.5)), 0), w - 1)
        py = min(max(int(math.floor(y + 0.5)), 0), h - 1)
        y0, y1 = py - c, py + c + 1
        x0, x1 = px - c, px + c + 1
        sy0, sx0 = max(0, -y0), max(0, -x0)
        sy1 = kernel.mu - max(0, y1 - h)
        sx1 = kernel.mu - max(0, x1 - w)
        stamp = window[sy0:sy1, sx0:sx1]
        acc[max(y0, 0):min(y1, h), max(x0, 0):min(x1, w)] += stamp / stamp.sum()
    return DensityMap(w, h, acc)


def adaptive_kernel(image_width: int) -> KernelSpec:
    """Width-dependent kernel for very large images, evaluated left to right
    with floor division binding as written: mu = 1 + (15*w/1024 // 2) * 2,
    which is odd by construction; rho = (mu + 4) / 4."""
    if image_width < 1:
        raise ValueError(f"image width must be >= 1, got {image_width}")
    mu = 1 + int(15.0 * image_width / 1024.0 // 2.0) * 2
    rho = (mu + 4) / 4.0
    return KernelSpec(mu, rho)


def _convolve_zero_pad(values: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Direct 2-d convolution with zero padding, same output size."""
    mu = window.shape[0]
    c = mu // 2
    if mu == 1:
        return values * window[0, 0]
    padded = np.pad(values, c)
    cols = np.lib.stride_tricks.sliding_window_view(padded, (mu, mu))
    # symmetric window, so correlation equals convolution
    return np.tensordot(cols, window, axes=([2, 3], [0, 1]))


def render_attention(density: DensityMap, smooth: KernelSpec | None = None,
                     th: float = ATTENTION_THRESHOLD) -> AttentionTarget:
    """Smooth the density with a unit-sum Gaussian (zero-padded borders) and
    binarize at ``th``: values >= th become 1."""
    if th <= 0:
        raise ValueError(f"threshold must be positive, got {th}")
    smooth = smooth or KernelSpec(ATTENTION_KERNEL_MU, ATTENTION_KERNEL_RHO)
    smoothed = _convolve_zero_pad(density.values, smooth.window())
    values = (smoothed >= th).astype(np.float64)
    return AttentionTarget(density.width, density.height, values)


def downscale_half_sum(target):
    """Halve both dimensions: density maps are 2x2 sum-pooled (count is
    conserved), attention targets 2x2 max-pooled (mask stays binary)."""
    h, w = target.values.shape
    if h % 2 or w % 2:
        raise ValueError(f"dimensions must be even to halve, got {w}x{h}")
    blocks = target.values.reshape(h // 2, 2, w // 2, 2)
    if isinstance(target, DensityMap):
        return DensityMap(w // 2, h // 2, blocks.sum(axis=(1, 3)))
    if isinstance(target, AttentionTarget):
        return AttentionTarget(w // 2, h // 2, blocks.max(axis=(1, 3)))
    raise TypeError(f"expected DensityMap or AttentionTarget, got {type(target).__name__}")


@dataclass
class ResizedSample:
    """Output of the large-image preprocessing: the resized image and
    annotation plus the count-preserving resized density map."""

    image: np.ndarray
    annotation: PointAnnotation
    kernel: KernelSpec
    density: DensityMap


def qnrf_preprocess(ann: PointAnnotation, image: np.ndarray) -> ResizedSample:
    """Fixed-size preprocessing for very large images.

    The adaptive kernel is computed from the ORIGINAL width and the density
    rendered at original size; image and density are then resized to
    1024x768 (bilinear), the density rescaled by a global factor so its sum
    is unchanged, and the points scaled for bookkeeping.
    """
    from .imageio import resize_bilinear

    kernel = adaptive_kernel(ann.width)
    density = render_density(ann, kernel)
    tw, th_ = QNRF_TARGET_WIDTH, QNRF_TARGET_HEIGHT
    if (ann.width, ann.height) == (tw, th_):
        return ResizedSample(image, ann, kernel, density)

    image2 = resize_bilinear(image, tw, th_)
    resized = resize_bilinear(density.values, tw, th_)
    before = density.values.sum()
    after = resized.sum()
    if after > 0:
        resized = resized * (before / after)
    fx, fy = tw / ann.width, th_ / ann.height
    pts = ann.points.copy()
    if len(pts):
        pts[:, 0] = np.clip(pts[:, 0] * fx, 0, np.nextafter(float(tw), 0))
        pts[:, 1] = np.clip(pts[:, 1] * fy, 0, np.nextafter(float(th_), 0))
    ann2 = PointAnnotation(ann.image_id, tw, th_, pts)
    return ResizedSample(image2, ann2, kernel, DensityMap(tw, th_, resized))


# ---------------------------------------------------------------------------
# annotation ingestion
# ---------------------------------------------------------------------------


def load_annotation(path) -> tuple[PointAnnotation, Path]:
    """Read one JSON annotation document; returns the annotation (points
    clamped into the image) and the resolved image path."""
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    for key in ("image", "width", "height", "points"):
        if key not in doc:
            raise ValueError(f"{path}: annotation missing {key!r}")
    w, h = int(doc["width"]), int(doc["height"])
    pts = np.asarray(doc["points"], dtype=np.float64).reshape(-1, 2)
    pts = pts[np.isfinite(pts).all(axis=1)]
    if len(pts):
        pts[:, 0] = np.clip(pts[:, 0], 0.0, np.nextafter(float(w), 0))
        pts[:, 1] = np.clip(pts[:, 1], 0.0, np.nextafter(float(h), 0))
    image_path = (path.parent / doc["image"]).resolve()
    ann = PointAnnotation(image_id=path.stem, width=w, height=h, points=pts)
    return ann, image_path


def load_manifest(path) -> list[tuple[PointAnnotation, Path]]:
    """A manifest is a JSON list of annotation-file paths (relative to the
    manifest)."""
    path = Path(path)
    with open(path) as f:
        entries = json.load(f)
    if not isinstance(entries, list):
        raise ValueError(f"{path}: manifest must be a JSON list of paths")
    return [load_annotation((path.parent / e).resolve()) for e in entries]
