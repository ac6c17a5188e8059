"""Dataset loading, deterministic augmentation and batching.

Targets are rendered from the transformed head points AFTER all geometric
augmentation, never cropped from a pre-rendered map, so the density target
always integrates to the number of surviving points. Both targets are then
pooled down to half the patch resolution to match the network output.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .groundtruth import (
    ATTENTION_THRESHOLD,
    AttentionTarget,
    DensityMap,
    KernelSpec,
    PointAnnotation,
    adaptive_kernel,
    downscale_half_sum,
    load_manifest,
    render_attention,
    render_density,
)
from .imageio import load_image, load_mask, resize_bilinear

log = logging.getLogger(__name__)

NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)

GRAY_WEIGHTS = (0.299, 0.587, 0.114)

UCSD_WIDTH = 960
UCSD_HEIGHT = 640


@dataclass(frozen=True)
class AugmentConfig:
    crop: tuple[int, int] = (400, 400)
    short_side_min: int = 512
    scale_range: tuple[float, float] = (0.8, 1.2)
    flip_p: float = 0.5
    gamma_range: tuple[float, float] = (0.5, 1.5)
    gamma_p: float = 0.3
    gray_p: float = 0.1
    seed: int = 0

    def __post_init__(self):
        cw, ch = self.crop
        if cw % 2 or ch % 2 or cw < 2 or ch < 2:
            raise ValueError(f"crop must be even-sized, got {self.crop}")
        for name in ("flip_p", "gamma_p", "gray_p"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise ValueError(f"bad scale_range {self.scale_range}")


@dataclass
class TransformLog:
    """Which stochastic transforms fired; handy for tests and debugging."""

    scale: float = 1.0
    crop_origin: tuple[int, int] = (0, 0)
    flipped: bool = False
    gamma: float | None = None
    grayed: bool = False
    padded: bool = False


@dataclass
class Sample:
    """One augmented training example with half-resolution targets."""

    image: Tensor          # [3, H, W], mean/std normalized
    points: np.ndarray     # surviving head coordinates in crop space
    density_target: Tensor     # [1, H/2, W/2]
    attention_target: Tensor   # [1, H/2, W/2], values in {0, 1}
    roi: np.ndarray | None = None
    transforms: TransformLog = field(default_factory=TransformLog)


def normalize_image(image: np.ndarray, mean=NORM_MEAN, std=NORM_STD) -> np.ndarray:
    """(H, W, 3) in [0, 1] -> normalized (3, H, W) float64."""
    chw = image.transpose(2, 0, 1).astype(np.float64)
    m = np.asarray(mean, dtype=np.float64)[:, None, None]
    s = np.asarray(std, dtype=np.float64)[:, None, None]
    return (chw - m) / s


def scale_image_points(image: np.ndarray, points: np.ndarray,
                       new_w: int, new_h: int) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear image resize with matching point rescale."""
    h, w = image.shape[:2]
    if (w, h) == (new_w, new_h):
        return image, points
    out = resize_bilinear(image, new_w, new_h)
    pts = points.copy()
    if len(pts):
        pts[:, 0] *= new_w / w
        pts[:, 1] *= new_h / h
    return out, pts


def flip_points(points: np.ndarray, width: int) -> np.ndarray:
    """Horizontal mirror: x -> width - 1 - x. Applying twice is the identity."""
    pts = points.copy()
    if len(pts):
        pts[:, 0] = (width - 1) - pts[:, 0]
    return pts


def render_targets(points: np.ndarray, width: int, height: int,
                   density_kernel: KernelSpec | None = None,
                   attention_kernel: KernelSpec | None = None,
                   attention_threshold: float = ATTENTION_THRESHOLD,
                   ) -> tuple[DensityMap, AttentionTarget]:
    ann = PointAnnotation("", width, height, points)
    density = render_density(ann, density_kernel)
    attention = render_attention(density, attention_kernel, attention_threshold)
    return downscale_half_sum(density), downscale_half_sum(attention)


def augment(image: np.ndarray, points: np.ndarray, cfg: AugmentConfig,
            rng: np.random.Generator,
            density_kernel: KernelSpec | None = None,
            attention_kernel: KernelSpec | None = None,
            attention_threshold: float = ATTENTION_THRESHOLD,
            mean=NORM_MEAN, std=NORM_STD) -> Sample:
    """Apply the augmentation chain and render half-resolution targets.

    Order: short-side upscale, random scale, random crop (points outside are
    dropped), horizontal flip, gamma transform, grayscale; targets are then
    rendered from the surviving points.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    tlog = TransformLog()
    cw, ch = cfg.crop

    h, w = image.shape[:2]
    short = min(h, w)
    if short < cfg.short_side_min:
        f = cfg.short_side_min / short
        image, points = scale_image_points(
            image, points, round(w * f), round(h * f))

    s = float(rng.uniform(*cfg.scale_range))
    tlog.scale = s
    if s != 1.0:
        h, w = image.shape[:2]
        image, points = scale_image_points(image, points, round(w * s), round(h * s))

    h, w = image.shape[:2]
    if h < ch or w < cw:
        pad_h, pad_w = max(0, ch - h), max(0, cw - w)
        image = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
        tlog.padded = True
        log.info("padded %dx%d image to crop size %dx%d", w, h, cw, ch)
        h, w = image.shape[:2]
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    tlog.crop_origin = (left, top)
    image = image[top:top + ch, left:left + cw]
    if len(points):
        points = points - np.array([left, top], dtype=np.float64)
        keep = ((points[:, 0] >= 0) & (points[:, 0] < cw)
                & (points[:, 1] >= 0) & (points[:, 1] < ch))
        points = points[keep]

    if rng.random() < cfg.flip_p:
        tlog.flipped = True
        image = image[:, ::-1]
        points = flip_points(points, cw)

    if rng.random() < cfg.gamma_p:
        gamma = float(rng.uniform(*cfg.gamma_range))
        tlog.gamma = gamma
        image = np.clip(image, 0.0, 1.0) ** gamma

    if rng.random() < cfg.gray_p:
        tlog.grayed = True
        lum = (GRAY_WEIGHTS[0] * image[:, :, 0] + GRAY_WEIGHTS[1] * image[:, :, 1]
               + GRAY_WEIGHTS[2] * image[:, :, 2])
        image = np.repeat(lum[:, :, None], 3, axis=2)

    density, attention = render_targets(points, cw, ch, density_kernel,
                                        attention_kernel, attention_threshold)
    return Sample(
        image=Tensor(normalize_image(np.ascontiguousarray(image), mean, std)),
        points=points,
        density_target=Tensor(density.values[None, :, :]),
        attention_target=Tensor(attention.values[None, :, :]),
        transforms=tlog,
    )


def make_batch(samples: list[Sample], dtype=np.float32):
    """Stack samples into (images, density, attention) batch tensors."""
    if not samples:
        raise ValueError("make_batch: empty sample list")
    shape = samples[0].image.shape
    for s in samples:
        if s.image.shape != shape:
            raise ValueError(
                f"make_batch: heterogeneous sizes {shape} vs {s.image.shape}")
    images = Tensor(np.stack([s.image.data for s in samples]).astype(dtype))
    density = Tensor(np.stack([s.density_target.data for s in samples]).astype(dtype))
    attention = Tensor(np.stack([s.attention_target.data for s in samples]).astype(dtype))
    return images, density, attention


# ---------------------------------------------------------------------------
# evaluation-time preparation
# ---------------------------------------------------------------------------


@dataclass
class EvalInput:
    """Padded, normalized image plus the bookkeeping to undo the padding."""

    tensor: Tensor          # [1, 3, H', W'], H'/W' multiples of 16
    width: int              # original size
    height: int
    out_width: int          # valid cells on the half-resolution output grid
    out_height: int
    roi: np.ndarray | None  # resized to (out_height, out_width), or None


def _resize_mask_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    iy = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    ix = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return mask[iy[:, None], ix[None, :]]


def eval_prepare(image: np.ndarray, roi: np.ndarray | None = None,
                 mean=NORM_MEAN, std=NORM_STD, dtype=np.float32) -> EvalInput:
    """Pad to the next multiple of 16 (replicate edge) and normalize.

    The predicted density is meaningful only on the first
    ceil(H/2) x ceil(W/2) output cells; the ROI mask, when given, is resized
    to that grid and applied multiplicatively before counting.
    """
    h, w = image.shape[:2]
    ph = (16 - h % 16) % 16
    pw = (16 - w % 16) % 16
    padded = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge") if ph or pw else image
    out_h = (h + 1) // 2
    out_w = (w + 1) // 2
    roi_out = None
    if roi is not None:
        # any source resolution is accepted; the mask lives on the output grid
        roi_out = (_resize_mask_nearest(roi, out_h, out_w) != 0).astype(np.float64)
    tensor = Tensor(normalize_image(padded, mean, std)[None].astype(dtype))
    return EvalInput(tensor=tensor, width=w, height=h,
                     out_width=out_w, out_height=out_h, roi=roi_out)


# ---------------------------------------------------------------------------
# dataset containers
# ---------------------------------------------------------------------------


@dataclass
class DatasetItem:
    annotation: PointAnnotation
    image: np.ndarray                  # (H, W, 3) float in [0, 1]
    roi: np.ndarray | None = None
    density_kernel: KernelSpec | None = None  # per-item override (large-image rule)


def load_dataset(manifest_path, qnrf: bool = False, ucsd: bool = False,
                 roi_path=None) -> list[DatasetItem]:
    """Materialize a manifest into memory.

    ``qnrf`` resizes every image to 1024x768 before anything else and pins
    the width-adaptive density kernel computed from the original width;
    ``ucsd`` upscales frames to 960x640 (points scaled along).
    """
    roi = load_mask(roi_path) if roi_path else None
    items = []
    for ann, image_path in load_manifest(manifest_path):
        image = load_image(image_path)
        kernel = None
        if qnrf:
            kernel = adaptive_kernel(ann.width)
            image, pts = scale_image_points(image, ann.points, 1024, 768)
            ann = PointAnnotation(ann.image_id, 1024, 768, pts)
        elif ucsd:
            image, pts = scale_image_points(image, ann.points, UCSD_WIDTH, UCSD_HEIGHT)
            ann = PointAnnotation(ann.image_id, UCSD_WIDTH, UCSD_HEIGHT, pts)
        items.append(DatasetItem(annotation=ann, image=image, roi=roi,
                                 density_kernel=kernel))
    return items
