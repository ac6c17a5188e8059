"""Counting metrics, ROI-masked evaluation and map export.

A predicted count is the raw integral of the density map over the valid
(unpadded, optionally ROI-masked) output cells; no clamping, matching the
training objective. The aggregate errors are the mean absolute error and
the root-mean-square error over the test set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Tensor, no_grad
from .data import DatasetItem, eval_prepare
from .imageio import (
    probability_to_u8,
    save_image,
    to_display_u8,
    write_density_sidecar,
)
from .model import ModelOutput, SFANet


@dataclass
class PerImageResult:
    image_id: str
    predicted_count: float
    gt_count: int
    abs_err: float
    sq_err: float


@dataclass
class EvalResult:
    n: int
    mae: float
    mse: float
    per_image: list[PerImageResult]

    def to_json(self) -> str:
        doc = {
            "n": self.n,
            "mae": self.mae,
            "mse": self.mse,
            "per_image": [
                {
                    "image_id": r.image_id,
                    "predicted_count": r.predicted_count,
                    "gt_count": r.gt_count,
                    "abs_err": r.abs_err,
                    "sq_err": r.sq_err,
                }
                for r in self.per_image
            ],
        }
        return json.dumps(doc, indent=2)

    def write_csv(self, path) -> None:
        lines = ["image_id,predicted_count,gt_count,abs_err,sq_err"]
        lines += [
            f"{r.image_id},{r.predicted_count!r},{r.gt_count},{r.abs_err!r},{r.sq_err!r}"
            for r in self.per_image
        ]
        Path(path).write_text("\n".join(lines) + "\n")


def count_from_density(density, roi: np.ndarray | None = None) -> float:
    """Predicted count: sum of the density map, ROI-masked when provided."""
    values = density.data if isinstance(density, Tensor) else np.asarray(density)
    values = values.reshape(values.shape[-2], values.shape[-1])
    if roi is not None:
        values = values * roi
    return float(values.sum(dtype=np.float64))


def aggregate_counts(triples: list[tuple[str, float, int]]) -> EvalResult:
    """MAE and root-mean-square error from (image_id, predicted, gt) rows.

    Rows are reduced in image_id order, so the result is independent of
    input permutation.
    """
    if not triples:
        raise ValueError("evaluate: empty dataset")
    rows = sorted(triples, key=lambda t: t[0])
    per_image = []
    abs_sum = 0.0
    sq_sum = 0.0
    for image_id, pred, gt in rows:
        err = pred - gt
        r = PerImageResult(image_id, float(pred), int(gt), abs(err), err * err)
        per_image.append(r)
        abs_sum += r.abs_err
        sq_sum += r.sq_err
    n = len(per_image)
    return EvalResult(n=n, mae=abs_sum / n, mse=math.sqrt(sq_sum / n),
                      per_image=per_image)


def predict_density(model: SFANet, image: np.ndarray,
                    roi: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Eval-mode forward for one image.

    Returns (density, attention) cropped to the valid output cells plus the
    ROI-masked count.
    """
    prep = eval_prepare(image, roi=roi, dtype=model.config.np_dtype)
    with no_grad():
        out = model.forward(prep.tensor, training=False)
    density = out.density.data[0, 0, :prep.out_height, :prep.out_width]
    attention = out.attention.data[0, 0, :prep.out_height, :prep.out_width]
    count = count_from_density(density, prep.roi)
    return density, attention, count


def evaluate(model: SFANet, items: list[DatasetItem],
             roi: np.ndarray | None = None) -> EvalResult:
    """Per-image counts through the eval path, aggregated to MAE/MSE."""
    if not items:
        raise ValueError("evaluate: empty dataset")
    triples = []
    for item in items:
        item_roi = item.roi if item.roi is not None else roi
        _, _, count = predict_density(model, item.image, item_roi)
        triples.append((item.annotation.image_id, count, item.annotation.count))
    return aggregate_counts(triples)


def evaluate_prediction_maps(items: list[DatasetItem],
                             maps: dict[str, np.ndarray],
                             roi: np.ndarray | None = None) -> EvalResult:
    """Score externally produced density maps (e.g. exported sidecars)."""
    triples = []
    for item in items:
        image_id = item.annotation.image_id
        if image_id not in maps:
            raise ValueError(f"no prediction map for image {image_id!r}")
        item_roi = item.roi if item.roi is not None else roi
        mask = None
        if item_roi is not None:
            from .data import _resize_mask_nearest

            h, w = maps[image_id].shape
            mask = (_resize_mask_nearest(item_roi, h, w) != 0).astype(np.float64)
        count = count_from_density(maps[image_id], mask)
        triples.append((image_id, count, item.annotation.count))
    return aggregate_counts(triples)


def export_maps(image: np.ndarray, density: np.ndarray, attention: np.ndarray,
                path_prefix) -> None:
    """Write display PNGs plus the raw density sidecar.

    ``<prefix>_density.png`` is peak-normalized for display only; the
    sidecar ``<prefix>_density.sfdm`` carries the raw values. A side-by-side
    panel (input | attention | density) is written as ``<prefix>_panel.png``.
    """
    prefix = Path(path_prefix)
    if prefix.parent and not prefix.parent.exists():
        raise OSError(f"cannot write maps: directory {prefix.parent} does not exist")
    input_u8 = np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8)
    density_u8 = to_display_u8(np.maximum(density, 0.0))
    attention_u8 = probability_to_u8(attention)
    save_image(f"{prefix}_input.png", input_u8)
    save_image(f"{prefix}_density.png", density_u8)
    save_image(f"{prefix}_attention.png", attention_u8)
    write_density_sidecar(f"{prefix}_density.sfdm", density)

    h, w = image.shape[:2]
    panel = np.concatenate(
        [input_u8, _gray_to_rgb(attention_u8, h, w), _gray_to_rgb(density_u8, h, w)],
        axis=1,
    )
    save_image(f"{prefix}_panel.png", panel)


def _gray_to_rgb(gray: np.ndarray, h: int, w: int) -> np.ndarray:
    # nearest upscale from the half-resolution grid to the input size
    up = np.repeat(np.repeat(gray, 2, axis=0), 2, axis=1)[:h, :w]
    if up.shape != (h, w):
        up = np.pad(up, ((0, h - up.shape[0]), (0, w - up.shape[1])), mode="edge")
    return np.repeat(up[:, :, None], 3, axis=2)
