"""Multi-task objective and the Adam training loop.

The loss is the per-image pixel-sum squared error on the density map plus
a weighted binary cross entropy on the attention logits, both averaged
over the batch. Adam uses the standard bias-corrected update with weight
decay folded into the gradient (coupled L2).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, backward, bce_with_logits
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentConfig, DatasetItem, augment, make_batch
from .model import SFANet

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-3
    alpha: float = 0.1
    batch_size: int = 30
    epochs: int = 1
    checkpoint_every: int = 0     # epochs between checkpoints; 0 = final only
    seed: int = 0
    amp_enabled: bool = True
    loss_reduction: str = "image_sum"   # or "pixel_mean"
    early_stop_mae: float | None = None  # stop once validation MAE dips below

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss_reduction not in ("image_sum", "pixel_mean"):
            raise ValueError(f"unknown loss_reduction {self.loss_reduction!r}")


@dataclass
class TrainState:
    """Optimizer step counter, Adam moments, and the best-metric tracker."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    best_mae: float = math.inf


def density_loss(pred: Tensor, target: Tensor, reduction: str = "image_sum") -> Tensor:
    """Squared error on density maps: per-image sum over pixels, mean over
    the batch (``pixel_mean`` divides by all elements instead)."""
    if pred.shape != target.shape:
        raise ValueError(f"density_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    sq = diff * diff
    denom = pred.shape[0] if reduction == "image_sum" else pred.size
    return sq.sum() * (1.0 / denom)


def attention_loss(logits: Tensor, target: Tensor, reduction: str = "image_sum") -> Tensor:
    """Binary cross entropy against a {0,1} target, computed from logits in
    the fused overflow-safe form; same reduction convention as
    :func:`density_loss`."""
    if logits.shape != target.shape:
        raise ValueError(f"attention_loss: shape mismatch {logits.shape} vs {target.shape}")
    tv = target.data
    if not np.all((tv == 0.0) | (tv == 1.0)):
        raise ValueError("attention_loss: target must be binary {0, 1}")
    per_pixel = bce_with_logits(logits, target)
    denom = logits.shape[0] if reduction == "image_sum" else logits.size
    return per_pixel.sum() * (1.0 / denom)


def combined_loss(dl: Tensor, al: Tensor | None, alpha: float) -> Tensor:
    """Total objective: density term plus ``alpha`` times the attention term."""
    if al is None or alpha == 0:
        return dl
    return dl + al * alpha


def adam_step(params, state: TrainState, cfg: TrainConfig) -> bool:
    """One coupled-L2 Adam update over all parameters with gradients.

    If any gradient is non-finite, the step is rejected: parameters, moments
    and the step counter are left untouched and the event is logged.
    """
    live = [p for p in params if p.grad is not None]
    for p in live:
        if not np.isfinite(p.grad).all():
            log.warning("non-finite gradient in %s; step %d rejected",
                        p.name, state.step)
            return False
    t = state.step + 1
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for p in live:
        g = p.grad
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        state.m[p.name] = m
        state.v[p.name] = v
        p.data = p.data - cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    state.step = t
    return True


def optimizer_state_dict(state: TrainState) -> dict:
    return {"step": state.step, "m": state.m, "v": state.v}


@dataclass
class TrainReport:
    steps: int
    epochs: int
    history: list[dict]
    csv_path: Path | None
    final_checkpoint: Path | None
    best_checkpoint: Path | None
    best_mae: float


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1, step)))


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0, epoch)))
    return rng.permutation(n)


def train(model: SFANet, items: list[DatasetItem], cfg: TrainConfig,
          augment_cfg: AugmentConfig | None = None,
          val_items: list[DatasetItem] | None = None,
          out_dir=None, resume_from=None) -> TrainReport:
    """Run the full loop: augment, forward, loss, backward, Adam.

    Every random draw is derived from (seed, epoch) or (seed, step)
    counters, so a run is reproducible and a checkpoint resume continues
    the identical sample stream.
    """
    from .evaluate import evaluate  # local import; evaluate pulls no training code

    if not items:
        raise ValueError("train: dataset is empty")
    augment_cfg = augment_cfg or AugmentConfig()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    state = TrainState()
    if resume_from is not None:
        opt = load_checkpoint(resume_from, model, strict=True)
        if opt is not None:
            state = TrainState(step=opt["step"], m=opt["m"], v=opt["v"])

    n = len(items)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    start_epoch = state.step // steps_per_epoch
    dtype = model.config.np_dtype

    history: list[dict] = []
    best_ckpt = None
    stop = False
    for epoch in range(start_epoch, cfg.epochs):
        order = _epoch_order(cfg.seed, epoch, n)
        sums = {"L": 0.0, "L_den": 0.0, "L_att": 0.0}
        batches = 0
        for b in range(steps_per_epoch):
            chunk = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if len(chunk) == 0:
                continue
            rng = _step_rng(cfg.seed, state.step)
            samples = [
                augment(items[i].image, items[i].annotation.points, augment_cfg,
                        rng, density_kernel=items[i].density_kernel)
                for i in chunk
            ]
            images, den_t, att_t = make_batch(samples, dtype=dtype)
            out = model.forward(images, training=True)
            dl = density_loss(out.density, den_t, cfg.loss_reduction)
            al = None
            if out.attention_logits is not None:
                al = attention_loss(out.attention_logits, att_t, cfg.loss_reduction)
            loss = combined_loss(dl, al, cfg.alpha)
            model.zero_grad()
            backward(loss)
            adam_step(model.parameters(), state, cfg)
            sums["L"] += loss.item()
            sums["L_den"] += dl.item()
            sums["L_att"] += al.item() if al is not None else 0.0
            batches += 1

        row = {
            "epoch": epoch + 1,
            "step": state.step,
            "L": sums["L"] / max(batches, 1),
            "L_den": sums["L_den"] / max(batches, 1),
            "L_att": sums["L_att"] / max(batches, 1),
            "val_MAE": "",
            "val_MSE": "",
        }

        at_interval = cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0
        last_epoch = epoch + 1 == cfg.epochs
        if val_items and (at_interval or last_epoch):
            result = evaluate(model, val_items)
            row["val_MAE"] = result.mae
            row["val_MSE"] = result.mse
            if result.mae < state.best_mae:
                state.best_mae = result.mae
                if out_dir is not None:
                    best_ckpt = out_dir / "best.sfac"
                    save_checkpoint(best_ckpt, model, optimizer_state_dict(state))
            if cfg.early_stop_mae is not None and result.mae < cfg.early_stop_mae:
                stop = True
        history.append(row)
        if out_dir is not None and at_interval:
            save_checkpoint(out_dir / f"checkpoint_epoch{epoch + 1:05d}.sfac",
                            model, optimizer_state_dict(state))
        if stop:
            log.info("early stop at epoch %d: val MAE %.4f", epoch + 1, state.best_mae)
            break

    final_ckpt = None
    csv_path = None
    if out_dir is not None:
        final_ckpt = out_dir / "final.sfac"
        save_checkpoint(final_ckpt, model, optimizer_state_dict(state))
        csv_path = out_dir / "train_report.csv"
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(
                f, fieldnames=["epoch", "step", "L", "L_den", "L_att", "val_MAE", "val_MSE"])
            writer.writeheader()
            writer.writerows(history)
    return TrainReport(steps=state.step, epochs=len(history), history=history,
                       csv_path=csv_path, final_checkpoint=final_ckpt,
                       best_checkpoint=best_ckpt, best_mae=state.best_mae)
