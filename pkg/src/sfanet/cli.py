"""Command-line surface binding the library together.

Subcommands: ``synth`` (generate the blob dataset), ``gen-gt`` (rasterize
ground truth for a manifest), ``train``, ``eval``, ``infer`` and
``grad-check`` (finite-difference suite; nonzero exit on failure).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np


def _add_common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", type=Path, default=None, help="INI config file")
    p.add_argument("--preset", choices=["desk", "parta", "partb", "qnrf", "ucsd"],
                   default="desk", help="configuration preset")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfanet",
        description="Crowd counting with dual-path multi-scale fusion and attention.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blob dataset")
    _add_common(p)
    p.add_argument("--n", type=int, default=20, help="number of images")
    p.add_argument("--size", type=int, default=128, help="image side length")

    p = sub.add_parser("gen-gt", help="rasterize density/attention ground truth")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)

    p = sub.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--val-manifest", type=Path, default=None)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")

    p = sub.add_parser("eval", help="evaluate a checkpoint (or exported maps)")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--pred-dir", type=Path, default=None,
                   help="score <image_id>_density.sfdm maps instead of a checkpoint")
    p.add_argument("--roi", type=Path, default=None, help="ROI mask image")

    p = sub.add_parser("infer", help="count heads in a single image")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)

    p = sub.add_parser("grad-check", help="run the finite-difference gradient suite")
    _add_common(p, out_required=False)
    p.add_argument("--coords", type=int, default=50, help="coordinates sampled per op")
    return parser


def _load_app_config(args):
    from .config import load_config

    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg,
            model=dataclasses.replace(cfg.model, init_seed=args.seed),
            train=dataclasses.replace(cfg.train, seed=args.seed),
            augment=dataclasses.replace(cfg.augment, seed=args.seed),
        )
    return cfg


def _load_items(manifest: Path, app_cfg, roi_path=None):
    from .data import load_dataset

    return load_dataset(manifest, qnrf=app_cfg.data.qnrf_resize,
                        ucsd=app_cfg.data.ucsd_upscale, roi_path=roi_path)


def _density_kernel(app_cfg):
    from .groundtruth import KernelSpec

    return KernelSpec(app_cfg.data.density_mu, app_cfg.data.density_rho)


def _attention_kernel(app_cfg):
    from .groundtruth import KernelSpec

    return KernelSpec(app_cfg.data.attention_mu, app_cfg.data.attention_rho)


def cmd_synth(args) -> int:
    from .synth import generate_synthetic_dataset

    seed = args.seed if args.seed is not None else 0
    manifest = generate_synthetic_dataset(args.out, n_images=args.n,
                                          size=args.size, seed=seed)
    print(manifest)
    return 0


def cmd_gen_gt(args) -> int:
    from .groundtruth import render_attention, render_density
    from .imageio import probability_to_u8, save_image, write_density_sidecar

    app_cfg = _load_app_config(args)
    items = _load_items(args.manifest, app_cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    for item in items:
        kernel = item.density_kernel or _density_kernel(app_cfg)
        density = render_density(item.annotation, kernel)
        attention = render_attention(density, _attention_kernel(app_cfg),
                                     app_cfg.data.attention_threshold)
        stem = item.annotation.image_id
        write_density_sidecar(args.out / f"{stem}_density.sfdm", density.values)
        save_image(args.out / f"{stem}_attention.pgm",
                   probability_to_u8(attention.values))
    print(f"wrote ground truth for {len(items)} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .model import build_model
    from .training import train

    app_cfg = _load_app_config(args)
    train_cfg = app_cfg.train
    if args.epochs is not None:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
    model_cfg = app_cfg.model
    if not train_cfg.amp_enabled and model_cfg.amp_enabled:
        model_cfg = dataclasses.replace(model_cfg, amp_enabled=False)
    model = build_model(model_cfg)
    items = _load_items(args.manifest, app_cfg)
    val_items = _load_items(args.val_manifest, app_cfg) if args.val_manifest else items
    report = train(model, items, train_cfg, augment_cfg=app_cfg.augment,
                   val_items=val_items, out_dir=args.out, resume_from=args.resume)
    print(f"trained {report.steps} steps ({report.epochs} epochs); "
          f"best MAE {report.best_mae:.4f}")
    print(f"final checkpoint: {report.final_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate, evaluate_prediction_maps
    from .imageio import load_mask, read_density_sidecar

    app_cfg = _load_app_config(args)
    items = _load_items(args.manifest, app_cfg, roi_path=args.roi)
    if (args.checkpoint is None) == (args.pred_dir is None):
        print("eval: exactly one of --checkpoint or --pred-dir is required",
              file=sys.stderr)
        return 2
    if args.checkpoint is not None:
        from .checkpoint import load_checkpoint
        from .model import build_model

        model = build_model(app_cfg.model)
        load_checkpoint(args.checkpoint, model, strict=True)
        result = evaluate(model, items)
    else:
        maps = {
            item.annotation.image_id: read_density_sidecar(
                args.pred_dir / f"{item.annotation.image_id}_density.sfdm")
            for item in items
        }
        result = evaluate_prediction_maps(items, maps)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(result.to_json())
    result.write_csv(args.out / "report.csv")
    print(f"n={result.n} MAE={result.mae:.4f} MSE={result.mse:.4f}")
    return 0


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluate import export_maps, predict_density
    from .imageio import load_image
    from .model import build_model

    app_cfg = _load_app_config(args)
    model = build_model(app_cfg.model)
    load_checkpoint(args.checkpoint, model, strict=True)
    image = load_image(args.image)
    density, attention, count = predict_density(model, image)
    args.out.mkdir(parents=True, exist_ok=True)
    export_maps(image, density, attention, args.out / args.image.stem)
    print(f"{args.image}: {count:.2f}")
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import run_full_suite

    seed = args.seed if args.seed is not None else 0
    ok = run_full_suite(seed=seed, n_coords=args.coords)
    print("gradient suite:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


COMMANDS = {
    "synth": cmd_synth,
    "gen-gt": cmd_gen_gt,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"sfanet {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"sfanet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
