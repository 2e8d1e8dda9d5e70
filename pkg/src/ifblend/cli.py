"""Command-line entry points.

Subcommands: ``train``, ``eval``, ``infer``, ``synth``, ``grid``, ``audit``.
Every command writes the fully resolved configuration (or its effective
arguments) next to its outputs, never touches its input directories, and
exits 0 on success, 2 on validation problems, 3 on runtime aborts.
Config values can also come from ``IFBLEND_*`` environment variables
(``IFBLEND_TRAIN__LR=1e-3`` sets ``train.lr``).
"""

import argparse
import logging
import sys
import time
import zipfile
from pathlib import Path

import numpy as np
import torch

from . import engine
from .config import ConfigError, load_config, render_config
from .data import (
    SyntheticSceneSpec,
    audit_pairs,
    generate_synthetic,
    load_image,
    read_dataset,
    save_image,
    to_array,
    to_tensor,
)
from .model import load_checkpoint
from .reporting import write_grids

log = logging.getLogger("ifblend")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _common_flags(parser):
    parser.add_argument("--config", help="config file (key = value lines)")
    parser.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE", help="config override, repeatable")
    parser.add_argument("--seed", type=int, help="shorthand for train.seed")
    parser.add_argument("--deterministic", action="store_true",
                        help="shorthand for train.deterministic=true")


def _resolve_config(args):
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.deterministic:
        overrides.append("train.deterministic=true")
    return load_config(args.config, overrides=overrides)


def _echo_config(out_dir, text):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved.cfg").write_text(text)


def _echo_args(out_dir, section, values):
    lines = [f"{section}.{k} = {v}" for k, v in values.items()]
    _echo_config(out_dir, "\n".join(lines) + "\n")


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if not cfg.data.root:
        raise ConfigError("data.root is required for training")
    out_dir = Path(args.out) if args.out else Path(
        f"runs/train-{time.strftime('%Y%m%d-%H%M%S')}"
    )
    _echo_config(out_dir, render_config(cfg))
    train_set = read_dataset(cfg.data.root, cfg.data.layout, cfg.data.split)
    val_set = (read_dataset(cfg.data.root, cfg.data.layout, cfg.data.val_split)
               if cfg.data.val_split else None)
    result = engine.train(cfg.model, cfg.loss, cfg.train, train_set,
                          val_dataset=val_set, out_dir=out_dir)
    log.info("training finished after %d steps; best validation PSNR %.3f dB",
             result.steps_run, result.best_val_psnr)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    root = args.data or cfg.data.root
    if not root:
        raise ConfigError("a dataset root is required (--data or data.root)")
    layout = args.layout or cfg.data.layout
    split = args.split or cfg.data.split
    protocol = args.protocol or cfg.eval.protocol
    checkpoint = args.model or args.checkpoint
    if not checkpoint:
        raise ConfigError("--checkpoint PATH or --model identity is required")
    out_dir = Path(args.out)
    _echo_config(out_dir, render_config(cfg))
    dataset = read_dataset(root, layout, split)
    report = engine.evaluate_checkpoint(
        checkpoint, dataset, protocol=protocol, loss_cfg=cfg.loss,
        lab_mode=cfg.eval.lab_mode,
        scorer_cmd=cfg.eval.perceptual_scorer_cmd or None,
        tile=cfg.eval.tile or None, tile_overlap=cfg.eval.tile_overlap,
    )
    report.to_csv(out_dir / "report.csv")
    report.to_json(out_dir / "report.json")
    agg = report.aggregates
    log.info("evaluated %d pairs: PSNR %s, SSIM %s", agg["rows"],
             agg.get("psnr"), agg.get("ssim"))
    return EXIT_OK


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    in_path = Path(args.input)
    if in_path.is_dir():
        files = sorted(p for p in in_path.iterdir() if p.suffix.lower() == ".png")
    elif in_path.exists():
        files = [in_path]
    else:
        raise ConfigError(f"input path does not exist: {in_path}")
    out_dir = Path(args.out)
    _echo_args(out_dir, "infer", {
        "checkpoint": args.checkpoint, "input": args.input,
        "tile": args.tile, "overlap": args.overlap,
    })
    written = 0
    for path in files:
        try:
            arr, dtype = load_image(path)
        except IOError as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        x = to_tensor(arr.astype(np.float32)).unsqueeze(0)
        with torch.no_grad():
            if args.tile:
                pred = engine.infer_tiled(model, x, args.tile, args.overlap)
            else:
                pred = model(x)
        save_image(out_dir / path.name, to_array(pred), dtype)
        written += 1
    if files and written == 0:
        log.error("all %d inputs failed to decode", len(files))
        return EXIT_RUNTIME
    log.info("restored %d image(s) into %s", written, out_dir)
    return EXIT_OK


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    for sub in ("input", "gt", "mask"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    _echo_args(out_dir, "synth", {
        "count": args.count, "size": args.size, "seed": args.seed,
        "lights": args.lights, "penumbra_sigma": args.penumbra_sigma,
        "min_attenuation": args.min_attenuation,
    })
    for i in range(args.count):
        spec = SyntheticSceneSpec(
            seed=args.seed * 100_000 + i,
            size=(args.size, args.size),
            num_lights=args.lights,
            penumbra_sigma=args.penumbra_sigma,
            min_attenuation=args.min_attenuation,
        )
        sample = generate_synthetic(spec)
        stem = f"{i:04d}"
        save_image(out_dir / "input" / f"{stem}.png", to_array(sample.input), np.uint16)
        save_image(out_dir / "gt" / f"{stem}.png", to_array(sample.gt), np.uint16)
        save_image(out_dir / "mask" / f"{stem}.png", to_array(sample.mask), np.uint8)
    log.info("wrote %d synthetic pairs to %s", args.count, out_dir)
    return EXIT_OK


def cmd_grid(args) -> int:
    labeled = []
    for item in args.inputs:
        if "=" not in item:
            raise ConfigError(f"grid inputs must look like label=dir, got {item!r}")
        label, directory = item.split("=", 1)
        if not Path(directory).is_dir():
            raise ConfigError(f"not a directory: {directory}")
        labeled.append((label, directory))
    out_dir = Path(args.out)
    _echo_args(out_dir, "grid", {"inputs": ",".join(args.inputs)})
    written = write_grids(labeled, out_dir)
    log.info("wrote %d grid(s) to %s", len(written), out_dir)
    return EXIT_OK


def cmd_audit(args) -> int:
    dataset = read_dataset(args.data, args.layout, args.split)
    report = audit_pairs(dataset)
    summary = report.to_dict()
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _echo_args(out_dir, "audit", {
            "data": args.data, "layout": args.layout, "split": args.split,
        })
        import json

        (out_dir / "audit.json").write_text(json.dumps(summary, indent=1))
    for row in report.rows:
        status = "ok" if row.ok and not row.flags else ("flags: " + ",".join(row.flags)
                                                        if row.ok else f"error: {row.error}")
        log.info("%s: %s", row.stem, status)
    log.info("%d pairs audited, %d flagged", summary["num_pairs"], summary["num_flagged"])
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ifblend",
        description="Ambient lighting normalization: train, evaluate, restore.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model and write run artifacts")
    _common_flags(p)
    p.add_argument("--out", help="run directory (default: runs/train-<timestamp>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint (or unprocessed inputs)")
    _common_flags(p)
    p.add_argument("--checkpoint", help="checkpoint path, or the word identity")
    p.add_argument("--model", help="alias for --checkpoint (e.g. --model identity)")
    p.add_argument("--data", help="dataset root (overrides data.root)")
    p.add_argument("--layout", choices=["ambient6k", "istd"])
    p.add_argument("--split")
    p.add_argument("--protocol", choices=["rgb", "lab_istd"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="restore one PNG or a directory of PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile", type=int, default=0)
    p.add_argument("--overlap", type=int, default=16)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth", help="write a deterministic synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--lights", type=int, default=2)
    p.add_argument("--penumbra-sigma", type=float, default=3.0)
    p.add_argument("--min-attenuation", type=float, default=0.35)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("grid", help="compose labeled comparison grids")
    p.add_argument("--inputs", nargs="+", required=True, metavar="LABEL=DIR")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("audit", help="check pairs for alignment and brightness")
    p.add_argument("--data", required=True)
    p.add_argument("--layout", choices=["ambient6k", "istd"], default="ambient6k")
    p.add_argument("--split", default="train")
    p.add_argument("--out")
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError,
            zipfile.BadZipFile, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except engine.TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
