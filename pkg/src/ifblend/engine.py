"""Training loop, evaluation runner, and tiled high-resolution inference."""

import csv
import json
import logging
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .data import PairedSample, sample_patch, save_image, to_array
from .losses_metrics import (
    LossConfig,
    lab_region_error,
    loss_terms,
    perceptual_score,
    psnr,
    ssim,
)
from .model import IFBlend, ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

PROTOCOLS = ("rgb", "lab_istd")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    patch_size: int = 256
    lr: float = 2e-4
    lr_schedule: str = "cosine"
    min_lr: float = 1e-6
    seed: int = 0
    checkpoint_every: int = 500
    validate_every: int = 100
    deterministic: bool = True
    grad_clip: Optional[float] = 1.0
    max_steps: Optional[int] = None
    early_stop_psnr: Optional[float] = None
    early_stop_loss: Optional[float] = None

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.patch_size) <= 0:
            raise ValueError("epochs, batch_size, and patch_size must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class TrainResult:
    out_dir: Path
    best_checkpoint: Path
    last_checkpoint: Path
    metrics_csv: Path
    steps_run: int
    best_val_psnr: float


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the run directory keeps the last good checkpoint."""

    def __init__(self, message, dump_path):
        super().__init__(message)
        self.dump_path = dump_path


def _fetch(item) -> PairedSample:
    return item.load() if hasattr(item, "load") else item


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    t = min(step / max(total - 1, 1), 1.0)
    return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


def _batch_tensors(samples, patch_size, rng):
    xs, ys = [], []
    for s in samples:
        h, w = s.input.shape[-2:]
        if patch_size < min(h, w):
            s = sample_patch(s, patch_size, rng)
        xs.append(s.input)
        ys.append(s.gt)
    return torch.stack(xs), torch.stack(ys)


def _validate(model, samples, loss_cfg) -> tuple:
    """(mean PSNR, mean eval-mode loss) over a sample list."""
    model.eval()
    psnrs, losses = [], []
    with torch.no_grad():
        for item in samples:
            s = _fetch(item)
            pred = model(s.input.unsqueeze(0))
            gt = s.gt.unsqueeze(0)
            psnrs.append(psnr(pred, gt))
            losses.append(loss_terms(pred, gt, loss_cfg)[0].item())
    model.train()
    finite = [v for v in psnrs if math.isfinite(v)]
    mean_psnr = float(np.mean(finite)) if finite else float("inf")
    return mean_psnr, float(np.mean(losses))


def train(model_cfg: ModelConfig, loss_cfg: LossConfig, train_cfg: TrainConfig,
          dataset, val_dataset=None, out_dir="runs/train") -> TrainResult:
    """Fit the model with Adam (betas 0.9/0.999) and write run artifacts.

    The run directory collects ``metrics.csv`` (step,loss,l1,ssim_term,lr),
    periodic ``step-*.ckpt`` files, ``best.ckpt`` by validation PSNR, and
    ``last.ckpt``. A non-finite loss aborts the run, dumps the offending
    batch ids, and leaves the last good checkpoint in place.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = list(dataset)
    if not samples:
        raise ValueError("training dataset is empty")
    if len(samples) <= 64:  # desk-scale sets stay decoded in memory
        samples = [_fetch(s) for s in samples]
    val_samples = list(val_dataset) if val_dataset else samples

    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    model = IFBlend(model_cfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr, betas=(0.9, 0.999))

    n = len(samples)
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.epochs
    if train_cfg.max_steps is not None:
        total_steps = min(total_steps, train_cfg.max_steps)

    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    metrics_path = out_dir / "metrics.csv"
    save_checkpoint(model, last_path, meta={"step": 0})

    best_psnr = -float("inf")
    step = 0
    stop = False
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "l1", "ssim_term", "lr"])
        while step < total_steps and not stop:
            order = rng.permutation(n)
            for start in range(0, n, train_cfg.batch_size):
                if step >= total_steps or stop:
                    break
                idx = order[start : start + train_cfg.batch_size]
                batch = [_fetch(samples[i]) for i in idx]
                x, y = _batch_tensors(batch, train_cfg.patch_size, rng)
                lr = _lr_at(train_cfg, step, total_steps)
                for group in opt.param_groups:
                    group["lr"] = lr
                opt.zero_grad()
                total, l1, ssim_term = loss_terms(model(x), y, loss_cfg)
                if not torch.isfinite(total):
                    dump = out_dir / "nan-batch.json"
                    dump.write_text(json.dumps({
                        "step": step,
                        "batch_ids": [batch[i].meta.get("scene_id", str(int(idx[i])))
                                      for i in range(len(batch))],
                    }, indent=1))
                    raise TrainingDiverged(
                        f"non-finite loss at step {step}; batch ids dumped to {dump}",
                        dump_path=dump,
                    )
                total.backward()
                if train_cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
                opt.step()
                step += 1
                writer.writerow([
                    step,
                    f"{total.item():.17g}",
                    f"{l1.item():.17g}",
                    f"{ssim_term.item():.17g}",
                    f"{lr:.17g}",
                ])
                if step % train_cfg.checkpoint_every == 0:
                    save_checkpoint(model, out_dir / f"step-{step:06d}.ckpt",
                                    meta={"step": step})
                    save_checkpoint(model, last_path, meta={"step": step})
                if step % train_cfg.validate_every == 0 or step == total_steps:
                    val, val_loss = _validate(model, val_samples, loss_cfg)
                    if val > best_psnr:
                        best_psnr = val
                        save_checkpoint(model, best_path,
                                        meta={"step": step, "val_psnr": val,
                                              "val_loss": val_loss})
                    targets = [
                        (train_cfg.early_stop_psnr, val >= (train_cfg.early_stop_psnr or 0)),
                        (train_cfg.early_stop_loss, val_loss <= (train_cfg.early_stop_loss or 0)),
                    ]
                    configured = [ok for threshold, ok in targets if threshold is not None]
                    if configured and all(configured):
                        log.info("early stop: PSNR %.2f, loss %.4f at step %d",
                                 val, val_loss, step)
                        stop = True

    save_checkpoint(model, last_path, meta={"step": step})
    if not best_path.exists():
        best_psnr, val_loss = _validate(model, val_samples, loss_cfg)
        save_checkpoint(model, best_path,
                        meta={"step": step, "val_psnr": best_psnr, "val_loss": val_loss})
    return TrainResult(
        out_dir=out_dir,
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        metrics_csv=metrics_path,
        steps_run=step,
        best_val_psnr=best_psnr,
    )


# ---------------------------------------------------------------------------
# Tiled inference
# ---------------------------------------------------------------------------


def _tile_positions(length, tile, stride):
    positions = list(range(0, max(length - tile, 0) + 1, stride))
    if positions[-1] != length - tile:
        positions.append(length - tile)
    return positions


def _ramp_profile(tile, overlap, ramp_start, ramp_end):
    profile = np.ones(tile)
    if overlap > 0:
        ramp = (np.arange(overlap) + 1.0) / (overlap + 1.0)
        if ramp_start:
            profile[:overlap] = ramp
        if ramp_end:
            profile[-overlap:] = ramp[::-1]
    return profile


def tile_plan(h, w, tile, overlap):
    """(y, x, weight) per tile plus the raw weight-sum map over the image.

    Weights are linear feathering ramps over the overlap bands; dividing each
    tile's weight by the summed map yields an exact partition of unity.
    """
    stride = tile - overlap
    ys = _tile_positions(h, tile, stride)
    xs = _tile_positions(w, tile, stride)
    plan = []
    weight_sum = np.zeros((h, w))
    for y in ys:
        py = _ramp_profile(tile, overlap, ramp_start=y > 0, ramp_end=y + tile < h)
        for x in xs:
            px = _ramp_profile(tile, overlap, ramp_start=x > 0, ramp_end=x + tile < w)
            weight = np.outer(py, px)
            plan.append((y, x, weight))
            weight_sum[y : y + tile, x : x + tile] += weight
    return plan, weight_sum


def infer_tiled(model: IFBlend, image: torch.Tensor, tile: int, overlap: int) -> torch.Tensor:
    """Restore a large image tile by tile with feathered blending.

    Tiles covering the whole image fall back to a single direct forward
    (bitwise identical to calling the model). Requires ``tile`` divisible by
    2**stages and ``0 <= overlap < tile/2``.
    """
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    mult = 2**model.cfg.stages
    if tile % mult != 0:
        raise ValueError(f"tile {tile} not divisible by 2**stages = {mult}")
    if not 0 <= overlap < tile / 2:
        raise ValueError(f"overlap must satisfy 0 <= overlap < tile/2, got {overlap}")
    n, c, h, w = image.shape
    if tile >= h and tile >= w:
        out = model(image)
        return out[0] if squeeze else out

    plan, weight_sum = tile_plan(h, w, tile, overlap)
    acc = torch.zeros((n, c, h, w), dtype=torch.float64)
    with torch.no_grad():
        for y, x, weight in plan:
            patch = image[..., y : y + tile, x : x + tile]
            pred = model(patch).double()
            norm = weight / weight_sum[y : y + tile, x : x + tile]
            acc[..., y : y + tile, x : x + tile] += pred * torch.from_numpy(norm)
    out = acc.to(image.dtype)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    rows: List[dict]
    aggregates: dict
    protocol: dict

    def to_json(self, path):
        Path(path).write_text(json.dumps({
            "rows": self.rows,
            "aggregates": self.aggregates,
            "protocol": self.protocol,
        }, indent=1, sort_keys=True))

    def to_csv(self, path):
        columns = ["id", "psnr", "ssim", "lab_shadow", "lab_free", "lab_total",
                   "perceptual"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in self.rows:
                writer.writerow([_csv_cell(row.get(c)) for c in columns])
            agg = dict(self.aggregates, id="aggregate")
            writer.writerow([_csv_cell(agg.get(c)) for c in columns])


def _csv_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return value


def aggregate_rows(rows) -> dict:
    """Arithmetic means per metric; non-finite and unavailable entries are
    excluded from the mean and reported in the counts."""
    keys = ["psnr", "ssim", "lab_shadow", "lab_free", "lab_total", "perceptual"]
    agg = {"rows": len(rows)}
    for key in keys:
        values = [r[key] for r in rows if r.get(key) is not None]
        finite = [v for v in values if math.isfinite(v)]
        if not values:
            agg[key] = None
            continue
        if finite:
            agg[key] = float(np.mean(finite))
        else:
            # every row hit the sentinel (identical images): report it as such
            agg[key] = float("inf") if key == "psnr" else None
        agg[f"{key}_counted"] = len(finite)
    return agg


class _IdentityModel:
    def __call__(self, x):
        return x.clone()

    def eval(self):
        return self


def evaluate(model, dataset, protocol: str = "rgb", loss_cfg: LossConfig = LossConfig(),
             lab_mode: str = "mae_lab", scorer_cmd: Optional[str] = None,
             tile: Optional[int] = None, tile_overlap: int = 16) -> EvalReport:
    """Score a model (or ``"identity"`` for unprocessed inputs) over a dataset.

    ``rgb`` reports PSNR/SSIM (plus the external perceptual score when a
    scorer is configured); ``lab_istd`` adds the region-masked Lab error and
    requires every pair to carry a mask.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    descriptors = list(dataset)
    if protocol == "lab_istd":
        missing = [
            getattr(d, "stem", getattr(d, "meta", {}).get("scene_id", "?"))
            for d in descriptors
            if (d.mask_path if hasattr(d, "mask_path") else d.mask) is None
        ]
        if missing:
            raise ValueError(
                f"lab_istd protocol needs masks for every pair; missing: {missing}"
            )

    net = _IdentityModel() if model == "identity" else model
    net.eval()
    rows = []
    for desc in descriptors:
        sample = desc.load() if hasattr(desc, "load") else desc
        x = sample.input.unsqueeze(0)
        with torch.no_grad():
            pred = (infer_tiled(net, x, tile, tile_overlap)
                    if tile and not isinstance(net, _IdentityModel) else net(x))
        gt = sample.gt.unsqueeze(0)
        row = {
            "id": sample.meta.get("scene_id", "?"),
            "psnr": psnr(pred, gt),
            "ssim": float(ssim(pred, gt, loss_cfg).item()),
        }
        if protocol == "lab_istd":
            region = lab_region_error(pred, gt, sample.mask.unsqueeze(0), mode=lab_mode)
            row["lab_shadow"] = region.shadow
            row["lab_free"] = region.shadow_free
            row["lab_total"] = region.total
        if scorer_cmd:
            with tempfile.TemporaryDirectory() as tmp:
                pred_path = Path(tmp) / "pred.png"
                gt_path = Path(tmp) / "gt.png"
                save_image(pred_path, to_array(pred), np.uint16)
                save_image(gt_path, to_array(gt), np.uint16)
                row["perceptual"] = perceptual_score(pred_path, gt_path, scorer_cmd)
        rows.append(row)

    protocol_record = {
        "protocol": protocol,
        "lab_mode": lab_mode if protocol == "lab_istd" else None,
        "resolution": "native",
        "tile": {"size": tile, "overlap": tile_overlap} if tile else None,
        "model": "identity" if model == "identity" else "checkpoint",
        "ssim_window": loss_cfg.ssim_window,
        "perceptual_scorer": scorer_cmd or None,
    }
    return EvalReport(rows=rows, aggregates=aggregate_rows(rows), protocol=protocol_record)


def evaluate_checkpoint(checkpoint_path, dataset, **kwargs) -> EvalReport:
    if checkpoint_path == "identity":
        return evaluate("identity", dataset, **kwargs)
    model, _ = load_checkpoint(checkpoint_path)
    return evaluate(model, dataset, **kwargs)
