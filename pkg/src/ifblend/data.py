"""Dataset readers, patch sampling, synthetic pairs, and pair auditing.

Two on-disk layouts are understood. The native one keeps ``input/``, ``gt/``
and optionally ``mask/`` and ``meta/`` trees under each split; the classic
shadow-removal benchmark layout keeps ``A`` (input), ``B`` (mask), ``C``
(ground truth). Pairs are matched by filename stem and loaded lazily.

The synthetic generator builds evenly lit scenes and darkens them with
soft-edged occlusion maps, one per light, multiplied together so overlapping
shadows deepen each other. It is bit-deterministic per seed, which makes
desk-scale training and pipeline tests reproducible.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import cv2
import numpy as np
import torch

log = logging.getLogger(__name__)

LAYOUTS = ("ambient6k", "istd")

MASK_THRESHOLD = 0.98  # attenuation below this counts as shadow


def load_image(path):
    """Decode an 8/16-bit PNG to float32 [0,1]; color returned as HxWx3 RGB."""
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise IOError(f"unreadable image: {path}")
    if arr.dtype == np.uint8:
        out = arr.astype(np.float32) / 255.0
    elif arr.dtype == np.uint16:
        out = arr.astype(np.float32) / 65535.0
    else:
        raise IOError(f"unsupported image dtype {arr.dtype}: {path}")
    if out.ndim == 3:
        if out.shape[2] == 4:
            out = out[:, :, :3]
        out = out[:, :, ::-1].copy()  # BGR -> RGB
    return out, arr.dtype


def save_image(path, array, dtype=np.uint8):
    """Write float [0,1] HxW or HxWx3 (RGB) data as an 8- or 16-bit PNG."""
    arr = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    peak = 255.0 if dtype == np.uint8 else 65535.0
    arr = np.round(arr * peak).astype(dtype)
    if arr.ndim == 3:
        arr = arr[:, :, ::-1]  # RGB -> BGR
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), arr):
        raise IOError(f"failed to write image: {path}")


def to_tensor(hwc):
    if hwc.ndim == 2:
        return torch.from_numpy(hwc).unsqueeze(0)
    return torch.from_numpy(hwc).permute(2, 0, 1).contiguous()


def to_array(chw):
    t = chw.detach().cpu().float()
    if t.dim() == 4:
        t = t[0]
    if t.shape[0] == 1:
        return t[0].numpy()
    return t.permute(1, 2, 0).numpy()


@dataclass
class PairedSample:
    input: torch.Tensor
    gt: torch.Tensor
    mask: Optional[torch.Tensor]
    meta: dict = field(default_factory=dict)


@dataclass
class PairDescriptor:
    """Lazy handle to one input/gt(/mask) pair on disk."""

    stem: str
    input_path: Path
    gt_path: Path
    mask_path: Optional[Path] = None
    meta_path: Optional[Path] = None

    def load(self) -> PairedSample:
        inp, _ = load_image(self.input_path)
        gt, _ = load_image(self.gt_path)
        if inp.shape[:2] != gt.shape[:2]:
            raise ValueError(
                f"pair {self.stem}: size mismatch, input {inp.shape[:2]} vs gt {gt.shape[:2]}"
            )
        mask = None
        if self.mask_path is not None:
            m, _ = load_image(self.mask_path)
            if m.ndim == 3:
                m = m.mean(axis=2)
            if m.shape != inp.shape[:2]:
                raise ValueError(
                    f"pair {self.stem}: mask size {m.shape} does not match images"
                )
            mask = to_tensor((m > 0.5).astype(np.float32))
        meta = {"scene_id": self.stem,
                "source_paths": [str(self.input_path), str(self.gt_path)]}
        if self.meta_path is not None and self.meta_path.exists():
            meta.update(json.loads(self.meta_path.read_text()))
        if not np.isfinite(inp).all() or not np.isfinite(gt).all():
            raise ValueError(f"pair {self.stem}: non-finite pixel values")
        return PairedSample(input=to_tensor(inp), gt=to_tensor(gt), mask=mask, meta=meta)


def _stems(directory: Path) -> dict:
    exts = {".png", ".PNG"}
    return {p.stem: p for p in sorted(directory.iterdir())
            if p.is_file() and p.suffix in exts}


def _pair_stems(a: dict, b: dict, what_a: str, what_b: str):
    only_a = sorted(set(a) - set(b))
    only_b = sorted(set(b) - set(a))
    if only_a or only_b:
        raise ValueError(
            f"unpaired files: {what_a} without {what_b}: {only_a}; "
            f"{what_b} without {what_a}: {only_b}"
        )


def read_dataset(root, layout: str, split: str) -> List[PairDescriptor]:
    """List pair descriptors for one split, ordered by filename stem.

    ``root/<split>/`` is used when it exists, otherwise ``root`` itself is
    treated as the split directory (the shape the synthetic writer emits).
    """
    if layout not in LAYOUTS:
        raise ValueError(f"layout must be one of {LAYOUTS}, got {layout!r}")
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root does not exist: {root}")
    base = root / split if (root / split).is_dir() else root

    if layout == "ambient6k":
        in_dir, gt_dir = base / "input", base / "gt"
        if not in_dir.is_dir() and not gt_dir.is_dir():
            log.warning("split %s under %s holds no input/gt trees; empty dataset", split, base)
            return []
        if not (in_dir.is_dir() and gt_dir.is_dir()):
            raise FileNotFoundError(f"{base} does not match the input/gt layout")
        inputs, gts = _stems(in_dir), _stems(gt_dir)
        _pair_stems(inputs, gts, "input", "gt")
        mask_dir = base / "mask"
        masks = _stems(mask_dir) if mask_dir.is_dir() else {}
        meta_dir = base / "meta"
        return [
            PairDescriptor(
                stem=stem,
                input_path=inputs[stem],
                gt_path=gts[stem],
                mask_path=masks.get(stem),
                meta_path=(meta_dir / f"{stem}.json") if meta_dir.is_dir() else None,
            )
            for stem in sorted(inputs)
        ]

    a_dir, b_dir, c_dir = base / "A", base / "B", base / "C"
    if not a_dir.is_dir() and not c_dir.is_dir():
        log.warning("split %s under %s holds no A/C trees; empty dataset", split, base)
        return []
    if not (a_dir.is_dir() and c_dir.is_dir()):
        raise FileNotFoundError(f"{base} does not match the A/B/C layout")
    inputs, gts = _stems(a_dir), _stems(c_dir)
    _pair_stems(inputs, gts, "A", "C")
    masks = _stems(b_dir) if b_dir.is_dir() else {}
    if masks:
        _pair_stems(inputs, masks, "A", "B")
    return [
        PairDescriptor(
            stem=stem,
            input_path=inputs[stem],
            gt_path=gts[stem],
            mask_path=masks.get(stem),
        )
        for stem in sorted(inputs)
    ]


def sample_patch(s: PairedSample, size: int, rng: np.random.Generator,
                 flip: bool = True) -> PairedSample:
    """Crop the same window from input/gt/mask, optionally h-flipping all."""
    h, w = s.input.shape[-2:]
    if size > min(h, w):
        raise ValueError(f"patch size {size} exceeds image dims {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    do_flip = flip and rng.random() < 0.5

    def cut(t):
        if t is None:
            return None
        out = t[..., top : top + size, left : left + size]
        return torch.flip(out, dims=[-1]) if do_flip else out

    return PairedSample(
        input=cut(s.input), gt=cut(s.gt), mask=cut(s.mask), meta=dict(s.meta)
    )


@dataclass
class SyntheticSceneSpec:
    seed: int
    size: tuple = (64, 64)
    num_lights: int = 2
    penumbra_sigma: float = 3.0
    min_attenuation: float = 0.35

    def __post_init__(self):
        if not 1 <= self.num_lights <= 3:
            raise ValueError(f"num_lights must be in [1,3], got {self.num_lights}")
        if not 0.0 < self.min_attenuation <= 1.0:
            raise ValueError(
                f"min_attenuation must be in (0,1], got {self.min_attenuation}"
            )
        if self.penumbra_sigma <= 0:
            raise ValueError("penumbra_sigma must be positive")


def _scene_background(rng, h, w):
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    base = rng.uniform(0.3, 0.7, size=3)
    slope = rng.uniform(-0.3, 0.3, size=3)
    return base[None, None, :] + slope[None, None, :] * ramp[:, :, None]


def _paint_shapes(rng, img):
    h, w = img.shape[:2]
    for _ in range(int(rng.integers(3, 7))):
        color = tuple(float(c) for c in rng.uniform(0.05, 0.95, size=3))
        cx, cy = int(rng.integers(0, w)), int(rng.integers(0, h))
        if rng.random() < 0.5:
            dx, dy = int(rng.integers(w // 8, w // 2)), int(rng.integers(h // 8, h // 2))
            cv2.rectangle(img, (cx - dx // 2, cy - dy // 2),
                          (cx + dx // 2, cy + dy // 2), color, thickness=-1)
        else:
            axes = (int(rng.integers(w // 10, w // 3)), int(rng.integers(h // 10, h // 3)))
            angle = float(rng.uniform(0, 180))
            cv2.ellipse(img, (cx, cy), axes, angle, 0, 360, color, thickness=-1)
    return img


def _band_limited_texture(rng, h, w):
    low = rng.standard_normal((max(2, h // 8), max(2, w // 8), 3))
    tex = cv2.resize(low, (w, h), interpolation=cv2.INTER_CUBIC)
    return 0.04 * tex


def _occlusion_map(rng, h, w, sigma):
    pts = rng.uniform([0, 0], [w, h], size=(int(rng.integers(4, 9)), 2)).astype(np.float32)
    center = np.array([w, h]) * rng.uniform(0.2, 0.8, size=2)
    spread = rng.uniform(0.25, 0.6)
    pts = (center + (pts - pts.mean(axis=0)) * spread).astype(np.float32)
    hull = cv2.convexHull(pts.astype(np.int32))
    occ = np.zeros((h, w), dtype=np.float32)
    cv2.fillConvexPoly(occ, hull, 1.0)
    return cv2.GaussianBlur(occ, (0, 0), sigmaX=float(sigma))


def generate_synthetic(spec: SyntheticSceneSpec) -> PairedSample:
    """Deterministic paired sample with the exact shadow mask.

    gt lives in [0.1, 0.95]; input = gt times the product of per-light
    attenuation maps (each in [min_attenuation, 1]); the mask marks every
    pixel whose combined attenuation drops below 0.98.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    scene = _scene_background(rng, h, w)
    scene = _paint_shapes(rng, np.ascontiguousarray(scene))
    scene = scene + _band_limited_texture(rng, h, w)
    lo, hi = scene.min(), scene.max()
    gt = 0.1 + 0.85 * (scene - lo) / max(hi - lo, 1e-8)

    att = np.ones((h, w), dtype=np.float64)
    for _ in range(spec.num_lights):
        strength = float(rng.uniform(spec.min_attenuation, 1.0))
        occ = _occlusion_map(rng, h, w, spec.penumbra_sigma)
        att *= 1.0 - (1.0 - strength) * occ.astype(np.float64)

    inp = gt * att[:, :, None]
    mask = (att < MASK_THRESHOLD).astype(np.float32)
    meta = {
        "scene_id": f"synth-{spec.seed}",
        "lights": f"{spec.num_lights} directional",
        "source_paths": [],
    }
    return PairedSample(
        input=to_tensor(inp.astype(np.float32)),
        gt=to_tensor(gt.astype(np.float32)),
        mask=to_tensor(mask),
        meta=meta,
    )


@dataclass
class AuditRow:
    stem: str
    ok: bool
    error: str = ""
    dims_equal: bool = True
    mean_brightness_delta: float = 0.0
    frac_brighter_than_gt: float = 0.0
    shift: tuple = (0, 0)
    flags: list = field(default_factory=list)


@dataclass
class AuditReport:
    rows: List[AuditRow]

    @property
    def flagged(self):
        return [r for r in self.rows if r.flags or not r.ok]

    def to_dict(self):
        return {
            "rows": [vars(r) for r in self.rows],
            "num_pairs": len(self.rows),
            "num_flagged": len(self.flagged),
        }


def _luma(arr):
    if arr.ndim == 2:
        return arr
    return 0.299 * arr[:, :, 0] + 0.587 * arr[:, :, 1] + 0.114 * arr[:, :, 2]


def estimate_shift(inp, gt, max_shift=8):
    """Integer displacement of gt relative to input, by exhaustive MSE search.

    Performed on luma, downsampled for large images (factor min(H,W)//256,
    at least 1); the returned (dy, dx) is in original pixels.
    """
    h, w = inp.shape[:2]
    factor = max(1, min(h, w) // 256)
    la, lb = _luma(inp), _luma(gt)
    if factor > 1:
        la = cv2.resize(la, (w // factor, h // factor), interpolation=cv2.INTER_AREA)
        lb = cv2.resize(lb, (w // factor, h // factor), interpolation=cv2.INTER_AREA)
    hh, ww = la.shape
    span = min(max_shift, hh // 4, ww // 4)
    best, best_err = (0, 0), None
    for dy in range(-span, span + 1):
        for dx in range(-span, span + 1):
            # candidate means gt[y+dy, x+dx] lines up with input[y, x]
            a = la[max(0, -dy) : hh + min(0, -dy), max(0, -dx) : ww + min(0, -dx)]
            b = lb[max(0, dy) : hh + min(0, dy), max(0, dx) : ww + min(0, dx)]
            err = float(np.mean((a - b) ** 2))
            # deterministic tie break favouring the smaller displacement
            key = (err, abs(dy) + abs(dx))
            if best_err is None or key < best_err:
                best_err, best = key, (dy, dx)
    return best[0] * factor, best[1] * factor


def audit_pairs(descriptors) -> AuditReport:
    """Per-pair diagnostics: dims, brightness direction, pixel alignment."""
    rows = []
    for desc in descriptors:
        try:
            inp, _ = load_image(desc.input_path)
            gt, _ = load_image(desc.gt_path)
        except Exception as exc:  # noqa: BLE001 - audit records and continues
            rows.append(AuditRow(stem=desc.stem, ok=False, error=str(exc)))
            continue
        row = AuditRow(stem=desc.stem, ok=True)
        row.dims_equal = inp.shape[:2] == gt.shape[:2]
        if not row.dims_equal:
            row.flags.append("dims")
            rows.append(row)
            continue
        row.mean_brightness_delta = float(inp.mean() - gt.mean())
        row.frac_brighter_than_gt = float(np.mean(_luma(inp) > _luma(gt) + 0.1))
        if row.frac_brighter_than_gt > 0.05:
            row.flags.append("brighter_than_gt")
        row.shift = estimate_shift(inp, gt)
        if max(abs(row.shift[0]), abs(row.shift[1])) >= 2:
            row.flags.append("misaligned")
        rows.append(row)
    return AuditReport(rows=rows)
