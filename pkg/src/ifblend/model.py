"""Encoder-decoder assembly with per-stage band routing.

Each encoder stage refines the low band (learned block plus an explicit Haar
level) and the high band (learned block plus a pooling split), then hands the
three per-stage features to the matching decoder stage, where the high-
frequency pair is fused by windowed cross-attention and added back onto the
decoded low path. A global residual keeps the network an identity at a zeroed
reconstruction head.
"""

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import (
    BlockConfig,
    GlobalContextBlock,
    HighFreqBlock,
    LowFreqBlock,
    WindowCrossAttention,
    conv2d_macs,
)
from .freqkernels import haar_dwt, lowhigh_split, reflect_pad_to_multiple

HIGH_PASS_MODES = ("maxpool", "residual")


@dataclass
class ModelConfig:
    stages: int = 4
    base_channels: int = 32
    channel_cap: int = 256
    use_dwt_feats: bool = True
    use_rgb_split: bool = True
    high_pass_mode: str = "maxpool"
    gcb_depth: int = 2
    window_size: int = 8
    heads: int = 1
    num_experts: int = 4
    dropout_rate: float = 0.1
    negative_slope: float = 0.2

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        if self.base_channels < 1 or self.channel_cap < self.base_channels:
            raise ValueError("need 1 <= base_channels <= channel_cap")
        if self.high_pass_mode not in HIGH_PASS_MODES:
            raise ValueError(
                f"high_pass_mode must be one of {HIGH_PASS_MODES}, got {self.high_pass_mode!r}"
            )

    def stage_width(self, stage):
        return min(self.base_channels * 2**stage, self.channel_cap)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class StageEncoding(NamedTuple):
    """Per-stage bundle: encoded low output, image-domain high band, Haar details."""

    l_lf: torch.Tensor
    h_hf: torch.Tensor
    f_hf: Optional[torch.Tensor]


def _branch_channels(cfg: ModelConfig):
    """(low_in, high_in) channel counts entering each stage, plus the final low width."""
    low = [cfg.base_channels]
    high = [cfg.base_channels]
    for s in range(cfg.stages):
        w = cfg.stage_width(s)
        l_next = w + (low[s] if cfg.use_dwt_feats else 0) + w
        low.append(l_next)
        high.append(w)
    return low, high


class EncoderStage(nn.Module):
    def __init__(self, cfg: ModelConfig, stage: int):
        super().__init__()
        low_ch, high_ch = _branch_channels(cfg)
        w = cfg.stage_width(stage)
        self.stage = stage
        self.use_dwt = cfg.use_dwt_feats
        self.high_pass_mode = cfg.high_pass_mode
        block = dict(dropout_rate=cfg.dropout_rate, negative_slope=cfg.negative_slope,
                     num_experts=cfg.num_experts)
        self.lfb = LowFreqBlock(BlockConfig(low_ch[stage], w, **block), downsample=True)
        self.hfb = HighFreqBlock(BlockConfig(high_ch[stage], w, **block))

    def forward(self, x_low, x_high) -> StageEncoding:
        if x_low.shape[-2:] != x_high.shape[-2:]:
            raise ValueError(
                f"stage {self.stage}: branch spatial dims differ, "
                f"{tuple(x_low.shape[-2:])} vs {tuple(x_high.shape[-2:])}"
            )
        r_lf = self.lfb(x_low)
        h_lf, h_hf = lowhigh_split(self.hfb(x_high), 2, 2)
        if self.high_pass_mode == "residual":
            h_hf = h_hf - h_lf
        if self.use_dwt:
            f_lf, f_hf = haar_dwt(x_low)
            l_lf = torch.cat([r_lf, f_lf, h_lf], dim=1)
        else:
            f_hf = None
            l_lf = torch.cat([r_lf, h_lf], dim=1)
        return StageEncoding(l_lf=l_lf, h_hf=h_hf, f_hf=f_hf)

    def macs(self, h, w):
        m = self.lfb.macs(h, w) + self.hfb.macs(h, w)
        if self.use_dwt:
            c = self.lfb.conv1.in_channels
            m += conv2d_macs(c, 4 * c, 2, h // 2, w // 2, groups=c)
        return m


class DecoderStage(nn.Module):
    def __init__(self, cfg: ModelConfig, stage: int, below_channels: int):
        super().__init__()
        low_ch, high_ch = _branch_channels(cfg)
        w = cfg.stage_width(stage)
        self.stage = stage
        self.deepest = stage == cfg.stages - 1
        self.use_dwt = cfg.use_dwt_feats
        self.out_channels = w
        block = dict(dropout_rate=cfg.dropout_rate, negative_slope=cfg.negative_slope,
                     num_experts=cfg.num_experts)
        self.lfb = LowFreqBlock(
            BlockConfig(low_ch[stage + 1] + below_channels, w, **block), downsample=False
        )
        if cfg.use_dwt_feats:
            self.wasam = WindowCrossAttention(
                img_channels=high_ch[stage + 1],
                freq_channels=3 * low_ch[stage],
                out_channels=w,
                window_size=cfg.window_size,
                heads=cfg.heads,
            )
        else:
            self.hfb = HighFreqBlock(BlockConfig(high_ch[stage + 1], w, **block))

    def forward(self, enc: StageEncoding, below=None):
        if below is None and not self.deepest:
            raise ValueError(
                f"stage {self.stage}: missing decoded input from the stage below"
            )
        d_in = enc.l_lf if below is None else torch.cat([enc.l_lf, below], dim=1)
        d_lf = self.lfb(d_in)
        if self.use_dwt:
            _, _, d_hf = self.wasam(enc.h_hf, enc.f_hf)
        else:
            d_hf = self.hfb(enc.h_hf)
        return d_hf + d_lf

    def macs(self, h, w):
        m = self.lfb.macs(h, w)
        m += self.wasam.macs(h, w) if self.use_dwt else self.hfb.macs(h, w)
        return m


class Upsampler(nn.Module):
    """Nearest x2 followed by a 3x3 conv; avoids checkerboard artifacts."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))

    def macs(self, h, w):
        return conv2d_macs(self.conv.in_channels, self.conv.out_channels, 3, 2 * h, 2 * w)


class IFBlend(nn.Module):
    """Image/frequency band-fusion restoration network.

    Forward takes (N,3,H,W) sRGB in [0,1] for any H, W (reflection padded to a
    multiple of ``2**stages`` internally, cropped back) and returns the same
    shape clamped to [0,1]. Output = clamp(input + head, 0, 1), so a zeroed
    head makes the model an exact identity.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        low_ch, _ = _branch_channels(cfg)
        self.stem = nn.Conv2d(3, cfg.base_channels, 3, padding=1)
        self.encoder = nn.ModuleList(
            EncoderStage(cfg, s) for s in range(cfg.stages)
        )
        self.gcb = GlobalContextBlock(low_ch[cfg.stages], depth=cfg.gcb_depth)
        self.decoder = nn.ModuleList(
            DecoderStage(
                cfg, s,
                below_channels=0 if s == cfg.stages - 1 else cfg.stage_width(s + 1),
            )
            for s in range(cfg.stages)
        )
        self.upsamplers = nn.ModuleList(
            Upsampler(cfg.stage_width(s), cfg.stage_width(s))
            for s in range(1, cfg.stages)
        )
        self.final_up = Upsampler(cfg.stage_width(0), cfg.base_channels)
        self.head = nn.Conv2d(cfg.base_channels, 3, 3, padding=1)

    def _split(self, x, kernel, stride):
        low, high = lowhigh_split(x, kernel, stride)
        if self.cfg.high_pass_mode == "residual":
            high = high - low
        return low, high

    def encode(self, x_padded):
        feat = self.stem(x_padded)
        if self.cfg.use_rgb_split:
            x_low, x_high = self._split(feat, 3, 1)
        else:
            x_low, x_high = feat, feat
        encodings = []
        for stage in self.encoder:
            enc = stage(x_low, x_high)
            encodings.append(enc)
            x_low, x_high = enc.l_lf, enc.h_hf
        return encodings

    def decode(self, encodings):
        deepest = encodings[-1]
        deepest = deepest._replace(l_lf=self.gcb(deepest.l_lf))
        below = None
        for s in range(self.cfg.stages - 1, -1, -1):
            enc = deepest if s == self.cfg.stages - 1 else encodings[s]
            out = self.decoder[s](enc, below)
            below = self.upsamplers[s - 1](out) if s > 0 else out
        return self.final_up(below)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N,3,H,W) input, got shape {tuple(x.shape)}")
        padded, (h, w) = reflect_pad_to_multiple(x, 2**self.cfg.stages)
        feat = self.decode(self.encode(padded))
        out = torch.clamp(padded + self.head(feat), 0.0, 1.0)
        return out[..., :h, :w]

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())

    def count_macs(self, h, w):
        """Analytic multiply-accumulate count of one forward pass at (h, w).

        Counts convolutions (the fixed Haar analysis included), attention
        products, and dynamic-kernel routing; pooling, norms, and activations
        are excluded.
        """
        mult = 2**self.cfg.stages
        hp, wp = h + (-h) % mult, w + (-w) % mult
        m = conv2d_macs(3, self.cfg.base_channels, 3, hp, wp)  # stem
        for s, stage in enumerate(self.encoder):
            m += stage.macs(hp // 2**s, wp // 2**s)
        m += self.gcb.macs(hp // mult, wp // mult)
        for s in range(self.cfg.stages - 1, -1, -1):
            m += self.decoder[s].macs(hp // 2 ** (s + 1), wp // 2 ** (s + 1))
            if s > 0:
                m += self.upsamplers[s - 1].macs(hp // 2 ** (s + 1), wp // 2 ** (s + 1))
        m += self.final_up.macs(hp // 2, wp // 2)
        m += conv2d_macs(self.cfg.base_channels, 3, 3, hp, wp)  # head
        return m


def count_macs(cfg: ModelConfig, h: int, w: int) -> int:
    return IFBlend(cfg).count_macs(h, w)


# ---------------------------------------------------------------------------
# Checkpoint archive: manifest.json + params.bin (little-endian float32
# buffers in manifest order) + config.json. Zip timestamps are pinned so
# identical states produce identical files.
# ---------------------------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _write_entry(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_checkpoint(model: IFBlend, path, meta=None):
    """Write the model state as a manifest + raw float32 buffer archive.

    Integer state (batch-norm step counters) is stored as float32 in the
    buffer -- exact for realistic counts -- and restored to its recorded
    dtype on load.
    """
    manifest = []
    buffers = io.BytesIO()
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        )
        buffers.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = {"model": model.cfg.to_dict(), "meta": meta or {}}
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        _write_entry(zf, "params.bin", buffers.getvalue())
        _write_entry(zf, "config.json", json.dumps(payload, indent=1, sort_keys=True))


def load_checkpoint(path):
    """Rebuild the model from an archive; returns (model, meta).

    Every manifest entry is validated against the instantiated model's state:
    unknown names, missing names, or shape mismatches all fail loudly.
    """
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        raw = zf.read("params.bin")
        payload = json.loads(zf.read("config.json"))
    cfg = ModelConfig.from_dict(payload["model"])
    model = IFBlend(cfg)
    state = model.state_dict()
    expected = set(state.keys())
    listed = [entry["name"] for entry in manifest]
    if set(listed) != expected:
        missing = sorted(expected - set(listed))
        unknown = sorted(set(listed) - expected)
        raise ValueError(
            f"checkpoint does not match the model: missing={missing} unknown={unknown}"
        )
    new_state = {}
    offset = 0
    for entry in manifest:
        shape = tuple(entry["shape"])
        current = state[entry["name"]]
        if tuple(current.shape) != shape:
            raise ValueError(
                f"shape mismatch for {entry['name']}: checkpoint {shape} "
                f"vs model {tuple(current.shape)}"
            )
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += count * 4
        tensor = torch.from_numpy(arr.copy())
        if entry["dtype"] != "float32":
            tensor = tensor.round().to(getattr(torch, entry["dtype"]))
        new_state[entry["name"]] = tensor
    if offset != len(raw):
        raise ValueError(
            f"buffer length mismatch: manifest accounts for {offset} bytes, "
            f"archive holds {len(raw)}"
        )
    model.load_state_dict(new_state)
    return model, payload.get("meta", {})
