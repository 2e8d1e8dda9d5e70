"""Learned building blocks: band refinement, global context, and fusion.

LowFreqBlock and HighFreqBlock refine the two band paths, GlobalContextBlock
adds scene-level context (ConvNeXt-style units), and WindowCrossAttention
fuses image-domain and wavelet-domain high-frequency features through one
shared window-local affinity matrix.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    dropout_rate: float = 0.1
    negative_slope: float = 0.2
    num_experts: int = 4
    window_size: int = 8
    heads: int = 1

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError("channel counts must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")
        if self.num_experts < 1:
            raise ValueError(f"num_experts must be >= 1, got {self.num_experts}")
        if self.window_size < 1:
            raise ValueError(f"window_size must be >= 1, got {self.window_size}")


def conv2d_macs(cin, cout, k, h_out, w_out, groups=1):
    """Multiply-accumulates of one Conv2d application."""
    return cout * (cin // groups) * k * k * h_out * w_out


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of (N,C,H,W) tensors."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


class DynamicConv(nn.Module):
    """Depthwise 3x3 convolution with per-sample expert kernel mixing.

    A pooled descriptor routes softmax weights over ``num_experts`` candidate
    kernels; the mixed kernel is applied depthwise. With one expert this is a
    plain depthwise conv.
    """

    def __init__(self, channels, num_experts=4, kernel_size=3):
        super().__init__()
        self.channels = channels
        self.num_experts = num_experts
        self.kernel_size = kernel_size
        self.weight = nn.Parameter(
            torch.empty(num_experts, channels, kernel_size, kernel_size)
        )
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.router = nn.Linear(channels, num_experts)

    def mixture_weights(self, x):
        """(B, num_experts) softmax routing weights for a batch."""
        desc = x.mean(dim=(2, 3))
        return torch.softmax(self.router(desc), dim=1)

    def forward(self, x):
        b, c, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        mix = self.mixture_weights(x)  # (B, E)
        kernels = torch.einsum("be,eckl->bckl", mix, self.weight)
        kernels = kernels.reshape(b * c, 1, self.kernel_size, self.kernel_size)
        out = F.conv2d(
            x.reshape(1, b * c, h, w),
            kernels,
            padding=self.kernel_size // 2,
            groups=b * c,
        )
        return out.view(b, c, h, w)

    def macs(self, h, w):
        dw = conv2d_macs(self.channels, self.channels, self.kernel_size, h, w,
                         groups=self.channels)
        routing = self.channels * self.num_experts
        mixing = self.num_experts * self.channels * self.kernel_size**2
        return dw + routing + mixing


class LowFreqBlock(nn.Module):
    """Conv / BatchNorm / LeakyReLU / Dropout refinement of the low band.

    The second conv carries stride 2 when ``downsample`` is set so the output
    matches the pooled-branch resolution.
    """

    def __init__(self, cfg: BlockConfig, downsample=False):
        super().__init__()
        self.downsample = downsample
        self.conv1 = nn.Conv2d(cfg.in_channels, cfg.out_channels, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(cfg.out_channels)
        self.drop = nn.Dropout2d(cfg.dropout_rate)
        self.conv2 = nn.Conv2d(
            cfg.out_channels, cfg.out_channels, 3,
            stride=2 if downsample else 1, padding=1,
        )
        self.bn2 = nn.BatchNorm2d(cfg.out_channels)
        self.slope = cfg.negative_slope

    def forward(self, x):
        if x.shape[1] != self.conv1.in_channels:
            raise ValueError(
                f"LowFreqBlock expected {self.conv1.in_channels} channels, got {x.shape[1]}"
            )
        x = F.leaky_relu(self.bn1(self.conv1(x)), self.slope)
        x = self.drop(x)
        x = F.leaky_relu(self.bn2(self.conv2(x)), self.slope)
        return x

    def macs(self, h, w):
        m = conv2d_macs(self.conv1.in_channels, self.conv1.out_channels, 3, h, w)
        if self.downsample:
            h, w = h // 2, w // 2
        m += conv2d_macs(self.conv2.in_channels, self.conv2.out_channels, 3, h, w)
        return m


class HighFreqBlock(nn.Module):
    """LayerNorm / 1x1 conv / dynamic conv / BatchNorm / LeakyReLU / Dropout."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.norm = ChannelLayerNorm(cfg.in_channels)
        self.proj = nn.Conv2d(cfg.in_channels, cfg.out_channels, 1)
        self.dynconv = DynamicConv(cfg.out_channels, cfg.num_experts)
        self.bn = nn.BatchNorm2d(cfg.out_channels)
        self.drop = nn.Dropout2d(cfg.dropout_rate)
        self.slope = cfg.negative_slope

    def forward(self, x):
        if x.shape[1] != self.proj.in_channels:
            raise ValueError(
                f"HighFreqBlock expected {self.proj.in_channels} channels, got {x.shape[1]}"
            )
        x = self.proj(self.norm(x))
        x = self.dynconv(x)
        x = F.leaky_relu(self.bn(x), self.slope)
        return self.drop(x)

    def macs(self, h, w):
        m = conv2d_macs(self.proj.in_channels, self.proj.out_channels, 1, h, w)
        m += self.dynconv.macs(h, w)
        return m


class ConvNeXtUnit(nn.Module):
    """7x7 depthwise conv, channel norm, 4x pointwise expansion, GELU, project."""

    def __init__(self, channels):
        super().__init__()
        self.dwconv = nn.Conv2d(channels, channels, 7, padding=3, groups=channels)
        self.norm = ChannelLayerNorm(channels)
        self.expand = nn.Conv2d(channels, channels * 4, 1)
        self.project = nn.Conv2d(channels * 4, channels, 1)

    def forward(self, x):
        y = self.norm(self.dwconv(x))
        y = self.project(F.gelu(self.expand(y)))
        return x + y

    def macs(self, h, w):
        c = self.dwconv.in_channels
        return (
            conv2d_macs(c, c, 7, h, w, groups=c)
            + conv2d_macs(c, 4 * c, 1, h, w)
            + conv2d_macs(4 * c, c, 1, h, w)
        )


class GlobalContextBlock(nn.Module):
    """``depth`` residual ConvNeXt-style units; shape preserving."""

    def __init__(self, channels, depth=2):
        super().__init__()
        if depth < 1:
            raise ValueError(f"depth must be >= 1, got {depth}")
        self.units = nn.ModuleList(ConvNeXtUnit(channels) for _ in range(depth))

    def forward(self, x):
        for unit in self.units:
            x = unit(x)
        return x

    def macs(self, h, w):
        return sum(u.macs(h, w) for u in self.units)


class WindowCrossAttention(nn.Module):
    """Cross-attention between image and frequency features, shared affinity.

    Inside non-overlapping spatial windows, one affinity matrix
    M = row-softmax(Q(h) K(f)^T / sqrt(d)) improves both streams:
    h_e = h + proj(M V(f)) and f_e = f + proj(M~ V(h)), where M~ is the
    transpose of M renormalized to row-stochastic. The enhanced pair is
    merged by concat / 1x1 conv / ReLU into the fused high-frequency output.

    Feature maps whose sides are not multiples of the window are padded
    (reflect) for the attention and cropped back; windows clamp to the map
    when it is smaller than the configured size.
    """

    def __init__(self, img_channels, freq_channels, out_channels,
                 window_size=8, heads=1, dim=None):
        super().__init__()
        if window_size < 1:
            raise ValueError(f"window_size must be >= 1, got {window_size}")
        dim = dim or img_channels
        if dim % heads != 0:
            raise ValueError(f"attention dim {dim} not divisible by heads {heads}")
        self.window_size = window_size
        self.heads = heads
        self.dim = dim
        self.q = nn.Conv2d(img_channels, dim, 1)
        self.k = nn.Conv2d(freq_channels, dim, 1)
        self.v_img = nn.Conv2d(img_channels, dim, 1)
        self.v_freq = nn.Conv2d(freq_channels, dim, 1)
        self.proj_img = nn.Conv2d(dim, img_channels, 1)
        self.proj_freq = nn.Conv2d(dim, freq_channels, 1)
        self.fuse = nn.Conv2d(img_channels + freq_channels, out_channels, 1)

    def _window_geometry(self, h, w):
        wh = min(self.window_size, h)
        ww = min(self.window_size, w)
        ph = (-h) % wh
        pw = (-w) % ww
        return wh, ww, ph, pw

    @staticmethod
    def _partition(x, wh, ww):
        # (N,C,H,W) -> (N*nW, C, wh*ww) token windows
        n, c, h, w = x.shape
        x = x.view(n, c, h // wh, wh, w // ww, ww)
        x = x.permute(0, 2, 4, 1, 3, 5).reshape(-1, c, wh * ww)
        return x

    @staticmethod
    def _merge(x, n, c, h, w, wh, ww):
        x = x.view(n, h // wh, w // ww, c, wh, ww)
        x = x.permute(0, 3, 1, 4, 2, 5).reshape(n, c, h, w)
        return x

    def _validate(self, h_img, f_freq):
        if h_img.shape[-2:] != f_freq.shape[-2:]:
            raise ValueError(
                f"spatial dims differ: image {tuple(h_img.shape[-2:])} vs "
                f"frequency {tuple(f_freq.shape[-2:])}"
            )

    def _pad(self, x, ph, pw):
        if ph == 0 and pw == 0:
            return x
        h, w = x.shape[-2:]
        mode = "reflect" if ph < h and pw < w else "replicate"
        return F.pad(x, (0, pw, 0, ph), mode=mode)

    def _heads_split(self, tokens):
        # (B, dim, T) -> (B, heads, T, dh)
        b, _, t = tokens.shape
        return tokens.view(b, self.heads, self.dim // self.heads, t).transpose(2, 3)

    def affinity(self, h_img, f_freq):
        """Row-stochastic affinity per window: (B*nW, heads, T, T)."""
        self._validate(h_img, f_freq)
        h, w = h_img.shape[-2:]
        wh, ww, ph, pw = self._window_geometry(h, w)
        q = self._heads_split(self._partition(self._pad(self.q(h_img), ph, pw), wh, ww))
        k = self._heads_split(self._partition(self._pad(self.k(f_freq), ph, pw), wh, ww))
        scale = (self.dim // self.heads) ** -0.5
        return torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)

    def forward(self, h_img, f_freq):
        self._validate(h_img, f_freq)
        n, c_img, h, w = h_img.shape
        c_freq = f_freq.shape[1]
        wh, ww, ph, pw = self._window_geometry(h, w)
        hp, wp = h + ph, w + pw

        m = self.affinity(h_img, f_freq)
        v_f = self._heads_split(
            self._partition(self._pad(self.v_freq(f_freq), ph, pw), wh, ww)
        )
        v_h = self._heads_split(
            self._partition(self._pad(self.v_img(h_img), ph, pw), wh, ww)
        )
        # transpose of the shared affinity, renormalized to row-stochastic;
        # a fully ignored key underflows its column to zero, so the clamp
        # turns that row into no-contribution instead of NaN
        m_rev = m.transpose(-2, -1)
        m_rev = m_rev / m_rev.sum(dim=-1, keepdim=True).clamp_min(1e-12)

        att_h = (m @ v_f).transpose(2, 3).reshape(-1, self.dim, wh * ww)
        att_f = (m_rev @ v_h).transpose(2, 3).reshape(-1, self.dim, wh * ww)
        att_h = self._merge(att_h, n, self.dim, hp, wp, wh, ww)[..., :h, :w]
        att_f = self._merge(att_f, n, self.dim, hp, wp, wh, ww)[..., :h, :w]

        h_e = h_img + self.proj_img(att_h)
        f_e = f_freq + self.proj_freq(att_f)
        d_hf = F.relu(self.fuse(torch.cat([h_e, f_e], dim=1)))
        return h_e, f_e, d_hf

    def macs(self, h, w):
        wh, ww, ph, pw = self._window_geometry(h, w)
        hp, wp = h + ph, w + pw
        n_windows = (hp // wh) * (wp // ww)
        t = wh * ww
        c_img = self.q.in_channels
        c_freq = self.k.in_channels
        m = conv2d_macs(c_img, self.dim, 1, h, w)  # q
        m += conv2d_macs(c_freq, self.dim, 1, h, w)  # k
        m += conv2d_macs(c_img, self.dim, 1, h, w)  # v_img
        m += conv2d_macs(c_freq, self.dim, 1, h, w)  # v_freq
        m += 3 * n_windows * t * t * self.dim  # QK^T plus two aggregations
        m += conv2d_macs(self.dim, c_img, 1, h, w)
        m += conv2d_macs(self.dim, c_freq, 1, h, w)
        m += conv2d_macs(c_img + c_freq, self.fuse.out_channels, 1, h, w)
        return m
