"""Deterministic, differentiable frequency and color kernels.

Single-level orthonormal Haar DWT/IDWT, pooling based low/high band
splitting, and sRGB -> CIELAB conversion. Everything here is a pure
function of its inputs and safe for autograd.
"""

import math
from typing import NamedTuple

import torch
import torch.nn.functional as F


class FrequencyBands(NamedTuple):
    """One Haar level: ``ll`` (N,C,H/2,W/2) and ``high`` (N,3C,H/2,W/2).

    ``high`` stacks the LH, HL, HH detail bands along channels, in that order.
    """

    ll: torch.Tensor
    high: torch.Tensor


def _haar_kernels(channels, dtype, device):
    # Orthonormal convention: each analysis kernel has weight 1/2 per tap.
    ll = torch.tensor([[1.0, 1.0], [1.0, 1.0]], dtype=dtype, device=device)
    lh = torch.tensor([[1.0, 1.0], [-1.0, -1.0]], dtype=dtype, device=device)
    hl = torch.tensor([[1.0, -1.0], [1.0, -1.0]], dtype=dtype, device=device)
    hh = torch.tensor([[1.0, -1.0], [-1.0, 1.0]], dtype=dtype, device=device)
    k = torch.stack([ll, lh, hl, hh]) * 0.5
    return k.view(4, 1, 2, 2).repeat(channels, 1, 1, 1)


def haar_dwt(x: torch.Tensor) -> FrequencyBands:
    """Single-level orthonormal Haar transform of an (N,C,H,W) tensor.

    Per non-overlapping 2x2 block [[a,b],[c,d]]:
    LL=(a+b+c+d)/2, LH=(a+b-c-d)/2, HL=(a-b+c-d)/2, HH=(a-b-c+d)/2.
    """
    if x.dim() != 4:
        raise ValueError(f"expected (N,C,H,W) input, got shape {tuple(x.shape)}")
    n, c, h, w = x.shape
    if h % 2 != 0:
        raise ValueError(f"height must be even for the Haar transform, got H={h}")
    if w % 2 != 0:
        raise ValueError(f"width must be even for the Haar transform, got W={w}")
    k = _haar_kernels(c, x.dtype, x.device)
    out = F.conv2d(x, k, stride=2, groups=c)  # (N, 4C, H/2, W/2)
    out = out.view(n, c, 4, h // 2, w // 2)
    ll = out[:, :, 0]
    # channel order (LH, HL, HH) grouped per band, not per source channel
    high = out[:, :, 1:].permute(0, 2, 1, 3, 4).reshape(n, 3 * c, h // 2, w // 2)
    return FrequencyBands(ll=ll, high=high)


def haar_idwt(bands: FrequencyBands) -> torch.Tensor:
    """Exact inverse of :func:`haar_dwt` under the same convention."""
    ll, high = bands
    n, c, h2, w2 = ll.shape
    if high.shape[1] != 3 * c:
        raise ValueError(
            f"high band must have 3x the ll channels: got {high.shape[1]} vs ll {c}"
        )
    if high.shape[-2:] != ll.shape[-2:]:
        raise ValueError(
            f"band spatial dims differ: ll {tuple(ll.shape[-2:])} vs high {tuple(high.shape[-2:])}"
        )
    lh, hl, hh = high.view(n, 3, c, h2, w2).unbind(1)
    stacked = torch.stack([ll, lh, hl, hh], dim=2).reshape(n, 4 * c, h2, w2)
    k = _haar_kernels(c, ll.dtype, ll.device)
    return F.conv_transpose2d(stacked, k, stride=2, groups=c)


def lowhigh_split(x: torch.Tensor, kernel: int, stride: int):
    """Split into (low, high) = (avg pooled, max pooled) with one geometry.

    stride 1 keeps the resolution (same padding); stride 2 halves it.
    """
    if x.dim() != 4:
        raise ValueError(f"expected (N,C,H,W) input, got shape {tuple(x.shape)}")
    if kernel < 1:
        raise ValueError(f"kernel must be >= 1, got {kernel}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    h, w = x.shape[-2:]
    if h % stride != 0:
        raise ValueError(f"height {h} not divisible by stride {stride}")
    if w % stride != 0:
        raise ValueError(f"width {w} not divisible by stride {stride}")
    pad = (kernel - 1) // 2
    low = F.avg_pool2d(x, kernel, stride=stride, padding=pad, count_include_pad=False)
    high = F.max_pool2d(x, kernel, stride=stride, padding=pad)
    return low, high


# sRGB (D65, 2 degree observer) -> XYZ. Rows sum exactly to the white point
# so that (1,1,1) maps to L=100, a=b=0 by construction.
_RGB_TO_XYZ = (
    (0.4124564, 0.3575761, 0.1804375),
    (0.2126729, 0.7151522, 0.0721750),
    (0.0193339, 0.1191920, 0.9503041),
)
_WHITE = (
    sum(_RGB_TO_XYZ[0]),
    sum(_RGB_TO_XYZ[1]),
    sum(_RGB_TO_XYZ[2]),
)
_LAB_EPS = 0.008856
_LAB_KAPPA = 7.787


def srgb_to_lab(x: torch.Tensor) -> torch.Tensor:
    """Convert (N,3,H,W) sRGB in [0,1] to CIELAB (L in [0,100]).

    Gamma expansion with the 0.04045 threshold, D65 white point, and the
    0.008856 / 7.787 piecewise cube root. Differentiable away from the
    piecewise seams.
    """
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (N,3,H,W) sRGB input, got shape {tuple(x.shape)}")
    x = x.clamp(0.0, 1.0)
    lin = torch.where(
        x > 0.04045,
        ((x.clamp(min=0.04045) + 0.055) / 1.055) ** 2.4,
        x / 12.92,
    )
    m = lin.new_tensor(_RGB_TO_XYZ)
    xyz = torch.einsum("ij,njhw->nihw", m, lin)
    white = lin.new_tensor(_WHITE).view(1, 3, 1, 1)
    t = xyz / white
    f = torch.where(
        t > _LAB_EPS,
        t.clamp(min=_LAB_EPS) ** (1.0 / 3.0),
        _LAB_KAPPA * t + 16.0 / 116.0,
    )
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    lum = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    return torch.stack([lum, a, b], dim=1)


def reflect_pad_to_multiple(x: torch.Tensor, multiple: int):
    """Reflection-pad H and W up to the next multiple; returns (padded, (h, w))."""
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)
