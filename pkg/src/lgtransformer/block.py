"""Local-to-Global attention block and the plain single-path (Swin-style) block.

An LG block runs one window-attention path on the normalised input and one on
each bilinearly downsampled copy of it, upsamples the path outputs back, and
sums them together with the block input before the MLP::

    y   = LN1(x)
    z_o = SWMSA_0(y)
    z_i = SWMSA_i(BD_i(y))                for each extra scale
    z   = z_o + sum_i BU_i(z_i) + x
    out = MLP(LN2(z)) + z
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import WindowAttentionParams, w_msa
from .errors import ConfigError, ShapeError
from .nn import LayerNormParams, LinearParams, bilinear_resample, crop_hw, drop_path, layer_norm, mlp, pad_hw
from .tensor import Tensor


@dataclass
class LGBlockParams:
    ln1: LayerNormParams
    path_attn: list[WindowAttentionParams]
    path_scales: list[int]  # downsample factors relative to the block input; [0] == 1
    ln2: LayerNormParams
    fc1: LinearParams
    fc2: LinearParams
    shift_phase: bool = False
    drop_path_rate: float = field(default=0.0, compare=False)

    def __post_init__(self):
        scales = list(self.path_scales)
        if not scales or scales[0] != 1:
            raise ConfigError(f"path scales must start with the identity path 1, got {scales}")
        for a, b in zip(scales, scales[1:]):
            if b <= a:
                raise ConfigError(f"path scales must be strictly increasing, got {scales}")
        for s in scales:
            if s & (s - 1):
                raise ConfigError(f"path scale {s} is not a power of two")
        if len(self.path_attn) != len(scales):
            raise ConfigError(f"{len(self.path_attn)} attention parameter sets for {len(scales)} paths")
        seen: set[int] = set()
        for attn in self.path_attn:
            ids = {id(t) for t in (attn.qkv.weight, attn.qkv.bias, attn.proj.weight, attn.proj.bias, attn.rel_pos_bias)}
            if ids & seen:
                raise ConfigError("attention paths must not share parameter tensors")
            seen |= ids

    @property
    def window(self) -> int:
        return self.path_attn[0].window


def path_size(h: int, w: int, scale: int) -> tuple[int, int]:
    """Spatial size of a path's downsampled map."""
    return math.ceil(h / scale), math.ceil(w / scale)


def effective_window(h: int, w: int, window: int) -> int:
    """Window actually used on an ``h x w`` map: shrunk to the short side if smaller."""
    return min(window, h, w)


def padded_size(h: int, w: int, window: int) -> tuple[int, int]:
    """Map size after bottom/right padding to whole windows of ``effective_window``."""
    m = effective_window(h, w, window)
    return math.ceil(h / m) * m, math.ceil(w / m) * m


def path_attention(y: Tensor, attn: WindowAttentionParams, shift_phase: bool) -> Tensor:
    """SW-MSA on ``y[..., h, w, C]``.

    Maps whose short side is below the window attend with a window of that
    side instead; the map is zero-padded bottom/right to whole windows and
    cropped afterwards.  The shift is skipped when the short side fits in a
    single window.
    """
    h, w = y.shape[-3], y.shape[-2]
    m = effective_window(h, w, attn.window)
    hp, wp = padded_size(h, w, attn.window)
    shifted = shift_phase and min(hp, wp) > m
    out = w_msa(pad_hw(y, hp, wp), attn, shifted=shifted, window=m)
    return crop_hw(out, h, w)


def aggregate_paths(z_o: Tensor, z_d: list[Tensor], x: Tensor) -> Tensor:
    """Unweighted sum of the identity path, the upsampled paths and the residual."""
    for t in (*z_d, x):
        if t.shape != z_o.shape:
            raise ShapeError(f"path output {t.shape} does not match {z_o.shape}")
    return T.add_n([z_o, *z_d, x])


def lg_block_forward(
    x: Tensor,
    p: LGBlockParams,
    window: int | None = None,
    *,
    taps: dict | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One LG-Attention block on ``x[..., H, W, C]``.

    ``taps``, when given, receives each path's attention output at its own
    resolution (before upsampling), keyed by relative scale.
    """
    if window is not None and window != p.window:
        raise ConfigError(f"block built for window {p.window}, called with {window}")
    H, W = x.shape[-3], x.shape[-2]
    y = layer_norm(x, p.ln1)
    z_o = None
    z_d = []
    for scale, attn in zip(p.path_scales, p.path_attn):
        if scale == 1:
            z = path_attention(y, attn, p.shift_phase)
            z_o = z
        else:
            hs, ws = path_size(H, W, scale)
            z = path_attention(bilinear_resample(y, (hs, ws)), attn, p.shift_phase)
            z_d.append(bilinear_resample(z, (H, W)))
        if taps is not None:
            taps[scale] = z
    if p.drop_path_rate > 0 and rng is not None:
        branch = T.add_n([z_o, *z_d])
        zhat = drop_path(branch, p.drop_path_rate, rng) + x
        return zhat + drop_path(mlp(layer_norm(zhat, p.ln2), p.fc1, p.fc2), p.drop_path_rate, rng)
    zhat = aggregate_paths(z_o, z_d, x)
    return zhat + mlp(layer_norm(zhat, p.ln2), p.fc1, p.fc2)


def swin_block_forward(
    x: Tensor,
    p: LGBlockParams,
    window: int | None = None,
    *,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Single-path block: ``y = x + SWMSA(LN(x)); out = y + MLP(LN(y))``."""
    if len(p.path_scales) != 1:
        raise ConfigError(f"swin block takes exactly one path, got scales {p.path_scales}")
    if window is not None and window != p.window:
        raise ConfigError(f"block built for window {p.window}, called with {window}")
    a = path_attention(layer_norm(x, p.ln1), p.path_attn[0], p.shift_phase)
    y = drop_path(a, p.drop_path_rate, rng) + x
    return y + drop_path(mlp(layer_norm(y, p.ln2), p.fc1, p.fc2), p.drop_path_rate, rng)
