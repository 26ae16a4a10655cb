"""Layer primitives: linear, LayerNorm, GELU, softmax, MLP, resampling, windows."""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import PartitionError, ShapeError
from .tensor import Tensor, primitive, register_backward


@dataclass
class LinearParams:
    weight: Tensor  # [in_dim, out_dim]
    bias: Tensor  # [out_dim]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("LayerNorm eps must be positive")
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ShapeError(f"gamma {self.gamma.shape} / beta {self.beta.shape} must be equal 1-D")


def linear(x: Tensor, p: LinearParams) -> Tensor:
    if x.shape[-1] != p.in_dim:
        raise ShapeError(f"linear expects last dim {p.in_dim}, got {x.shape}")
    if x.ndim == 1:
        return T.reshape(T.matmul(T.reshape(x, (1, -1)), p.weight), (p.out_dim,)) + p.bias
    return T.matmul(x, p.weight) + p.bias


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    if x.shape[-1] != p.gamma.shape[0]:
        raise ShapeError(f"layer_norm over {p.gamma.shape[0]} channels, got input {x.shape}")
    mu = T.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = T.mean(xc * xc, axis=-1, keepdims=True)
    xhat = xc / T.sqrt(var + p.eps)
    return xhat * p.gamma + p.beta


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    inner = (x + 0.044715 * (x * x * x)) * _GELU_C
    return 0.5 * x * (1.0 + T.tanh(inner))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = T.as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return primitive("softmax", y, (x,), axis=axis)


@register_backward("softmax")
def _softmax_bw(node, g):
    y = node.out.data
    axis = node.ctx["axis"]
    return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = T.as_tensor(np.max(x.data, axis=axis, keepdims=True), dtype=x.dtype)
    z = x - shift
    return z - T.log(T.sum(T.exp(z), axis=axis, keepdims=True))


def mlp(x: Tensor, fc1: LinearParams, fc2: LinearParams) -> Tensor:
    if fc1.out_dim != fc2.in_dim or fc2.out_dim != x.shape[-1]:
        raise ShapeError(
            f"MLP chain {x.shape[-1]}->{fc1.in_dim}x{fc1.out_dim}->{fc2.in_dim}x{fc2.out_dim} does not line up"
        )
    return linear(gelu(linear(x, fc1)), fc2)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits[B, K]`` against integer ``labels[B]``."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    return -T.sum(logp * onehot) / len(labels)


# ---------------------------------------------------------------------------
# Bilinear resampling


@functools.lru_cache(maxsize=256)
def resample_weights(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix ``[n_out, n_in]`` with half-pixel sample centres.

    A triangle (tent) kernel whose radius is ``max(n_in / n_out, 1)`` input
    pixels: plain bilinear interpolation when upsampling, area-aware bilinear
    when downsampling so that every input pixel contributes.  Rows are
    normalised after truncating the kernel at the borders.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"resample sizes must be positive, got {n_in}->{n_out}")
    scale = n_in / n_out
    support = max(scale, 1.0)
    w = np.zeros((n_out, n_in))
    for j in range(n_out):
        center = (j + 0.5) * scale
        lo = max(int(center - support + 0.5), 0)
        hi = min(int(center + support + 0.5), n_in)
        k = np.arange(lo, hi)
        tri = np.clip(1.0 - np.abs((k - center + 0.5) / support), 0.0, None)
        w[j, lo:hi] = tri / tri.sum()
    w.setflags(write=False)
    return w


def _apply_along(r: np.ndarray, x: np.ndarray, axis: int) -> np.ndarray:
    out = np.tensordot(r, x, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def _resample_along(r: np.ndarray, x: np.ndarray, axis: int) -> np.ndarray:
    # x0 + R (x - x0) with x0 the first slice: equal to R x in exact
    # arithmetic, but a constant field stays bit-exactly constant because
    # the differences vanish before any weight touches them
    ref = np.take(x, [0], axis=axis)
    return _apply_along(r, x - ref, axis) + ref


def _effective_matrix(r: np.ndarray) -> np.ndarray:
    # the linear map actually applied by _resample_along
    m = np.array(r, dtype=np.float64)
    m[:, 0] += 1.0 - m.sum(axis=1)
    return m


def bilinear_resample(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Resize the spatial axes of ``x[..., H, W, C]`` to ``size``."""
    h_out, w_out = (int(s) for s in size)
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"resample target must be positive, got {size}")
    if x.ndim < 3:
        raise ShapeError(f"expected [..., H, W, C], got {x.shape}")
    h_in, w_in = x.shape[-3], x.shape[-2]
    if (h_in, w_in) == (h_out, w_out):
        return primitive("resample", x.data.copy(), (x,), ry=None, rx=None)
    ry = resample_weights(h_in, h_out).astype(x.dtype)
    rx = resample_weights(w_in, w_out).astype(x.dtype)
    out = _resample_along(rx, _resample_along(ry, x.data, x.ndim - 3), x.ndim - 2)
    return primitive("resample", np.ascontiguousarray(out), (x,), ry=ry, rx=rx)


@register_backward("resample")
def _resample_bw(node, g):
    ry, rx = node.ctx["ry"], node.ctx["rx"]
    if ry is None:
        return (g,)
    nd = g.ndim
    my = _effective_matrix(ry).astype(g.dtype)
    mx = _effective_matrix(rx).astype(g.dtype)
    return (np.ascontiguousarray(_apply_along(my.T, _apply_along(mx.T, g, nd - 2), nd - 3)),)


# ---------------------------------------------------------------------------
# Windows


def window_partition(x: Tensor, window: int) -> Tensor:
    """``[..., H, W, C]`` -> ``[..., nW, M, M, C]`` with windows in row-major order."""
    *lead, H, W, C = x.shape
    M = window
    if M < 1 or H % M or W % M:
        raise PartitionError(f"feature map {H}x{W} is not divisible by window {M}")
    n = len(lead)
    t = T.reshape(x, (*lead, H // M, M, W // M, M, C))
    t = T.permute(t, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return T.reshape(t, (*lead, (H // M) * (W // M), M, M, C))


def window_reverse(windows: Tensor, H: int, W: int) -> Tensor:
    *lead, nw, M, M2, C = windows.shape
    if M != M2 or H % M or W % M or nw != (H // M) * (W // M):
        raise PartitionError(f"{windows.shape} windows do not tile a {H}x{W} map")
    n = len(lead)
    t = T.reshape(windows, (*lead, H // M, W // M, M, M, C))
    t = T.permute(t, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    return T.reshape(t, (*lead, H, W, C))


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Roll the spatial axes of ``x[..., H, W, C]`` on the torus."""
    return T.roll(x, (dy, dx), (x.ndim - 3, x.ndim - 2))


def pad_hw(x: Tensor, H: int, W: int) -> Tensor:
    """Zero-pad ``x[..., h, w, C]`` on the bottom/right up to ``H x W``."""
    h, w = x.shape[-3], x.shape[-2]
    if H < h or W < w:
        raise ShapeError(f"cannot pad {h}x{w} down to {H}x{W}")
    widths = [(0, 0)] * (x.ndim - 3) + [(0, H - h), (0, W - w), (0, 0)]
    return T.pad(x, widths)


def crop_hw(x: Tensor, H: int, W: int) -> Tensor:
    if (x.shape[-3], x.shape[-2]) == (H, W):
        return x
    return x[..., :H, :W, :]


def drop_path(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Stochastic depth over the leading (sample) axis; identity when inactive."""
    if rate <= 0 or rng is None:
        return x
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.ndim - 1) if x.ndim > 3 else (1,) * x.ndim
    mask = (rng.random(shape) < keep).astype(x.dtype) / keep
    return x * T.as_tensor(mask, dtype=x.dtype)
