"""Window multi-head self-attention (W-MSA / SW-MSA) with relative position bias."""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, PartitionError, ShapeError
from .nn import LinearParams, cyclic_shift, linear, softmax, window_partition, window_reverse
from .tensor import Tensor

# additive stand-in for -inf; exp() of it underflows to exactly 0
MASK_VALUE = {np.dtype(np.float32): -1e4, np.dtype(np.float64): -1e9}


@dataclass
class WindowAttentionParams:
    qkv: LinearParams  # [C, 3C]
    proj: LinearParams  # [C, C]
    rel_pos_bias: Tensor  # [(2M-1)^2, num_heads]
    num_heads: int
    window: int

    def __post_init__(self):
        C = self.qkv.in_dim
        if self.num_heads < 1 or C % self.num_heads:
            raise ConfigError(f"channels {C} not divisible by {self.num_heads} heads")
        if self.qkv.out_dim != 3 * C or self.proj.weight.shape != (C, C):
            raise ConfigError(f"qkv {self.qkv.weight.shape} / proj {self.proj.weight.shape} inconsistent with C={C}")
        expected = ((2 * self.window - 1) ** 2, self.num_heads)
        if self.rel_pos_bias.shape != expected:
            raise ConfigError(f"relative bias table {self.rel_pos_bias.shape}, expected {expected}")

    @property
    def dim(self) -> int:
        return self.qkv.in_dim

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def scale(self) -> float:
        return self.head_dim ** -0.5


@dataclass
class AttentionMask:
    mask: np.ndarray  # [numWin, M*M, M*M], entries 0 or MASK_VALUE
    window: int
    shift: int


@functools.lru_cache(maxsize=64)
def relative_position_index(M: int, table_window: int | None = None) -> np.ndarray:
    """``[M*M, M*M]`` index into the bias table of a ``table_window`` window.

    The table has ``(2K-1)^2`` rows for ``K = table_window`` (default ``M``),
    one per relative offset; a smaller window reads its central part.
    """
    K = M if table_window is None else table_window
    if M > K:
        raise ConfigError(f"window {M} exceeds bias table window {K}")
    ys, xs = np.divmod(np.arange(M * M), M)
    dy = ys[:, None] - ys[None, :] + K - 1
    dx = xs[:, None] - xs[None, :] + K - 1
    idx = dy * (2 * K - 1) + dx
    idx.setflags(write=False)
    return idx


def relative_bias_lookup(M: int, num_heads: int, table: Tensor, window: int | None = None) -> Tensor:
    """Gather the per-pair bias ``[m*m, m*m, num_heads]`` from ``table``.

    ``M`` is the window the table was built for; ``window`` (default ``M``)
    the possibly smaller window actually attended over.
    """
    if table.shape != ((2 * M - 1) ** 2, num_heads):
        raise ConfigError(f"bias table {table.shape} does not match window {M} with {num_heads} heads")
    m = M if window is None else window
    idx = relative_position_index(m, M).reshape(-1)
    return T.reshape(table[idx], (m * m, m * m, num_heads))


def build_shift_mask(H: int, W: int, M: int, shift: int | None = None, dtype=None) -> AttentionMask:
    """Additive mask for cyclically shifted windows over an ``H x W`` map.

    Tokens are labelled by the strip of the shifted map they came from; pairs
    with different labels were not neighbours before the roll and are masked.
    """
    if H % M or W % M:
        raise PartitionError(f"{H}x{W} not divisible by window {M}")
    if shift is None:
        shift = M // 2
    dtype = np.dtype(dtype or T.default_dtype())
    n_win = (H // M) * (W // M)
    if shift == 0:
        return AttentionMask(np.zeros((n_win, M * M, M * M), dtype=dtype), M, 0)
    region = np.zeros((H, W), dtype=np.int64)
    label = 0
    for hs in (slice(0, -M), slice(-M, -shift), slice(-shift, None)):
        for ws in (slice(0, -M), slice(-M, -shift), slice(-shift, None)):
            region[hs, ws] = label
            label += 1
    wins = region.reshape(H // M, M, W // M, M).transpose(0, 2, 1, 3).reshape(n_win, M * M)
    diff = wins[:, :, None] != wins[:, None, :]
    mask = np.where(diff, MASK_VALUE[dtype], 0.0).astype(dtype)
    return AttentionMask(mask, M, shift)


def w_msa(
    x: Tensor,
    p: WindowAttentionParams,
    shifted: bool = False,
    mask: AttentionMask | None = None,
    window: int | None = None,
) -> Tensor:
    """Windowed multi-head self-attention over ``x[..., H, W, C]``.

    With ``shifted`` the map is rolled by ``-(M // 2)`` first and rolled back
    afterwards, and the shift mask keeps wrapped-around tokens apart.
    ``window`` may shrink the window below ``p.window`` (maps smaller than a
    window); the relative bias then comes from the centre of the table.
    """
    M = p.window if window is None else window
    if not 1 <= M <= p.window:
        raise ConfigError(f"window {M} outside 1..{p.window}")
    *lead, H, W, C = x.shape
    if C != p.dim:
        raise ShapeError(f"attention over {p.dim} channels, got {x.shape}")
    if H % M or W % M:
        raise PartitionError(f"{H}x{W} not divisible by window {M}; pad first")
    B = math.prod(lead)
    h, d, N = p.num_heads, p.head_dim, M * M
    shift = M // 2 if shifted else 0

    xs = T.reshape(x, (B, H, W, C))
    if shift:
        xs = cyclic_shift(xs, -shift, -shift)
    win = window_partition(xs, M)
    n_win = win.shape[1]
    qkv = linear(T.reshape(win, (B, n_win, N, C)), p.qkv)
    qkv = T.permute(T.reshape(qkv, (B, n_win, N, 3, h, d)), (3, 0, 1, 4, 2, 5))
    q, k, v = qkv[0], qkv[1], qkv[2]

    attn = T.matmul(q * p.scale, k.transpose(-2, -1))
    attn = attn + T.permute(relative_bias_lookup(p.window, h, p.rel_pos_bias, window=M), (2, 0, 1))
    if shift:
        if mask is None:
            mask = build_shift_mask(H, W, M, shift, dtype=x.dtype)
        attn = attn + T.as_tensor(mask.mask[:, None], dtype=x.dtype)
    attn = softmax(attn, axis=-1)

    out = T.permute(T.matmul(attn, v), (0, 1, 3, 2, 4))
    out = linear(T.reshape(out, (B, n_win, N, C)), p.proj)
    out = window_reverse(T.reshape(out, (B, n_win, M, M, C)), H, W)
    if shift:
        out = cyclic_shift(out, shift, shift)
    return T.reshape(out, (*lead, H, W, C))


def global_attention_reference(x: Tensor, p: WindowAttentionParams, grid: int | None = -1) -> Tensor:
    """Dense softmax attention over all tokens of ``x[N, C]`` in plain numpy.

    Test oracle only.  When ``N == grid**2`` the tokens are read as a
    row-major ``grid x grid`` patch and the relative position bias is added
    pair by pair; ``grid=None`` drops the bias.  The default uses the
    parameters' window size.  ``grid`` may be smaller than the window, in
    which case the central part of the bias table is used.
    """
    X = np.asarray(x.data)
    N, C = X.shape
    if grid == -1:
        grid = p.window if N == p.window**2 else None
    K = p.window
    Wqkv, bqkv = p.qkv.weight.data, p.qkv.bias.data
    qkv = X @ Wqkv + bqkv
    q, k, v = qkv[:, :C], qkv[:, C : 2 * C], qkv[:, 2 * C :]
    d = p.head_dim
    table = p.rel_pos_bias.data
    heads = []
    for hd in range(p.num_heads):
        cols = slice(hd * d, (hd + 1) * d)
        s = (q[:, cols] * p.scale) @ k[:, cols].T
        if grid is not None:
            for i in range(N):
                yi, xi = divmod(i, grid)
                for j in range(N):
                    yj, xj = divmod(j, grid)
                    s[i, j] += table[(yi - yj + K - 1) * (2 * K - 1) + (xi - xj + K - 1), hd]
        s = s - s.max(axis=1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=1, keepdims=True)
        heads.append(a @ v[:, cols])
    out = np.concatenate(heads, axis=1) @ p.proj.weight.data + p.proj.bias.data
    return Tensor(out, dtype=X.dtype)
