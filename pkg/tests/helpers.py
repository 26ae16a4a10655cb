"""Shared builders and oracles for the tests."""
import numpy as np

from lgtransformer import tensor as T
from lgtransformer.attention import WindowAttentionParams, w_msa
from lgtransformer.block import LGBlockParams
from lgtransformer.nn import LayerNormParams, LinearParams
from lgtransformer.tensor import Tensor


def param(rng, shape, std=0.3, dtype=None):
    return T.Tensor(rng.standard_normal(shape) * std, requires_grad=True, dtype=dtype)


def linear_params(rng, n_in, n_out, std=0.3, dtype=None):
    return LinearParams(param(rng, (n_in, n_out), std, dtype), param(rng, (n_out,), std, dtype))


def norm_params(rng, n, dtype=None):
    return LayerNormParams(
        T.Tensor(1 + 0.1 * rng.standard_normal(n), requires_grad=True, dtype=dtype),
        param(rng, (n,), 0.1, dtype),
    )


def attn_params(rng, C, heads, M, std=0.3, dtype=None):
    return WindowAttentionParams(
        qkv=linear_params(rng, C, 3 * C, std, dtype),
        proj=linear_params(rng, C, C, std, dtype),
        rel_pos_bias=param(rng, ((2 * M - 1) ** 2, heads), 0.5, dtype),
        num_heads=heads,
        window=M,
    )


def block_params(rng, C, heads, M, scales=(1,), shift=False, hidden=None, dtype=None):
    hidden = hidden or 2 * C
    return LGBlockParams(
        ln1=norm_params(rng, C, dtype),
        path_attn=[attn_params(rng, C, heads, M, dtype=dtype) for _ in scales],
        path_scales=list(scales),
        ln2=norm_params(rng, C, dtype),
        fc1=linear_params(rng, C, hidden, dtype=dtype),
        fc2=linear_params(rng, hidden, C, dtype=dtype),
        shift_phase=shift,
    )


def numeric_grad(f, arr, h=1e-6):
    """Central-difference gradient of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + h
        fp = f()
        arr[i] = orig - h
        fm = f()
        arr[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def check_op_grad(build, inputs, h=1e-6, rtol=1e-6, atol=1e-8, seed=0):
    """Compare tape gradients of ``sum(build(*inputs) * R)`` against central differences.

    ``inputs`` are float64 arrays; a fixed random projection ``R`` turns the
    output into a scalar so every output entry matters.
    """
    rng = np.random.default_rng(seed)
    with T.precision("f64"):
        ts = [T.Tensor(a, requires_grad=True) for a in inputs]
        with T.Tape() as tape:
            out = build(*ts)
            R = rng.standard_normal(out.shape)
            loss = T.sum(out * T.Tensor(R))
        grads = tape.backward(loss)
        for t in ts:

            def f():
                with T.no_grad():
                    return float(np.sum(build(*ts).data * R))

            num = numeric_grad(f, t.data, h)
            ana = grads.get(t, np.zeros_like(t.data))
            np.testing.assert_allclose(ana, num, rtol=rtol, atol=atol)


def adjacency_mask(H, W, M, s):
    """Brute-force oracle: inside each shifted window, two tokens may attend
    iff neither axis separates them by the torus seam, i.e. they were
    neighbours before the cyclic shift."""
    nwin = (H // M) * (W // M)
    allowed = np.zeros((nwin, M * M, M * M), dtype=bool)
    for wy in range(H // M):
        for wx in range(W // M):
            coords = [(wy * M + i, wx * M + j) for i in range(M) for j in range(M)]
            for a, (ya, xa) in enumerate(coords):
                for b, (yb, xb) in enumerate(coords):
                    # shifted position p came from original (p + s) mod size
                    wrap_a = (ya + s >= H, xa + s >= W)
                    wrap_b = (yb + s >= H, xb + s >= W)
                    allowed[wy * (W // M) + wx, a, b] = wrap_a == wrap_b
    return allowed


def masked_leakage_holds(H, W, M, C=8, seed=8, dtype=np.float32):
    """For every token, scramble all tokens masked out of its attention row
    and require its output to stay bit-identical."""
    rng = np.random.default_rng(seed)
    s = M // 2
    p = attn_params(rng, C, 2, M, dtype=dtype)
    allowed = adjacency_mask(H, W, M, s)
    x = rng.standard_normal((H, W, C)).astype(dtype)
    base = w_msa(Tensor(x, dtype=dtype), p, shifted=True).data
    checked = 0
    for py in range(H):
        for px in range(W):  # position in the shifted frame
            win = (py // M) * (W // M) + px // M
            a = (py % M) * M + px % M
            x2 = x.copy()
            hidden = 0
            for b in np.flatnonzero(~allowed[win, a]):
                qy, qx = (py // M) * M + b // M, (px // M) * M + b % M
                x2[(qy + s) % H, (qx + s) % W] = rng.standard_normal(C) * 10
                hidden += 1
            if not hidden:
                continue
            out = w_msa(Tensor(x2, dtype=dtype), p, shifted=True).data
            ty, tx = (py + s) % H, (px + s) % W
            if out[ty, tx].tobytes() != base[ty, tx].tobytes():
                return False, checked
            checked += 1
    return True, checked
