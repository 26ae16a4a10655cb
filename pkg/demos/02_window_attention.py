"""Windows, shifts and the global path, checked by perturbation.

Builds one LG block by hand, pokes a single token and prints which output
tokens react.  The identity path alone only spreads information inside a
window; the downsampled path that covers the map with one window reaches
every token.

    python3 demos/02_window_attention.py
"""
import numpy as np

from lgtransformer.attention import WindowAttentionParams, build_shift_mask
from lgtransformer.block import LGBlockParams, lg_block_forward
from lgtransformer.nn import LayerNormParams, LinearParams
from lgtransformer.tensor import Tensor

rng = np.random.default_rng(0)
C, heads, M = 8, 2, 2


def lin(n_in, n_out):
    return LinearParams(Tensor(rng.standard_normal((n_in, n_out)) * 0.3), Tensor(np.zeros(n_out)))


def attn():
    table = Tensor(rng.standard_normal(((2 * M - 1) ** 2, heads)) * 0.1)
    return WindowAttentionParams(lin(C, 3 * C), lin(C, C), table, heads, M)


def norm():
    return LayerNormParams(Tensor(np.ones(C)), Tensor(np.zeros(C)))


def block(scales):
    return LGBlockParams(norm(), [attn() for _ in scales], list(scales), norm(), lin(C, 4 * C), lin(4 * C, C))


def reach(p, x, at):
    x2 = x.copy()
    x2[at] += rng.standard_normal(C)
    diff = lg_block_forward(Tensor(x2), p).data != lg_block_forward(Tensor(x), p).data
    return np.any(diff, axis=-1)


def show(mask):
    for row in mask:
        print("   " + " ".join("#" if v else "." for v in row))


x = rng.standard_normal((8, 8, C))
print("identity path only, token (5, 2) perturbed:")
show(reach(block([1]), x, (5, 2)))
print("identity + 4x path (2x2 map = one window):")
show(reach(block([1, 4]), x, (5, 2)))

# the shifted phase rolls the map by M // 2; the mask keeps tokens that were
# not neighbours before the roll apart.  0 = allowed, 1 = masked
m = build_shift_mask(4, 4, M)
print("\nshift mask, last window of a 4x4 map (token pairs):")
print((m.mask[-1] != 0).astype(int))
