"""Parameter and FLOP accounting.

FLOPs follow the multiply-accumulate convention (one MAC = one FLOP), under
which one window-attention module over an ``h x w`` map with ``C`` channels
and ``M x M`` windows costs ``4hwC^2 + 2M^2hwC``.  Softmax, normalisation,
activations, window shifts and the parameter-free bilinear resampling are not
counted.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .block import effective_window, padded_size, path_size
from .errors import ConfigError
from .model import NUM_STAGES, ModelConfig, ModelParams, named_parameters

FLOP_CONVENTION = "MAC"


@dataclass(frozen=True)
class SymbolicCost:
    """Cost ``a*h*w*C^2 + b*M^2*h*w*C`` with exact rational coefficients."""

    a: Fraction
    b: Fraction

    def evaluate(self, h, w, C, M):
        v = self.a * h * w * C * C + self.b * M * M * h * w * C
        return int(v) if v.denominator == 1 else v

    def __str__(self):
        return f"{_num(self.a)}*hwC^2 + {_num(self.b)}*M^2hwC"


def _num(v) -> str:
    v = Fraction(v)
    if v.denominator == 1:
        return str(v.numerator)
    f = float(v)
    return repr(f) if Fraction(f) == v else str(v)


def _check_scales(paths):
    paths = [int(s) for s in paths]
    for s in paths:
        if s < 1 or s & (s - 1):
            raise ConfigError(f"path scale {s} is not a power of two >= 1")
    return paths


def attention_cost(paths, M: int | None = None) -> SymbolicCost:
    """Symbolic cost of parallel window attention over relative ``paths``.

    A path downsampled by ``s`` sees ``hw/s^2`` tokens, so each cost term
    scales by ``sum(1/s^2)``.  ``M`` is kept symbolic in the result.
    """
    total = sum(Fraction(1, s * s) for s in _check_scales(paths))
    return SymbolicCost(4 * total, 2 * total)


def overhead_ratio(paths, M: int | None = None) -> float:
    """Cost of the multi-path block divided by the single-path cost."""
    multi, single = attention_cost(paths, M), attention_cost([1], M)
    # both coefficients scale by the same factor, so the ratio is h/w/C/M-free
    ratio = multi.a / single.a
    assert ratio == multi.b / single.b
    return float(ratio)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class Entry:
    name: str
    params: int = 0
    flops: int = 0
    kind: str = "other"


@dataclass
class ComplexityReport:
    model: str
    entries: list[Entry] = field(default_factory=list)
    img_size: tuple[int, int] | None = None
    convention: str = FLOP_CONVENTION

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_flops(self) -> int:
        return sum(e.flops for e in self.entries)

    def subtotals(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for e in self.entries:
            group = e.name.split(".", 1)[0]
            agg = out.setdefault(group, {"params": 0, "flops": 0})
            agg["params"] += e.params
            agg["flops"] += e.flops
        return out

    def attention_flops(self) -> int:
        return sum(e.flops for e in self.entries if e.kind == "attention")

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "img_size": list(self.img_size) if self.img_size else None,
            "convention": self.convention,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "subtotals": self.subtotals(),
            "entries": [asdict(e) for e in self.entries],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def format_table(self, detail: bool = False) -> str:
        rows = [(e.name, e.params, e.flops) for e in self.entries] if detail else [
            (k, v["params"], v["flops"]) for k, v in self.subtotals().items()
        ]
        width = max([len(r[0]) for r in rows] + [5])
        head = f"{'layer':<{width}}  {'params':>12}  {'flops':>15}"
        lines = [f"{self.model}  img={self.img_size}  flops convention: {self.convention}", head, "-" * len(head)]
        lines += [f"{n:<{width}}  {p:>12,}  {f:>15,}" for n, p, f in rows]
        lines.append("-" * len(head))
        lines.append(f"{'total':<{width}}  {self.total_params:>12,}  {self.total_flops:>15,}")
        lines.append(f"{'':<{width}}  {self.total_params / 1e6:>11.2f}M  {self.total_flops / 1e9:>14.3f}G")
        return "\n".join(lines)


def _entry_group(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "stages":
        s = int(parts[1]) + 1
        if parts[2] == "merge":
            return f"stage{s}.merge"
        blk = int(parts[3])
        if parts[4] == "path_attn":
            return f"stage{s}.block{blk}.attn{parts[5]}"
        return f"stage{s}.block{blk}.norm_mlp"
    return parts[0]


def count_params(params: ModelParams, model: str = "params") -> ComplexityReport:
    """Exhaustive tensor walk; entries group tensors by layer."""
    entries: dict[str, Entry] = {}
    for name, t in named_parameters(params):
        group = _entry_group(name)
        e = entries.setdefault(group, Entry(group, kind="attention" if ".attn" in group else "other"))
        e.params += int(t.size)
    return ComplexityReport(model, list(entries.values()))


def _linear_params(n_in, n_out):
    return n_in * n_out + n_out


def _attention_macs(h, w, C, M):
    # qkv projection, QK^T, AV, output projection over the padded map
    n = h * w
    return 3 * n * C * C + n * M * M * C + n * M * M * C + n * C * C


def count_flops(config: ModelConfig, img_size=None) -> ComplexityReport:
    """Shape walk over ``config`` tallying MACs and parameters per layer.

    Attention layers are counted on the (padded) maps and windows the
    forward pass actually uses; each entry is checked against the symbolic
    cost evaluated at that layer's ``h, w, C, M``.
    """
    c = config
    H, W = img_size if img_size is not None else c.img_size
    P = c.patch_size
    h, w = math.ceil(H / P), math.ceil(W / P)
    M = c.window
    entries = [
        Entry("embed", _linear_params(P * P * c.in_chans, c.embed_dim) + 2 * c.embed_dim,
              h * w * P * P * c.in_chans * c.embed_dim, "embed")
    ]
    heads_table = (2 * M - 1) ** 2
    for s in range(NUM_STAGES):
        C = c.stage_dim(s)
        if s > 0:
            h, w = (h + 1) // 2, (w + 1) // 2
            entries.append(Entry(f"stage{s + 1}.merge", 2 * (2 * C) + _linear_params(2 * C, C),
                                 h * w * (2 * C) * C, "merge"))
        hidden = c.mlp_hidden(s)
        for i in range(c.stage_depths[s]):
            for j, rel in enumerate(c.relative_scales(s)):
                hs, ws = (h, w) if rel == 1 else path_size(h, w, rel)
                hp, wp = padded_size(hs, ws, M)
                m = effective_window(hs, ws, M)
                macs = _attention_macs(hp, wp, C, m)
                if macs != attention_cost([1]).evaluate(hp, wp, C, m):
                    raise AssertionError("mechanical attention count disagrees with the symbolic cost")
                n_par = _linear_params(C, 3 * C) + _linear_params(C, C) + heads_table * c.stage_heads[s]
                entries.append(Entry(f"stage{s + 1}.block{i}.attn{j}", n_par, macs, "attention"))
            entries.append(Entry(f"stage{s + 1}.block{i}.norm_mlp", 4 * C + _linear_params(C, hidden) + _linear_params(hidden, C),
                                 2 * h * w * C * hidden, "mlp"))
    Cf = c.stage_dim(NUM_STAGES - 1)
    entries.append(Entry("head", 2 * Cf + _linear_params(Cf, c.num_classes), Cf * c.num_classes, "head"))
    return ComplexityReport(c.name, entries, (H, W))


def complexity(config: ModelConfig, img_size=None) -> ComplexityReport:
    return count_flops(config, img_size)


def dense_attention_flops(config: ModelConfig, img_size) -> int:
    """Attention MACs if every block attended globally over its whole map."""
    c = config
    H, W = img_size
    h, w = math.ceil(H / c.patch_size), math.ceil(W / c.patch_size)
    total = 0
    for s in range(NUM_STAGES):
        if s > 0:
            h, w = (h + 1) // 2, (w + 1) // 2
        C, n = c.stage_dim(s), h * w
        total += c.stage_depths[s] * (4 * n * C * C + 2 * n * n * C)
    return total


@dataclass
class LinearityFit:
    sizes: list
    hw: list[int]
    flops: list[int]
    slope: float
    intercept: float
    r2: float


def linearity_check(config: ModelConfig, sizes, dense: bool = False) -> LinearityFit:
    """Least-squares fit of total attention FLOPs against token count ``hw``.

    ``sizes`` are image sizes (ints for square images or (H, W) pairs); at
    least three are needed.  With ``dense`` the global-attention cost model is
    fitted instead, as a contrast.
    """
    sizes = [tuple(s) if isinstance(s, (tuple, list)) else (int(s), int(s)) for s in sizes]
    if len(sizes) < 3:
        raise ValueError(f"linearity check needs at least 3 input sizes, got {len(sizes)}")
    hw = [H * W for H, W in sizes]
    if dense:
        flops = [dense_attention_flops(config, s) for s in sizes]
    else:
        flops = [count_flops(config, s).attention_flops() for s in sizes]
    x = np.asarray(hw, dtype=float)
    y = np.asarray(flops, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return LinearityFit(sizes, hw, flops, float(slope), float(intercept), r2)
