"""Four-stage LG-Transformer: configs, presets, parameters and the forward pass."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import WindowAttentionParams
from .block import LGBlockParams, lg_block_forward
from .errors import ConfigError, ShapeError
from .nn import LayerNormParams, LinearParams, layer_norm, linear, pad_hw
from .tensor import Tensor

NUM_STAGES = 4


@dataclass
class ModelConfig:
    img_size: tuple[int, int] = (224, 224)
    patch_size: int = 4
    embed_dim: int = 96
    stage_depths: list[int] = field(default_factory=lambda: [2, 2, 6, 2])
    stage_heads: list[int] = field(default_factory=lambda: [3, 6, 12, 24])
    # absolute downsampling rates (w.r.t. the image) of each stage's paths
    stage_path_scales: list[list[int]] = field(default_factory=lambda: [[4, 16, 32], [8, 16, 32], [16, 32], [32]])
    window: int = 7
    num_classes: int = 1000
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.0
    in_chans: int = 3
    name: str = "custom"

    def __post_init__(self):
        self.img_size = tuple(int(v) for v in self.img_size)
        self.stage_depths = [int(v) for v in self.stage_depths]
        self.stage_heads = [int(v) for v in self.stage_heads]
        self.stage_path_scales = [[int(v) for v in s] for s in self.stage_path_scales]
        self.validate()

    def validate(self) -> None:
        n = NUM_STAGES
        if len(self.stage_depths) != n or len(self.stage_heads) != n or len(self.stage_path_scales) != n:
            raise ConfigError(f"need {n} stages of depths, heads and path scales")
        if len(self.img_size) != 2 or min(self.img_size) < 1:
            raise ConfigError(f"bad img_size {self.img_size}")
        if self.patch_size < 1 or self.window < 1 or self.embed_dim < 1 or self.num_classes < 1:
            raise ConfigError("patch_size, window, embed_dim and num_classes must be positive")
        top = self.stage_rate(n - 1)
        for s in range(n):
            dim, heads = self.stage_dim(s), self.stage_heads[s]
            if self.stage_depths[s] < 1:
                raise ConfigError(f"stage {s + 1} needs at least one block")
            if heads < 1 or dim % heads:
                raise ConfigError(f"stage {s + 1}: dim {dim} not divisible by {heads} heads")
            scales = self.stage_path_scales[s]
            rate = self.stage_rate(s)
            if not scales or scales[0] != rate:
                raise ConfigError(f"stage {s + 1} paths must start at the stage rate {rate}, got {scales}")
            for a, b in zip(scales, scales[1:]):
                if b <= a:
                    raise ConfigError(f"stage {s + 1} path scales must increase, got {scales}")
            for r in scales:
                if top % r or r < rate:
                    raise ConfigError(f"stage {s + 1}: scale {r} must divide {top} and be >= {rate}")
        if self.mlp_ratio <= 0 or not 0 <= self.drop_path_rate < 1:
            raise ConfigError("mlp_ratio must be positive and drop_path_rate in [0, 1)")

    def stage_dim(self, s: int) -> int:
        return self.embed_dim * 2**s

    def stage_rate(self, s: int) -> int:
        return self.patch_size * 2**s

    def relative_scales(self, s: int) -> list[int]:
        rate = self.stage_rate(s)
        return [r // rate for r in self.stage_path_scales[s]]

    def mlp_hidden(self, s: int) -> int:
        return int(self.stage_dim(s) * self.mlp_ratio)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    # key = value text form, used by checkpoints and config files
    def to_text(self) -> str:
        lines = [
            f"name = {self.name}",
            f"img_size = {self.img_size[0]} {self.img_size[1]}",
            f"patch_size = {self.patch_size}",
            f"in_chans = {self.in_chans}",
            f"embed_dim = {self.embed_dim}",
            f"stage_depths = {' '.join(map(str, self.stage_depths))}",
            f"stage_heads = {' '.join(map(str, self.stage_heads))}",
            "stage_path_scales = " + " | ".join(" ".join(map(str, s)) for s in self.stage_path_scales),
            f"window = {self.window}",
            f"num_classes = {self.num_classes}",
            f"mlp_ratio = {self.mlp_ratio!r}",
            f"drop_path_rate = {self.drop_path_rate!r}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        """Parse the ``key = value`` form written by :meth:`to_text`.

        Blank lines and ``#`` comments are ignored; missing keys keep their
        defaults.  Lists are space separated, stages of path scales are
        separated by ``|``.
        """
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                if key == "name":
                    kw[key] = value
                elif key == "img_size":
                    kw[key] = tuple(int(v) for v in value.split())
                elif key in ("stage_depths", "stage_heads"):
                    kw[key] = [int(v) for v in value.split()]
                elif key == "stage_path_scales":
                    kw[key] = [[int(v) for v in part.split()] for part in value.split("|")]
                elif key in ("patch_size", "in_chans", "embed_dim", "window", "num_classes"):
                    kw[key] = int(value)
                elif key in ("mlp_ratio", "drop_path_rate"):
                    kw[key] = float(value)
                else:
                    raise ConfigError(f"line {lineno}: unknown key {key!r}")
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
        return cls(**kw)


# ---------------------------------------------------------------------------
# Presets

_LG_T_SCALES = [[4, 16, 32], [8, 16, 32], [16, 32], [32]]


def _single_path(scales):
    return [[s[0]] for s in scales]


def ablation(stages=(1, 2, 3), paths16: bool = True, paths32: bool = True, base: str = "lg_t") -> ModelConfig:
    """LG-T variant with extra paths only in ``stages`` (1-based) and only the chosen rates."""
    cfg = preset(base)
    keep = {16: paths16, 32: paths32}
    stages = set(stages)
    if not stages <= {1, 2, 3, 4}:
        raise ConfigError(f"stages must be drawn from 1..4, got {sorted(stages)}")
    scales = []
    for s, full in enumerate(_LG_T_SCALES):
        identity, extra = full[0], full[1:]
        if s + 1 in stages:
            extra = [r for r in extra if keep.get(r, True)]
        else:
            extra = []
        scales.append([identity, *extra])
    tag = "".join(str(s) for s in sorted(stages)) or "none"
    rates = ",".join(str(r) for r, on in keep.items() if on) or "none"
    return cfg.replace(stage_path_scales=scales, name=f"ablate[stages={tag};paths={rates}]")


def preset(name) -> ModelConfig:
    """Named architecture.

    ``lg_t`` / ``lg_s`` are the two full-size variants, ``swin_t_equiv`` /
    ``swin_s_equiv`` the same networks with every extra path removed.
    ``tiny-lg`` / ``tiny-swin`` are 32x32 desk-scale analogues with the same
    relative path structure, and ``gradcheck-tiny`` is a still smaller LG
    net for finite-difference checks.  A dict is forwarded to
    :func:`ablation`.
    """
    if isinstance(name, dict):
        return ablation(**name)
    key = str(name).lower().replace("-", "_")
    key = {"lg_tiny": "tiny_lg", "swin_tiny": "tiny_swin", "swin_t_equiv_tiny": "tiny_swin"}.get(key, key)
    if key == "lg_t":
        return ModelConfig(name="lg_t")
    if key == "lg_s":
        return ModelConfig(stage_depths=[2, 2, 18, 2], name="lg_s")
    if key == "swin_t_equiv":
        return ModelConfig(stage_path_scales=_single_path(_LG_T_SCALES), name="swin_t_equiv")
    if key == "swin_s_equiv":
        return ModelConfig(stage_depths=[2, 2, 18, 2], stage_path_scales=_single_path(_LG_T_SCALES), name="swin_s_equiv")
    tiny_scales = [[2, 8, 16], [4, 8, 16], [8, 16], [16]]
    if key == "tiny_lg":
        return ModelConfig(
            img_size=(32, 32), patch_size=2, embed_dim=24, stage_depths=[1, 1, 1, 1],
            stage_heads=[2, 4, 8, 16], stage_path_scales=tiny_scales, window=2, num_classes=4, name="tiny-lg",
        )
    if key == "tiny_swin":
        return preset("tiny-lg").replace(stage_path_scales=_single_path(tiny_scales), name="tiny-swin")
    if key == "gradcheck_tiny":
        return ModelConfig(
            img_size=(32, 32), patch_size=2, embed_dim=2, stage_depths=[2, 2, 2, 2],
            stage_heads=[1, 2, 2, 4], stage_path_scales=tiny_scales, window=2, num_classes=3,
            mlp_ratio=2.0, name="gradcheck-tiny",
        )
    raise ConfigError(f"unknown preset {name!r}")


PRESETS = ("lg_t", "lg_s", "swin_t_equiv", "swin_s_equiv", "tiny-lg", "tiny-swin", "gradcheck-tiny")


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class PatchEmbedParams:
    proj: LinearParams  # [patch*patch*in_chans, embed_dim]
    norm: LayerNormParams


@dataclass
class PatchMergeParams:
    norm: LayerNormParams  # over 4C
    reduction: LinearParams  # [4C, 2C]


@dataclass
class StageParams:
    merge: PatchMergeParams | None
    blocks: list[LGBlockParams]


@dataclass
class HeadParams:
    norm: LayerNormParams
    fc: LinearParams


@dataclass
class ModelParams:
    embed: PatchEmbedParams
    stages: list[StageParams]
    head: HeadParams


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted.name, tensor)`` for every tensor reachable from ``obj``."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))


class _Init:
    def __init__(self, seed, dtype, mode):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.mode = mode

    def trunc_normal(self, shape, std=0.02):
        if self.mode == "zeros":
            return np.zeros(shape, dtype=self.dtype)
        v = self.rng.standard_normal(shape)
        bad = np.abs(v) > 2
        while bad.any():
            v[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(v) > 2
        return (v * std).astype(self.dtype)

    def tensor(self, arr):
        return Tensor(arr, requires_grad=True, dtype=self.dtype)

    def linear(self, n_in, n_out, std=0.02):
        return LinearParams(self.tensor(self.trunc_normal((n_in, n_out), std)), self.tensor(np.zeros(n_out)))

    def norm(self, n):
        fill = np.zeros if self.mode == "zeros" else np.ones
        return LayerNormParams(self.tensor(fill(n)), self.tensor(np.zeros(n)))


def init_params(config: ModelConfig, seed: int = 0, dtype=None, init: str = "normal", std: float = 0.02) -> ModelParams:
    """Build parameters for ``config``.

    ``init="normal"`` draws weights from a normal truncated at two standard
    deviations (``std`` each), with zero biases and unit LayerNorm gains;
    ``init="zeros"`` allocates an all-zero skeleton (for loading and
    counting).
    """
    if init not in ("normal", "zeros"):
        raise ConfigError(f"unknown init {init!r}")
    dtype = np.dtype(dtype or T.default_dtype()).type
    ini = _Init(seed, dtype, init)
    c = config
    patch_in = c.patch_size * c.patch_size * c.in_chans
    embed = PatchEmbedParams(ini.linear(patch_in, c.embed_dim, std), ini.norm(c.embed_dim))
    stages = []
    for s in range(NUM_STAGES):
        dim, heads = c.stage_dim(s), c.stage_heads[s]
        merge = None
        if s > 0:
            merge = PatchMergeParams(ini.norm(2 * dim), ini.linear(2 * dim, dim, std))
        blocks = []
        for i in range(c.stage_depths[s]):
            rel = c.relative_scales(s)
            paths = [
                WindowAttentionParams(
                    qkv=ini.linear(dim, 3 * dim, std),
                    proj=ini.linear(dim, dim, std),
                    rel_pos_bias=ini.tensor(ini.trunc_normal(((2 * c.window - 1) ** 2, heads), std)),
                    num_heads=heads,
                    window=c.window,
                )
                for _ in rel
            ]
            blocks.append(
                LGBlockParams(
                    ln1=ini.norm(dim),
                    path_attn=paths,
                    path_scales=rel,
                    ln2=ini.norm(dim),
                    fc1=ini.linear(dim, c.mlp_hidden(s), std),
                    fc2=ini.linear(c.mlp_hidden(s), dim, std),
                    shift_phase=i % 2 == 1,
                    drop_path_rate=_drop_rate(c, s, i),
                )
            )
        stages.append(StageParams(merge, blocks))
    final = c.stage_dim(NUM_STAGES - 1)
    head = HeadParams(ini.norm(final), ini.linear(final, c.num_classes, std))
    params = ModelParams(embed, stages, head)
    for name, t in named_parameters(params):
        t.name = name
    return params


def _drop_rate(c: ModelConfig, s: int, i: int) -> float:
    # linearly increasing over depth, as in Swin
    total = sum(c.stage_depths)
    if c.drop_path_rate == 0 or total == 1:
        return 0.0
    k = sum(c.stage_depths[:s]) + i
    return c.drop_path_rate * k / (total - 1)


def check_params(params: ModelParams, config: ModelConfig) -> None:
    if len(params.stages) != NUM_STAGES:
        raise ConfigError(f"params have {len(params.stages)} stages")
    expected = {n: t.shape for n, t in named_parameters(init_params(config, init="zeros", dtype=np.float32))}
    got = {n: t.shape for n, t in named_parameters(params)}
    if expected != got:
        missing = sorted(set(expected) ^ set(got))[:3]
        wrong = [n for n in expected if n in got and expected[n] != got[n]][:3]
        raise ConfigError(f"params do not match config {config.name}: names {missing} shapes {wrong}")


# ---------------------------------------------------------------------------
# Forward


def _as_image(image) -> Tensor:
    if isinstance(image, Tensor):
        return image
    return T.as_tensor(np.asarray(image))


def patch_embed(image: Tensor, p: PatchEmbedParams, patch_size: int) -> Tensor:
    """Non-overlapping ``patch x patch`` patches, flattened, projected, normalised."""
    *lead, H, W, C = image.shape
    if H < 1 or W < 1:
        raise ShapeError(f"degenerate image {image.shape}")
    P = patch_size
    Hp, Wp = math.ceil(H / P) * P, math.ceil(W / P) * P
    x = pad_hw(image, Hp, Wp)
    n = len(lead)
    x = T.reshape(x, (*lead, Hp // P, P, Wp // P, P, C))
    x = T.permute(x, (*range(n), n, n + 2, n + 1, n + 3, n + 4))
    x = T.reshape(x, (*lead, Hp // P, Wp // P, P * P * C))
    return layer_norm(linear(x, p.proj), p.norm)


def patch_merge(x: Tensor, p: PatchMergeParams) -> Tensor:
    """Concatenate each 2x2 neighbourhood (4C), normalise, project to 2C."""
    *lead, H, W, C = x.shape
    x = pad_hw(x, H + H % 2, W + W % 2)
    H2, W2 = (H + 1) // 2, (W + 1) // 2
    n = len(lead)
    x = T.reshape(x, (*lead, H2, 2, W2, 2, C))
    # channel groups in the order (0,0), (1,0), (0,1), (1,1) of (row, col) offsets
    x = T.permute(x, (*range(n), n, n + 2, n + 3, n + 1, n + 4))
    x = T.reshape(x, (*lead, H2, W2, 4 * C))
    return linear(layer_norm(x, p.norm), p.reduction)


def forward(
    image,
    params: ModelParams,
    config: ModelConfig,
    *,
    rng: np.random.Generator | None = None,
    taps: dict | None = None,
) -> Tensor:
    """Logits for ``image[H, W, in_chans]`` (or a batch ``[B, H, W, in_chans]``).

    ``taps`` collects ``("stage", s)`` feature maps and ``("path", s, rate)``
    path outputs of each stage's last block (stages 1-based, rates absolute).
    ``rng`` enables stochastic depth.
    """
    x = _as_image(image)
    if x.ndim not in (3, 4) or x.shape[-1] != config.in_chans:
        raise ConfigError(f"image shape {x.shape} does not fit config {config.name}")
    if len(params.stages) != NUM_STAGES or params.embed.proj.in_dim != config.patch_size**2 * config.in_chans:
        raise ConfigError("params do not match config")
    x = patch_embed(x, params.embed, config.patch_size)
    for s, stage in enumerate(params.stages):
        if stage.merge is not None:
            x = patch_merge(x, stage.merge)
        if len(stage.blocks) != config.stage_depths[s]:
            raise ConfigError(f"stage {s + 1} has {len(stage.blocks)} blocks, config says {config.stage_depths[s]}")
        for i, blk in enumerate(stage.blocks):
            last = i == len(stage.blocks) - 1
            block_taps = {} if (taps is not None and last) else None
            x = lg_block_forward(x, blk, config.window, taps=block_taps, rng=rng)
            if block_taps is not None:
                rate = config.stage_rate(s)
                for rel, z in block_taps.items():
                    taps[("path", s + 1, rel * rate)] = z
        if taps is not None:
            taps[("stage", s + 1)] = x
    x = layer_norm(x, params.head.norm)
    x = T.mean(x, axis=(-3, -2))
    return linear(x, params.head.fc)


def extract_features(image, params: ModelParams, config: ModelConfig, stage: int, path: int) -> Tensor:
    """Attention output of path ``path`` (absolute rate) in the last block of ``stage`` (1-based)."""
    if not 1 <= stage <= NUM_STAGES:
        raise ConfigError(f"stage must be 1..{NUM_STAGES}, got {stage}")
    if path not in config.stage_path_scales[stage - 1]:
        raise ConfigError(f"stage {stage} of {config.name} has paths {config.stage_path_scales[stage - 1]}, not {path}")
    taps: dict = {}
    with T.no_grad():
        forward(image, params, config, taps=taps)
    return taps[("path", stage, path)]


def stage_paths(config: ModelConfig, stage: int) -> list[int]:
    return list(config.stage_path_scales[stage - 1])


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (all integers in ASCII, tensors little-endian):
#   b"LGTCKPT 1\n"
#   b"config <nbytes>\n" + ModelConfig.to_text() bytes
#   b"tensors <count>\n"
#   per tensor: b"<name> <f32|f64> <ndim> <d0> ... <dn-1>\n" + raw scalars

CKPT_MAGIC = b"LGTCKPT"
CKPT_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_TAG_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    cfg = config.to_text().encode()
    named = list(named_parameters(params))
    chunks = [b"%s %d\n" % (CKPT_MAGIC, CKPT_VERSION), b"config %d\n" % len(cfg), cfg, b"tensors %d\n" % len(named)]
    for name, t in named:
        tag = _DTYPE_TAGS[t.dtype]
        dims = " ".join(str(d) for d in t.shape)
        chunks.append(f"{name} {tag} {t.ndim} {dims}".rstrip().encode() + b"\n")
        chunks.append(np.ascontiguousarray(t.data, dtype=_TAG_DTYPES[tag]).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def line():
        nonlocal pos
        end = buf.index(b"\n", pos)
        out = buf[pos:end].decode()
        pos = end + 1
        return out

    try:
        magic, version = line().split()
        if magic.encode() != CKPT_MAGIC or int(version) != CKPT_VERSION:
            raise ConfigError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
        key, n = line().split()
        cfg_bytes = buf[pos : pos + int(n)]
        pos += int(n)
        config = ModelConfig.from_text(cfg_bytes.decode())
        key, count = line().split()
        records = {}
        for _ in range(int(count)):
            name, tag, ndim, *dims = line().split()
            shape = tuple(int(d) for d in dims)
            if len(shape) != int(ndim):
                raise ConfigError(f"{path}: corrupt record for {name}")
            dt = _TAG_DTYPES[tag]
            nbytes = math.prod(shape) * dt.itemsize
            arr = np.frombuffer(buf, dtype=dt, count=math.prod(shape), offset=pos).reshape(shape)
            pos += nbytes
            records[name] = arr.astype(dt.newbyteorder("="))
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: malformed checkpoint ({exc})") from None
    dtypes = {a.dtype for a in records.values()}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.float32
    params = init_params(config, init="zeros", dtype=dtype)
    named = dict(named_parameters(params))
    if set(named) != set(records):
        raise ConfigError(f"{path}: tensor names do not match config {config.name}")
    for name, t in named.items():
        if t.shape != records[name].shape:
            raise ConfigError(f"{path}: {name} has shape {records[name].shape}, expected {t.shape}")
        t.data = records[name].copy()
    return params, config
