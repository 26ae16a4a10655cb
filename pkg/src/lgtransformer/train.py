"""Training loop, synthetic data, finite-difference gradient checks and feature dumps."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DivergenceError
from .model import (
    ModelConfig,
    ModelParams,
    forward,
    init_params,
    load_checkpoint,
    named_parameters,
    preset,
    save_checkpoint,
)
from .nn import cross_entropy
from .pnm import read_image, to_gray8, write_pgm
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    warmup_steps: int | None = None  # None: total_steps // 15
    total_steps: int = 500
    batch_size: int = 64
    seed: int = 0
    precision: str = "f32"
    eps: float = 1e-8
    eval_every: int = 25

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = self.total_steps // 15
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.total_steps < 0 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(f"need 0 <= warmup_steps ({self.warmup_steps}) <= total_steps ({self.total_steps})")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.precision not in T.PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(T.PRECISIONS)}")
        self.betas = tuple(float(b) for b in self.betas)


def lr_schedule(t: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``cfg.lr``, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= t <= cfg.total_steps:
        raise ContractError(f"step {t} outside 0..{cfg.total_steps}")
    w = cfg.warmup_steps
    if t < w:
        return cfg.lr * t / w
    span = cfg.total_steps - w
    if span == 0:
        return cfg.lr
    progress = (t - w) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params, grads, state: AdamState, t: int, lr_t: float, cfg: TrainConfig | None = None) -> AdamState:
    """One AdamW update, in place on ``params``.

    ``params`` maps names to tensors (or is an iterable of ``(name, tensor)``)
    and ``grads`` maps names to arrays; ``t`` counts from 1.  Weight decay is
    decoupled: ``p -= lr * wd * p`` before the moment step.
    """
    cfg = cfg or TrainConfig()
    items = params.items() if isinstance(params, dict) else params
    b1, b2 = cfg.betas
    if t < 1:
        raise ContractError("adam step counter starts at 1")
    for name, p in items:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=p.dtype)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter tensor {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ContractError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        data = p.data
        if cfg.weight_decay:
            data = data * (1 - lr_t * cfg.weight_decay)
        p.data = (data - lr_t * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype)
        state.m[name], state.v[name] = m, v
    state.t = t
    return state


# ---------------------------------------------------------------------------
# Data


@dataclass
class SyntheticDataset:
    """Per-class Gaussian blobs at class-specific positions plus pixel noise.

    Class ``k`` puts a bright blob near anchor ``k`` (anchors on a ring
    around the image centre) on a noisy background.  Every class uses the
    same colour, so only position separates them.
    """

    num_classes: int = 4
    num_samples: int = 64
    img_size: int = 32
    seed: int = 0
    noise: float = 0.1
    jitter: float = 0.06  # anchor jitter, as a fraction of the image side
    sigma: float = 0.12  # blob width, as a fraction of the image side
    images: np.ndarray = field(init=False, repr=False)
    labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_classes < 2 or self.num_samples < 1 or self.img_size < 4:
            raise ConfigError("dataset needs >= 2 classes, >= 1 sample and images of side >= 4")
        rng = np.random.default_rng(self.seed)
        S, K = self.img_size, self.num_classes
        angle = 2 * np.pi * np.arange(K) / K + np.pi / 4
        anchors = 0.5 + 0.28 * np.stack([np.sin(angle), np.cos(angle)], axis=1)
        labels = np.arange(self.num_samples) % K
        rng.shuffle(labels)
        centres = anchors[labels] + rng.uniform(-self.jitter, self.jitter, size=(self.num_samples, 2))
        coords = (np.arange(S) + 0.5) / S
        dy = coords[None, :, None] - centres[:, 0, None, None]
        dx = coords[None, None, :] - centres[:, 1, None, None]
        blob = np.exp(-(dy**2 + dx**2) / (2 * self.sigma**2))
        colour = np.array([1.0, 0.8, 0.6])
        imgs = 0.2 + 0.7 * blob[..., None] * colour + self.noise * rng.standard_normal((self.num_samples, S, S, 3))
        self.images = imgs
        self.labels = labels.astype(np.int64)

    def __len__(self):
        return self.num_samples

    def batches(self, batch_size: int, rng: np.random.Generator):
        """Endless stream of index batches; full-set batches are in fixed order."""
        n = self.num_samples
        if batch_size >= n:
            idx = np.arange(n)
            while True:
                yield idx
        while True:
            perm = rng.permutation(n)
            for i in range(0, n - batch_size + 1, batch_size):
                yield perm[i : i + batch_size]


# ---------------------------------------------------------------------------
# Run records


@dataclass
class RunRecord:
    """Per-step training log plus final metrics.

    Serialised as JSON lines: one ``{"step": ...}`` object per step, then a
    ``{"final": ...}`` object.
    """

    steps: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def append(self, entry: dict) -> None:
        if self.steps and entry["step"] <= self.steps[-1]["step"]:
            raise ContractError("run record steps must increase")
        if not math.isfinite(entry["loss"]):
            raise ContractError("run record losses must be finite")
        self.steps.append(entry)

    def to_jsonl(self) -> str:
        lines = [json.dumps(s, sort_keys=True) for s in self.steps]
        if self.final:
            lines.append(json.dumps({"final": self.final}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "RunRecord":
        rec = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            if "final" in obj:
                rec.final = obj["final"]
            else:
                rec.append(obj)
        return rec

    def losses(self) -> np.ndarray:
        return np.array([s["loss"] for s in self.steps])

    def __eq__(self, other):
        return isinstance(other, RunRecord) and self.to_jsonl() == other.to_jsonl()


def _path_groups(names) -> dict[str, list[str]]:
    """Group parameter names by attention path, ``stages.S.blocks.B.path_attn.J``."""
    groups: dict[str, list[str]] = {}
    for n in names:
        parts = n.split(".")
        if len(parts) > 5 and parts[4] == "path_attn":
            groups.setdefault(".".join(parts[:6]), []).append(n)
    return groups


def accuracy(params: ModelParams, config: ModelConfig, images, labels) -> float:
    with T.no_grad():
        logits = forward(images, params, config).data
    return float(np.mean(np.argmax(logits, axis=-1) == np.asarray(labels)))


def train(
    model="tiny-lg",
    cfg: TrainConfig | None = None,
    data: SyntheticDataset | None = None,
    out_dir=None,
    params: ModelParams | None = None,
    log: Callable[[dict], None] | None = None,
) -> tuple[RunRecord, ModelParams]:
    """Cross-entropy training with AdamW and a warmup-cosine schedule.

    Returns the run record and the trained parameters.  With ``out_dir`` the
    record is streamed to ``run.jsonl`` and the final weights are written to
    ``model.ckpt``; if the loss diverges the last good weights are written
    there before :class:`DivergenceError` propagates.
    """
    cfg = cfg or TrainConfig()
    config = model if isinstance(model, ModelConfig) else preset(model)
    if data is None:
        data = SyntheticDataset(num_classes=config.num_classes, img_size=config.img_size[0], seed=cfg.seed)
    if data.num_classes != config.num_classes:
        raise ConfigError(f"dataset has {data.num_classes} classes, model {config.num_classes}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "model.ckpt" if out is not None else None
    logf = open(out / "run.jsonl", "w") if out is not None else None

    with T.precision(cfg.precision):
        dtype = T.default_dtype()
        if params is None:
            params = init_params(config, seed=cfg.seed, dtype=dtype)
        named = list(named_parameters(params))
        groups = _path_groups(n for n, _ in named)
        images = data.images.astype(dtype)
        labels = data.labels
        rng = np.random.default_rng(cfg.seed + 1)
        drop_rng = np.random.default_rng(cfg.seed + 2) if config.drop_path_rate > 0 else None
        batches = data.batches(cfg.batch_size, rng)
        state = AdamState()
        record = RunRecord()
        last_good = {n: t.data.copy() for n, t in named}
        try:
            for step in range(cfg.total_steps):
                idx = next(batches)
                with T.Tape() as tape:
                    loss = cross_entropy(forward(images[idx], params, config, rng=drop_rng), labels[idx])
                loss_v = float(loss.item())
                if not math.isfinite(loss_v):
                    raise DivergenceError(f"loss became {loss_v} at step {step}")
                by_leaf = tape.backward(loss)
                grads = {n: by_leaf.get(t, np.zeros_like(t.data)) for n, t in named}
                sq = {n: float(np.sum(np.square(g, dtype=np.float64))) for n, g in grads.items()}
                path_norms = [math.sqrt(sum(sq[n] for n in ns)) for ns in groups.values()]
                lr_t = lr_schedule(step, cfg)
                last_good = {n: t.data.copy() for n, t in named}
                adamw_step(named, grads, state, step + 1, lr_t, cfg)
                entry = {
                    "step": step,
                    "loss": loss_v,
                    "lr": lr_t,
                    "grad_norm": math.sqrt(sum(sq.values())),
                    "min_path_grad_norm": min(path_norms) if path_norms else None,
                }
                if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                    entry["train_acc"] = accuracy(params, config, images, labels)
                record.append(entry)
                if logf is not None:
                    logf.write(json.dumps(entry, sort_keys=True) + "\n")
                    logf.flush()
                if log is not None:
                    log(entry)
        except DivergenceError:
            if ckpt_path is not None:
                for n, t in named:
                    t.data = last_good[n]
                save_checkpoint(ckpt_path, params, config)
            if logf is not None:
                logf.close()
            raise
        acc = accuracy(params, config, images, labels)
        with T.no_grad():
            final_loss = float(cross_entropy(forward(images, params, config), labels).item())
        reached = [s["step"] for s in record.steps if s.get("train_acc", 0.0) >= 0.99]
        record.final = {
            "steps": cfg.total_steps,
            "train_acc": acc,
            "loss": final_loss,
            "first_step_at_99": reached[0] if reached else None,
            "model": config.name,
            "precision": cfg.precision,
        }
    if logf is not None:
        logf.write(json.dumps({"final": record.final}, sort_keys=True) + "\n")
        logf.close()
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, params, config)
    return record, params


# ---------------------------------------------------------------------------
# Gradient check


@dataclass
class TensorCheck:
    name: str
    coords: int
    max_rel_err: float
    worst_index: tuple
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    checks: list[TensorCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[TensorCheck]:
        return [c for c in self.checks if not c.passed]

    def format(self) -> str:
        lines = [f"{'PASS' if c.passed else 'FAIL'}  {c.max_rel_err:.3e}  {c.name}  ({c.coords} coords)" for c in self.checks]
        lines.append(f"{len(self.checks) - len(self.failures())}/{len(self.checks)} tensors within rel err {self.tolerance:g}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"tolerance": self.tolerance, "passed": self.passed, "checks": [asdict(c) for c in self.checks]}


GRAD_FLOOR = 1e-4


def rel_error(a: float, n: float, floor: float = GRAD_FLOOR) -> float:
    """``|a - n| / max(|a|, |n|, floor)``.

    Gradients smaller than ``floor`` are compared in absolute terms: central
    differences carry roundoff around 1e-10 here, which would swamp the
    relative error of a coordinate whose true gradient is exactly zero (key
    biases, for one, cancel in the softmax).
    """
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    named: list[tuple[str, Tensor]],
    tol: float = 1e-5,
    coords: int = 5,
    h: float = 1e-5,
    seed: int = 0,
    richardson: bool = True,
) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``coords`` random coordinates of each tensor in ``named`` are perturbed by
    ``+-h`` (all of them for smaller tensors).  With ``richardson`` the
    estimates at ``h`` and ``h/2`` are combined to cancel the O(h^2) term,
    which matters where the loss is sharply curved (a layer norm over very
    few channels).  An empty ``named`` passes vacuously.
    """
    report = GradCheckReport(tol)
    if not named:
        return report
    for _, t in named:
        if t.dtype != np.float64:
            raise ContractError("gradient checks need 64-bit parameters")
    with T.Tape() as tape:
        loss = loss_fn()
    by_leaf = tape.backward(loss)
    rng = np.random.default_rng(seed)
    for name, t in named:
        g = by_leaf.get(t, np.zeros_like(t.data))
        k = min(coords, t.size)
        flat_idx = rng.choice(t.size, size=k, replace=False)
        worst, worst_at = 0.0, ()
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), t.shape)
            orig = t.data[idx]

            def central(step):
                t.data[idx] = orig + step
                with T.no_grad():
                    lp = float(loss_fn().item())
                t.data[idx] = orig - step
                with T.no_grad():
                    lm = float(loss_fn().item())
                t.data[idx] = orig
                return (lp - lm) / (2 * step)

            d1 = central(h)
            num = (4 * central(h / 2) - d1) / 3 if richardson else d1
            err = rel_error(float(g[idx]), num)
            if err > worst or not worst_at:
                worst, worst_at = err, tuple(int(i) for i in idx)
        report.checks.append(TensorCheck(name, k, worst, worst_at, worst < tol))
    return report


def grad_check(
    model="gradcheck-tiny",
    tol: float = 1e-5,
    seed: int = 0,
    coords: int = 5,
    h: float = 3e-6,
    batch: int = 2,
    std: float = 0.3,
    names: Callable[[str], bool] | None = None,
) -> GradCheckReport:
    """Finite-difference check of every parameter tensor of ``model`` in 64-bit.

    Weights are drawn with a larger ``std`` than for training so that no
    gradient is so small that differencing noise dominates.  The default
    step balances truncation error in the 2-channel patch-embed norm against
    roundoff; both stay near 1e-6 relative.  ``names``
    optionally filters which tensors are checked.
    """
    config = model if isinstance(model, ModelConfig) else preset(model)
    with T.precision("f64"):
        params = init_params(config, seed=seed, dtype=np.float64, std=std)
        rng = np.random.default_rng(seed + 100)
        # perturb unit gains / zero biases so their gradients are generic too
        for _, t in named_parameters(params):
            t.data = t.data + 0.1 * rng.standard_normal(t.shape)
        H, W = config.img_size
        images = rng.standard_normal((batch, H, W, config.in_chans))
        labels = rng.integers(0, config.num_classes, size=batch)
        named = [(n, t) for n, t in named_parameters(params) if names is None or names(n)]

        def loss_fn():
            return cross_entropy(forward(images, params, config), labels)

        return check_gradients(loss_fn, named, tol=tol, coords=coords, h=h, seed=seed)


# ---------------------------------------------------------------------------
# Feature dumps


def feature_maps(image, params: ModelParams, config: ModelConfig, stage: int) -> dict[int, np.ndarray]:
    """Channel-mean map of each path of stage ``stage`` (1-based), keyed by absolute rate."""
    from .model import NUM_STAGES

    if not 1 <= stage <= NUM_STAGES:
        raise ConfigError(f"stage must be 1..{NUM_STAGES}, got {stage}")
    taps: dict = {}
    with T.no_grad():
        forward(image, params, config, taps=taps)
    out = {}
    for rate in config.stage_path_scales[stage - 1]:
        z = taps[("path", stage, rate)].data
        out[rate] = z.mean(axis=-1)
    return out


def dump_features(checkpoint, image_file, stage: int, out_dir) -> list[Path]:
    """Write ``stage{s}_rate{r}.pgm`` for every path of ``stage``; returns the paths."""
    params, config = load_checkpoint(checkpoint)
    img = read_image(image_file)
    dtype = params.embed.proj.weight.dtype
    maps = feature_maps(img.astype(dtype), params, config, stage)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rate, m in maps.items():
        p = out / f"stage{stage}_rate{rate}.pgm"
        write_pgm(p, to_gray8(m))
        written.append(p)
    return written


def infer(checkpoint, image_file) -> tuple[int, np.ndarray]:
    """Predicted class index and logits for one PPM image."""
    params, config = load_checkpoint(checkpoint)
    img = read_image(image_file)
    with T.no_grad():
        logits = forward(img.astype(params.embed.proj.weight.dtype), params, config).data
    return int(np.argmax(logits)), logits


def env_precision(default: str = "f32") -> str:
    mode = os.environ.get("LG_PRECISION", default)
    if mode not in T.PRECISIONS:
        raise ConfigError(f"LG_PRECISION must be one of {sorted(T.PRECISIONS)}, got {mode!r}")
    return mode
