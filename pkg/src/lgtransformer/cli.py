"""Command line entry point: ``lgt <command> ...`` or ``python3 -m lgtransformer``."""
from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import tensor as T
from .analysis import attention_cost, count_flops, overhead_ratio
from .errors import LGError
from .model import ablation, preset

ANALYZE_PRESETS = ("lg_t", "lg_s", "swin_t_equiv", "swin_s_equiv", "tiny-lg", "tiny-swin", "gradcheck-tiny")

# standard ablation rows: extra paths by stage, then by rate
ABLATION_ROWS = (
    ((), True, True),
    ((1,), True, True),
    ((1, 2), True, True),
    ((1, 2, 3), True, True),
    ((1, 2, 3), True, False),
    ((1, 2, 3), False, True),
)


def _int_list(text: str) -> list[int]:
    text = text.strip().lower()
    if text in ("", "none"):
        return []
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def _img(text: str):
    parts = text.lower().replace("x", ",").split(",")
    try:
        vals = [int(p) for p in parts if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad image size {text!r}") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"bad image size {text!r}")
    return tuple(vals)


def cmd_analyze(args) -> int:
    cfg = preset(args.preset)
    rep = count_flops(cfg, args.img)
    print(rep.to_json(indent=2) if args.json else rep.format_table(detail=args.detail))
    return 0


def cmd_symbolic(args) -> int:
    cost = attention_cost(args.paths)
    ratio = overhead_ratio(args.paths)
    if args.json:
        print(json.dumps({"paths": args.paths, "a": float(cost.a), "b": float(cost.b), "overhead_ratio": ratio,
                          "a_exact": str(cost.a), "b_exact": str(cost.b)}))
    else:
        print(f"paths {args.paths}")
        print(f"cost = {cost}")
        print(f"coefficients ({float(cost.a):g}, {float(cost.b):g})")
        print(f"overhead ratio {ratio:g}")
    return 0


def cmd_gradcheck(args) -> int:
    from .train import grad_check

    t0 = time.perf_counter()
    rep = grad_check(args.preset, tol=args.tol, seed=args.seed, coords=args.coords)
    print(json.dumps(rep.to_dict(), indent=2) if args.json else rep.format())
    print(f"{'PASS' if rep.passed else 'FAIL'} in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return 0 if rep.passed else 1


def cmd_train(args) -> int:
    from .train import TrainConfig, env_precision, train

    cfg = TrainConfig(
        lr=args.lr, total_steps=args.steps, batch_size=args.batch_size, seed=args.seed,
        weight_decay=args.weight_decay, precision=env_precision(),
    )

    def log(entry):
        if entry["step"] % args.log_every == 0 or "train_acc" in entry:
            acc = f" acc {entry['train_acc']:.3f}" if "train_acc" in entry else ""
            print(f"step {entry['step']:4d}  loss {entry['loss']:.4f}  lr {entry['lr']:.2e}{acc}", flush=True)

    rec, _ = train(args.preset, cfg, out_dir=args.out, log=None if args.quiet else log)
    print(json.dumps(rec.final, sort_keys=True))
    print(f"wrote {args.out}/run.jsonl and {args.out}/model.ckpt", file=sys.stderr)
    return 0


def cmd_infer(args) -> int:
    from .train import infer

    cls, logits = infer(args.ckpt, args.image)
    if args.json:
        print(json.dumps({"class": cls, "logits": np.asarray(logits, dtype=float).tolist()}))
    else:
        print(f"class {cls}")
        print("logits " + " ".join(f"{v:.6g}" for v in np.ravel(logits)))
    return 0


def cmd_features(args) -> int:
    from .train import dump_features

    for p in dump_features(args.ckpt, args.image, args.stage, args.out):
        print(p)
    return 0


def cmd_ablate(args) -> int:
    rows = ABLATION_ROWS if args.table else [(tuple(args.stages), args.paths16, args.paths32)]
    base = count_flops(preset("swin_t_equiv"), args.img)
    out = []
    for stages, p16, p32 in rows:
        rep = count_flops(ablation(stages, p16, p32), args.img)
        out.append(rep)
    if args.json:
        print(json.dumps([r.to_dict() for r in out], indent=2))
        return 0
    if not args.table:
        print(out[0].format_table())
        print()
    print(f"{'variant':<34} {'params (M)':>10} {'FLOPs (G)':>10} {'d params':>10} {'d FLOPs':>10}")
    for r in out:
        print(f"{r.model:<34} {r.total_params / 1e6:>10.2f} {r.total_flops / 1e9:>10.3f} "
              f"{(r.total_params - base.total_params) / 1e6:>+10.2f} {(r.total_flops - base.total_flops) / 1e9:>+10.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lgt", description="Local-to-Global window attention: analysis, training and tooling.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="parameter / FLOP report for a preset")
    p.add_argument("--preset", required=True, choices=ANALYZE_PRESETS)
    p.add_argument("--img", type=_img, default=None, help="input size, e.g. 224 or 224x320 (default: preset size)")
    p.add_argument("--json", action="store_true")
    p.add_argument("--detail", action="store_true", help="one row per layer")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("symbolic", help="symbolic attention cost of a set of path scales")
    p.add_argument("--paths", type=_int_list, default=[1], help="relative scales, e.g. 1,2,4")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_symbolic)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter tensor (64-bit)")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=5, help="coordinates per tensor")
    p.add_argument("--preset", default="gradcheck-tiny")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on the synthetic blob set")
    p.add_argument("--preset", default="tiny-lg")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--log-every", type=int, default=25)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="classify one PPM image with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("features", help="dump per-path feature maps of one stage as PGM files")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--stage", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("ablate", help="complexity of LG-T variants with extra paths in chosen stages / rates")
    p.add_argument("--stages", type=_int_list, default=[1, 2, 3])
    p.add_argument("--paths16", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--paths32", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--img", type=_img, default=None)
    p.add_argument("--table", action="store_true", help="report all standard stage and rate variants")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        from .train import env_precision

        T.set_default_dtype(env_precision())
        return args.func(args)
    except (LGError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
