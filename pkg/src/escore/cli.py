"""Command-line front end.

Verbs: train-head, sample, eval, compare-swissroll, train-mar, decode,
sweep, gradcheck. Exit codes: 0 success, 1 usage/config error, 2
runtime/numeric failure. ESCORE_THREADS caps the sweep worker pool;
results are independent of it.
"""
from __future__ import annotations

import argparse
import sys

from . import experiments, verify
from .config import ConfigError, resolve_config
from .graph import NonFiniteError
from .heads import HEAD_KINDS
from .mar import DecodeConfig
from .nn import NonFiniteGradientError

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(self.prog + ": error: " + message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file merged over defaults")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY.PATH=VALUE", help="dotted-key config override")


def _build_parser() -> _Parser:
    parser = _Parser(prog="escore", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train-head", help="train one sampling head on a 2-D toy")
    p.add_argument("--method", required=True, choices=HEAD_KINDS)
    p.add_argument("--dataset", default="swissroll", choices=["swissroll"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("sample", help="draw points from a trained head")
    p.add_argument("--run", help="run directory containing head.ckpt")
    p.add_argument("--ckpt", help="explicit checkpoint path")
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output samples CSV")
    p.add_argument("--svg", help="optional scatter plot path")

    p = sub.add_parser("eval", help="score generated points against a reference")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True, help="metrics CSV (appended)")
    p.add_argument("--method", default="unknown")
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bandwidth", default="median")
    p.add_argument("--metrics", default="mmd,wsd,energy",
                   help="comma list from {mmd,wsd,energy}")

    p = sub.add_parser("compare-swissroll",
                       help="train all five heads and compare one-step sampling")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("train-mar", help="train a masked autoregressive model")
    p.add_argument("--role", required=True, choices=["teacher", "student"])
    p.add_argument("--teacher", help="teacher checkpoint (required for lambda > 0)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("decode", help="iterative parallel decoding from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--class", dest="class_id", default="0",
                   help="class id, or 'null' for unconditional")
    p.add_argument("--iterations", type=int)
    p.add_argument("--cfg", dest="cfg_scale", type=float)
    p.add_argument("--schedule", choices=["cosine", "uniform"])
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--head-steps", type=int, dest="head_steps",
                   help="per-position sampling steps (non-energy heads; "
                        "defaults to 1 for energy, the chain length otherwise)")
    p.add_argument("--no-guidance", action="store_true",
                   help="single conditional pass, no null combination")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("sweep", help="grid sweep over lambda | cfg | m | wiring")
    p.add_argument("--param", required=True, choices=list(experiments.SWEEP_PARAMS))
    p.add_argument("--values", required=True, help="comma-separated grid values")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--points", type=int, default=verify.N_POINTS)
    return parser


def _resolved(args, **extra) -> dict:
    cfg = resolve_config(args.overrides, args.config)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    for key, value in extra.items():
        section, name = key.split(".")
        cfg[section][name] = value
    return cfg


def _parse_values(param: str, text: str) -> list:
    items = [v.strip() for v in text.split(",") if v.strip()]
    if param in ("lambda", "cfg"):
        return [float(v) for v in items]
    if param == "m":
        return [int(v) for v in items]
    for v in items:
        if v not in ("noise_as_input", "noise_as_condition"):
            raise ConfigError(f"unknown wiring {v!r}")
    return items


def _dispatch(args) -> int:
    if args.verb == "train-head":
        cfg = _resolved(args, **{"head.method": args.method})
        ckpt = experiments.run_train_head(cfg, args.out)
        print(f"checkpoint written: {ckpt}")
        return 0

    if args.verb == "sample":
        if not args.ckpt and not args.run:
            raise ConfigError("sample needs --run or --ckpt")
        ckpt = args.ckpt or f"{args.run}/head.ckpt"
        experiments.run_sample(ckpt, args.steps, args.n, args.seed, args.out,
                               svg_path=args.svg)
        print(f"samples written: {args.out}")
        return 0

    if args.verb == "eval":
        names = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
        bandwidth = args.bandwidth if args.bandwidth == "median" else float(args.bandwidth)
        report = experiments.run_eval(args.generated, args.reference, args.out,
                                      args.method, args.steps, args.seed,
                                      bandwidth, names)
        print(f"mmd={report.mmd!r} wsd={report.wsd!r} energy_v={report.energy_v!r}")
        return 0

    if args.verb == "compare-swissroll":
        path = experiments.run_compare(_resolved(args), args.out)
        print(f"metrics written: {path}")
        return 0

    if args.verb == "train-mar":
        cfg = _resolved(args)
        ckpt = experiments.run_train_mar(cfg, args.out, args.role, args.teacher)
        print(f"checkpoint written: {ckpt}")
        return 0

    if args.verb == "decode":
        cfg = _resolved(args)
        d = cfg["decode"]
        class_id = None if args.class_id == "null" else int(args.class_id)
        path = experiments.run_decode(
            args.ckpt, class_id,
            iterations=args.iterations or d["iterations"],
            cfg_scale=d["cfg_scale"] if args.cfg_scale is None else args.cfg_scale,
            schedule=args.schedule or d["schedule"],
            seed=args.seed,
            guided=not args.no_guidance,
            head_steps=args.head_steps,
            n_seq=args.n or d["n_seq"],
            out_dir=args.out)
        print(f"sequences written: {path}")
        return 0

    if args.verb == "sweep":
        cfg = _resolved(args)
        values = _parse_values(args.param, args.values)
        path = experiments.run_sweep(cfg, args.out, args.param, values)
        print(f"sweep written: {path}")
        return 0

    if args.verb == "gradcheck":
        results = verify.run_suite(n_points=args.points, composite_points=args.points)
        print(verify.format_table(results))
        if all(r.passed for r in results):
            print("gradcheck: all checks passed")
            return 0
        print("gradcheck: FAILURES detected", file=sys.stderr)
        return RUNTIME_EXIT

    raise ConfigError(f"unknown verb {args.verb!r}")


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return USAGE_EXIT
        return 0 if not exc.code else USAGE_EXIT
    try:
        return _dispatch(args)
    except (ConfigError, ValueError) as exc:
        print(f"escore: error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (NonFiniteError, NonFiniteGradientError, FloatingPointError,
            RuntimeError) as exc:
        print(f"escore: runtime failure: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    raise SystemExit(main())
