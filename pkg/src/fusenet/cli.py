"""Command line entry point: ``fusenet run | gen | gradcheck``."""

from __future__ import annotations

import argparse
import logging
import sys
import time

from .config import parse_config
from .data import SyntheticTaskSpec, gen_synthetic, write_features
from .errors import FusenetError
from .experiment import centralnet_gradcheck, emit_outputs, run_experiment

GRADCHECK_TOLERANCE = 1e-3
TASK_ALIASES = {"xor": "xor_complementary", "redundant": "redundant", "noisy": "noisy_modality"}


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def cmd_run(args) -> int:
    config = parse_config(args.config)
    out = args.out or str(config.resolve(config.experiment.output_dir))
    report = run_experiment(config, workers=args.workers)
    emit_outputs(report, out)
    width = max(len(m) for m in config.experiment.methods)
    for row in report.table:
        std = "n/a" if row.std is None else f"{row.std:.4f}"
        print(f"{row.method:<{width}}  {row.metric} {row.mean:.4f} +- {std}  (n={row.n_runs})")
    failed = [r for r in report.runs if r.status != "ok"]
    if failed:
        print(f"{len(failed)} run(s) failed; see {out}/runs.csv", file=sys.stderr)
    print(f"outputs written to {out}")
    return 0


def cmd_gen(args) -> int:
    spec = SyntheticTaskSpec(TASK_ALIASES[args.task], args.n_train, args.n_val, args.n_test,
                             _ints(args.widths), args.noise, args.classes, args.seed)
    path = write_features(gen_synthetic(spec), args.out)
    print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    config = parse_config(args.config)
    start = time.perf_counter()
    err = centralnet_gradcheck(config, step=args.step)
    elapsed = time.perf_counter() - start
    ok = err < GRADCHECK_TOLERANCE
    print(f"max relative error: {err:.3e} ({'PASS' if ok else 'FAIL'} at tolerance {GRADCHECK_TOLERANCE:g}, {elapsed:.1f}s)")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusenet", description="Multimodal fusion training engine")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train every configured method over every seed")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (default: [experiment] output_dir)")
    run.add_argument("--workers", type=int, help="parallel worker processes")
    run.set_defaults(func=cmd_run)

    gen = sub.add_parser("gen", help="write a synthetic task as CSV files plus a manifest")
    gen.add_argument("--task", choices=sorted(TASK_ALIASES), required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--noise", type=float, default=0.1)
    gen.add_argument("--widths", default="8,8")
    gen.add_argument("--classes", type=int, default=2)
    gen.add_argument("--n-train", type=int, default=2000)
    gen.add_argument("--n-val", type=int, default=500)
    gen.add_argument("--n-test", type=int, default=500)
    gen.set_defaults(func=cmd_gen)

    gc = sub.add_parser("gradcheck", help="finite-difference check of a fresh CentralNet")
    gc.add_argument("--config", required=True)
    gc.add_argument("--step", type=float, default=1e-5)
    gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FusenetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
