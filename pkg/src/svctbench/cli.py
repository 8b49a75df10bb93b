"""``bench`` command line: run, sweep-alpha, histograms, phantoms, validate.

Exit codes: 0 success, 2 config error, 3 compute failure above threshold.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, InvalidArgumentError
from .experiment import (
    ExperimentConfig,
    any_compute_failure,
    export_histograms,
    export_phantoms,
    output_root,
    run_benchmark,
    sweep_alpha,
)

EXIT_OK, EXIT_CONFIG, EXIT_COMPUTE = 0, 2, 3


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description="Sparse-view CT posterior-sampling benchmark.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="JSON experiment config")
        p.add_argument("--out", help="output root (default: $BENCH_OUT, then config output_dir, then ./out)")
        p.add_argument("--workers", type=int, help="worker threads for chains")

    p = sub.add_parser("run", help="full benchmark")
    common(p)
    p = sub.add_parser("sweep-alpha", help="alpha_scale sweep for one cell")
    common(p)
    p.add_argument("--method", required=True, choices=["mcg", "dps", "pig", "exact"])
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--grid", type=_float_list, required=True, help="comma-separated alpha values")
    p.add_argument("--n", type=int, default=500, help="chains per alpha value")
    p = sub.add_parser("histograms", help="per-pixel histograms for a fixed sinogram")
    common(p)
    p.add_argument("--method", required=True)
    p.add_argument("--p", type=_int_list, required=True, help="comma-separated projection counts")
    p.add_argument("--pixels", type=_int_list, required=True, help="comma-separated flat pixel indices")
    p.add_argument("--num-samples", type=int, default=10000)
    p.add_argument("--bins", type=int, default=60)
    p = sub.add_parser("phantoms", help="write the template set and prior")
    p.add_argument("config")
    p.add_argument("--out")
    p = sub.add_parser("validate", help="check a config without computing anything")
    p.add_argument("config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = ExperimentConfig.from_file(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "validate":
            print(f"{args.config}: ok ({len(cfg.projections)} projections x {len(cfg.methods)} methods, N={cfg.N})")
            return EXIT_OK
        if args.command == "phantoms":
            print(export_phantoms(cfg, args.out))
            return EXIT_OK
        if args.command == "run":
            reports = run_benchmark(cfg, args.out, args.workers)
            print(output_root(cfg, args.out) / cfg.run_id / "report.csv")
            return EXIT_COMPUTE if any_compute_failure(reports) else EXIT_OK
        if args.command == "sweep-alpha":
            rows = sweep_alpha(cfg, args.method, args.p, args.grid, args.n, args.out, args.workers)
            for r in rows:
                print(f"alpha={r['alpha_scale']:g} nmc={r['nmc']} pps_mmd={r['pps_mmd']} pps_fd={r['pps_fd']}")
            return EXIT_COMPUTE if any(r["status"] == "failed" for r in rows) else EXIT_OK
        if args.command == "histograms":
            doc = export_histograms(cfg, args.method, args.p, args.pixels, args.num_samples, args.bins,
                                    args.out, args.workers)
            for e in doc["entries"]:
                print(f"p={e['p']} pixel={e['pixel']} W1={e['w1_samples']:.4g} (oracle std {e['oracle_std']:.4g})")
            return EXIT_OK
    except (ConfigError, InvalidArgumentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
