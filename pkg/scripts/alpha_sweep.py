"""Tune the MCG and DPS step weights per projection count.

    python scripts/alpha_sweep.py configs/default.json --p 1 6 18 --n 300
"""

import argparse

import numpy as np

from svctbench.experiment import ExperimentConfig, sweep_alpha


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--p", type=int, nargs="+", default=[1, 6, 18])
    ap.add_argument("--methods", nargs="+", default=["mcg", "dps"])
    ap.add_argument("--grid", type=float, nargs="+", default=list(np.geomspace(0.1, 100, 7)))
    ap.add_argument("--n", type=int, default=300)
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = ExperimentConfig.from_file(args.config)
    for method in args.methods:
        for p in args.p:
            best = sweep_alpha(cfg, method, p, args.grid, args.n, args.out)[0]
            print(f"{method} p={p}: best alpha_scale {best['alpha_scale']:.4g} (nmc {best['nmc']:.4g})")


if __name__ == "__main__":
    main()
