"""Per-pixel marginals of several samplers against the exact posterior.

Writes histogram and oracle-density CSVs under <out>/<run_id>/histograms and
prints the W1 distance of each histogram in units of the oracle std.

    python scripts/histograms.py configs/smoke.json --p 1 6 --pixels 10 27
"""

import argparse

from svctbench.experiment import ExperimentConfig, export_histograms


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--methods", nargs="+", default=["dps", "pig", "exact", "oracle"])
    ap.add_argument("--p", type=int, nargs="+", default=[1, 6, 18])
    ap.add_argument("--pixels", type=int, nargs="+", required=True)
    ap.add_argument("--num-samples", type=int, default=2000)
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = ExperimentConfig.from_file(args.config)
    for method in args.methods:
        doc = export_histograms(cfg, method, args.p, args.pixels, args.num_samples, out=args.out)
        for e in doc["entries"]:
            print(f"{method:6s} p={e['p']:<3d} pixel {e['pixel']:<5d} W1/std {e['w1_samples'] / e['oracle_std']:.3f} "
                  f"std ratio {e['sample_std'] / e['oracle_std']:.3f}")


if __name__ == "__main__":
    main()
