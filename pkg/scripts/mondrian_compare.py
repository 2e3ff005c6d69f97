#!/usr/bin/env python3
"""Classwise (Mondrian) CP against pooled RAPS at a tuned temperature, few samples per class.

    python3 scripts/mondrian_compare.py --trials 100 --cp-fraction 0.05
"""
import argparse

import numpy as np

from tscp.conformal import ScoreMethod
from tscp.sweep import mondrian_compare, summarize_comparison
from tscp.synthetic import make_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--num-samples", type=int, default=20_000)
    ap.add_argument("--num-classes", type=int, default=100)
    ap.add_argument("--cp-fraction", type=float, default=0.05)
    ap.add_argument("--alpha", type=float, default=0.1)
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    table = make_table(args.num_samples, args.num_classes, 2.0, seed=args.seed)
    per_class = args.cp_fraction * args.num_samples / args.num_classes
    print(f"about {per_class:.0f} CP samples per class, {args.trials} trials")
    res = mondrian_compare(table, 0.1, args.cp_fraction, ScoreMethod("raps", True), args.alpha,
                           args.trials, args.seed)
    for r in summarize_comparison(res):
        print(f"{r['approach']:10s} {r['metric']:12s} median={r['median']:.4f} std={r['std']:.4f}")
    t_hat = np.asarray(res["t_hat"])
    print(f"T-hat per trial: median {np.median(t_hat):.2f}, range {t_hat.min():.1f}..{t_hat.max():.1f}")


if __name__ == "__main__":
    main()
