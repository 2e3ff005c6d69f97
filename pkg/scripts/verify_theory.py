#!/usr/bin/env python3
"""Run every randomized theory check and print the bound-function landmarks.

    python3 scripts/verify_theory.py            # full-size runs
    python3 scripts/verify_theory.py --cases 1000
"""
import argparse
import sys

from tscp import theory
from tscp.cli import run_theory_checks


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cases", type=int, default=None, help="cases per check (default: full size)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    total = 0
    for rep in run_theory_checks(args.cases, args.seed):
        s = rep.summary()
        total += rep.violations
        print(f"{s['check']:22s} cases={s['cases']:<7d} covered={s['covered']:<7d} "
              f"violations={s['violations']}")

    for c, dz in ((100, 8.0), (10, 4.0)):
        iv = ", ".join(f"({a:.3f}, {b:.3f})" for a, b in theory.bound_intervals(c, dz))
        print(f"b(T) < {dz:g} for C={c}: {iv}")
    for c in (10, 100, 1000):
        print(f"bound minimizer C={c}: T = {theory.bound_minimizer(c):.3f}")
    print(f"violations: {total}")
    return 0 if total == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
