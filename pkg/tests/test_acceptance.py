"""Acceptance suite: one test per criterion, each with its own size, tolerance and time budget.

Every test records a PASS/FAIL line that the terminal summary prints at the end
of the run (see ``conftest.py``).
"""
import math
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from tscp import theory
from tscp.calibrate import optimize_temperature
from tscp.conformal import ScoreMethod, fit_threshold
from tscp.data import LogitsTable, make_rng, make_split
from tscp.metrics import evaluate
from tscp.sweep import Grid, approximate_curves, mondrian_compare, run_sweep
from tscp.synthetic import GeneratorConfig, calibrated_logits, make_table

pytestmark = pytest.mark.slow

RESULTS = []


def record(num, title, passed, detail, seconds, budget):
    ok = bool(passed) and seconds < budget
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d} {title}: {detail} "
                   f"({seconds:.1f}s / budget {budget:g}s)")
    return ok


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


ALL_METHODS = [ScoreMethod(k, r) for k in ("lac", "aps", "raps") for r in (False, True)]


def test_01_marginal_coverage():
    n_cp, n_test, trials = 500, 1000, 1000
    with Timer() as tm:
        # a single pool; each trial draws a fresh CP / test pair without replacement
        pool = make_table(100_000, 10, 1.0, seed=101)
        rng = make_rng(102)
        covs = {(m.name, a): [] for m in ALL_METHODS for a in (0.05, 0.1)}
        for trial in range(trials):
            idx = rng.choice(pool.num_samples, n_cp + n_test, replace=False)
            cp, test = idx[:n_cp], idx[n_cp:]
            for m in ALL_METHODS:
                for a in (0.05, 0.1):
                    model = fit_threshold(pool, cp, m, a, 1.0, seed=trial)
                    covs[m.name, a].append(evaluate(model, pool, test, seed=10_000 + trial).coverage)
    worst, ok = [], True
    for (name, a), c in covs.items():
        c = np.asarray(c)
        se = c.std(ddof=1) / math.sqrt(trials)
        lo, hi = 1 - a - 3 * se, 1 - a + 1 / (n_cp + 1) + 3 * se
        ok &= lo <= c.mean() <= hi
        worst.append(f"{name}@{a}={c.mean():.4f}")
    assert record(1, "marginal coverage", ok, ", ".join(worst), tm.seconds, 120)


def test_02_score_decrease():
    with Timer() as tm:
        rep = theory.verify_score_decrease(100_000, seed=2)
    detail = f"{rep.violations} violations, {rep.extra['strict_cases']} strict cases"
    assert record(2, "universal score decrease", rep.violations == 0, detail, tm.seconds, 30)


def test_03_threshold_monotonicity():
    methods = [ScoreMethod("aps"), ScoreMethod("aps", True), ScoreMethod("raps"),
               ScoreMethod("raps", True)]
    with Timer() as tm:
        table = make_table(2000, 100, 2.0, seed=103)
        idx = np.arange(2000)
        temps = Grid().values()
        bad = {}
        for m in methods:
            q = np.array([fit_threshold(table, idx, m, 0.1, t, seed=7).q_hat for t in temps])
            bad[m.name] = int((np.diff(q) > 0).sum())
    ok = not any(bad.values())
    assert record(3, "threshold monotonicity", ok, f"increasing pairs {bad}", tm.seconds, 30)


def test_04_gradient_sign():
    with Timer() as tm:
        rep = theory.verify_gradient_sign_theorem(100_000, seed=4)
        fd = theory.gradient_fd_check(10_000, seed=4)
    ok = rep.violations == 0 and fd.violations == 0
    detail = (f"{rep.violations} violations / {rep.covered} covered of {rep.num_cases}; "
              f"fd max rel err {fd.extra['max_rel_err']:.2e}")
    assert record(4, "gradient sign theorem", ok, detail, tm.seconds, 60)


def test_05_bound_anchor():
    with Timer() as tm:
        iv = theory.bound_intervals(100, 8.0)
    ends = [iv[0][1], iv[1][0], iv[1][1]] if len(iv) == 2 else []
    ok = len(ends) == 3 and all(abs(a - b) <= 0.01 for a, b in zip(ends, (0.83, 1.25, 2.33)))
    detail = "intervals " + ", ".join(f"({a:.4f}, {b:.4f})" for a, b in iv)
    assert record(5, "bound-function anchor", ok and iv[0][0] < 0.01, detail, tm.seconds, 1)


def test_06_sufficient_condition():
    with Timer() as tm:
        rep = theory.verify_sufficient_condition(100_000, seed=6)
    detail = f"{rep.violations} violations, antecedent held in {rep.covered} cases"
    assert record(6, "sufficient condition", rep.violations == 0, detail, tm.seconds, 30)


def test_07_decay_bound():
    with Timer() as tm:
        rep = theory.verify_decay_bound(10_000, seed=7, num_classes=100)
    ok = rep.violations == 0 and rep.num_cases == 10_000
    detail = f"{rep.violations} violations over {rep.num_cases} s=1 cases"
    assert record(7, "exponential decay bound", ok, detail, tm.seconds, 120)


def test_08_entropy():
    with Timer() as tm:
        rep = theory.verify_entropy_monotonicity(100_000, seed=8, slack=1e-12)
    detail = f"{rep.violations} violations, {rep.extra['strict_increases']} strict"
    assert record(8, "entropy monotonicity", rep.violations == 0, detail, tm.seconds, 30)


@pytest.fixture(scope="module")
def trend_table():
    return make_table(20_000, 100, 2.0, seed=109)


def test_09_non_monotonic_trend(trend_table):
    with Timer() as tm:
        split = make_split(trend_table, 0.1, 0.1, 9)
        curve = run_sweep(trend_table, split, [ScoreMethod("lac"), ScoreMethod("aps", True)], 0.1,
                          Grid(), num_trials=10, base_seed=9)
    temps = curve.temperatures
    size = curve.metric("aps-rand", "avg_size")
    gap = curve.metric("aps-rand", "top_cov_gap")
    lac = curve.metric("lac", "avg_size")
    i, j = int(np.argmax(size)), int(np.argmin(gap))
    lac_var = (lac.max() - lac.min()) / lac.mean()
    ok = 0 < i < len(temps) - 1 and temps[i] > 1 and 0 < j < len(temps) - 1 and lac_var < 0.10
    detail = (f"APS T_c={temps[i]:.1f}, TopCovGap argmin T={temps[j]:.1f}, "
              f"LAC relative variation {lac_var:.3%}")
    assert record(9, "non-monotonic trend", ok, detail, tm.seconds, 300)


def test_10_calibration_recovery():
    # {0.5, 2} is closed under inversion, so z * t0 over both values also covers z / t0;
    # the right temperature for z * t0 is t0 and for z / t0 it is 1 / t0.
    found = {}
    with Timer() as tm:
        cfg = GeneratorConfig(num_samples=20_000, num_classes=10, beta=1.0)
        z, y = calibrated_logits(cfg, seed=110)
        for t0 in (0.5, 2.0):
            found[t0] = optimize_temperature(LogitsTable(z * t0, y), "nll").t_star
    ok = all(abs(t - t0) <= 0.05 for t0, t in found.items())
    detail = ", ".join(f"z*{t0:g} = z/{1 / t0:g}: T*={t:.3f}" for t0, t in found.items())
    assert record(10, "calibration recovery", ok, detail, tm.seconds, 60)


def test_11_approximated_curve(trend_table):
    method = ScoreMethod("aps", True)
    with Timer() as tm:
        split = make_split(trend_table, 0.1, 0.1, 11)
        full = run_sweep(trend_table, split, [method], 0.1, Grid(), t_star=1.0)
        approx = approximate_curves(trend_table, split, [method], 0.1, Grid(), seed=11, t_star=1.0)
        rho = spearmanr(full.metric(method.name, "avg_size"),
                        approx.metric(method.name, "avg_size"))[0]
    assert record(11, "approximated-curve fidelity", rho > 0.8, f"Spearman {rho:.3f}",
                  tm.seconds, 300)


def test_12_mondrian_degradation(trend_table):
    method = ScoreMethod("raps", True)
    with Timer() as tm:
        # 5% of 20000 samples over 100 classes: 10 CP samples per class on average
        res = mondrian_compare(trend_table, 0.1, 0.05, method, 0.1, num_trials=100, base_seed=12)
    sd_m = np.std([r.top_cov_gap for r in res["mondrian"]], ddof=1)
    sd_t = np.std([r.top_cov_gap for r in res["ts_t_hat"]], ddof=1)
    detail = f"TopCovGap std Mondrian {sd_m:.4f} vs TS at T-hat {sd_t:.4f}"
    assert record(12, "Mondrian small-sample degradation", sd_m > sd_t, detail, tm.seconds, 300)
