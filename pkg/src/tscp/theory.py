"""Numerical checks of how temperature scaling moves APS scores and set sizes.

Functions here take logits sorted in descending order. The ``verify_*``
runners sample random cases, evaluate a claimed implication on each and
count violations; since the claims are theorems, any violation points at an
implementation bug.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import mpmath as mp
import numpy as np
from scipy.optimize import brentq

from .calibrate import golden_section
from .conformal import ScoreMethod, label_scores, quantile_index, sort_order
from .data import LogitsTable, make_rng
from .softmax import check_temperature, entropy_at, softmax


def _as_sorted(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim < 1 or z.shape[-1] < 2:
        raise ValueError("need at least two logits")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if np.any(np.diff(z, axis=-1) > 0):
        raise ValueError("logits must be sorted in descending order")
    return z


def _check_m(m, c):
    m = np.asarray(m)
    if np.any((m < 1) | (m > c)):
        raise ValueError(f"M must lie in [1, {c}]")
    return m


def _tail_mass(z: np.ndarray, t: float, m) -> np.ndarray:
    """Softmax mass beyond the first ``m`` entries, computed directly (accurate when small)."""
    e = np.exp((z - z[..., :1]) / t)
    tails = np.cumsum(e[..., ::-1], axis=-1)[..., ::-1]  # tails[..., i] = sum_{j >= i} e_j
    tails = np.concatenate([tails, np.zeros(z.shape[:-1] + (1,))], axis=-1)
    m = np.asarray(m, dtype=np.int64)
    if z.ndim == 1:
        return tails[m] / tails[0]
    m = np.broadcast_to(m, z.shape[:-1])
    num = np.take_along_axis(tails, m[..., None], axis=-1)[..., 0]
    return num / tails[..., 0]


def gap(z, temperature: float, m) -> float | np.ndarray:
    """Top-``m`` softmax mass at T = 1 minus the same at temperature T.

    Vectorises over leading axes of ``z`` and over ``m``.
    """
    z = _as_sorted(z)
    t = check_temperature(temperature)
    m = _check_m(m, z.shape[-1])
    g = _tail_mass(z, t, m) - _tail_mass(z, 1.0, m)
    return float(g) if np.ndim(g) == 0 else g


def grad_gap_z1(z, temperature: float, m) -> float | np.ndarray:
    """Analytic derivative of ``gap`` with respect to the largest logit."""
    z = _as_sorted(z)
    t = check_temperature(temperature)
    m = _check_m(m, z.shape[-1])
    p1 = softmax(z, 1.0)[..., 0]
    pt = softmax(z, t)[..., 0]
    g = p1 * _tail_mass(z, 1.0, m) - pt * _tail_mass(z, t, m) / t
    return float(g) if np.ndim(g) == 0 else g


def bound_b(temperature: float, num_classes: int) -> float:
    """Margin above which the sign of ``grad_gap_z1`` is fixed by the branch of T."""
    t = check_temperature(temperature)
    c = int(num_classes)
    if c < 2:
        raise ValueError("need C >= 2")
    if t == 1.0:
        raise ValueError("bound is undefined at T = 1")
    if t > 1:
        return max(t / (t - 1) * math.log(4 * t), t / (t + 1) * math.log(4 * t * (c - 1) ** 2))
    return max(t / (t - 1) * math.log(t / 4), t / (t + 1) * math.log(4 * (c - 1) ** 2 / t))


def bound_intervals(num_classes: int, dz: float, t_lo: float = 1e-3, t_hi: float = 50.0,
                    step: float = 1e-3) -> list[tuple[float, float]]:
    """Temperature intervals where ``bound_b(T) < dz``, endpoints refined by Brent's method."""
    f = lambda t: bound_b(t, num_classes) - dz  # noqa: E731
    out = []
    for lo, hi in ((t_lo, 1 - 1e-9), (1 + 1e-9, t_hi)):
        ts = np.arange(lo, hi, step)
        ts = np.append(ts, hi)
        vals = np.array([f(t) for t in ts])
        inside = vals < 0
        start = ts[0] if inside[0] else None
        for i in range(1, len(ts)):
            if inside[i] != inside[i - 1]:
                root = brentq(f, ts[i - 1], ts[i], xtol=1e-12)
                if inside[i]:
                    start = root
                else:
                    out.append((float(start), float(root)))
                    start = None
        if start is not None:
            out.append((float(start), float(ts[-1])))
    return out


def bound_minimizer(num_classes: int, t_lo: float = 1.01, t_hi: float = 10.0,
                    step: float = 0.01) -> float:
    """T > 1 at which the bound is smallest: grid bracket, then golden section."""
    f = lambda t: bound_b(t, num_classes)  # noqa: E731
    ts = np.round(np.arange(t_lo, t_hi + step / 2, step), 10)
    i = int(np.argmin([f(t) for t in ts]))
    lo, hi = ts[max(i - 1, 0)], ts[min(i + 1, len(ts) - 1)]
    t, _, _ = golden_section(f, float(lo), float(hi), 1e-8)
    return float(t)


@dataclass
class TheoryReport:
    """Per-case records of one verification run plus a violation count."""

    name: str
    columns: dict = field(repr=False)
    violations: int = 0
    covered: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def num_cases(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def records(self):
        keys = list(self.columns)
        for i in range(self.num_cases):
            yield {k: _jsonable(self.columns[k][i]) for k in keys}

    def summary(self) -> dict:
        return {"check": self.name, "cases": self.num_cases, "covered": self.covered,
                "violations": self.violations, **self.extra}

    def write_jsonl(self, fh) -> None:
        for rec in self.records():
            fh.write(json.dumps({"check": self.name, **rec}) + "\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def random_sorted_logits(rng: np.random.Generator, n: int, c: int, dz=None,
                         spread: float = 3.0) -> np.ndarray:
    """Sorted logits with the top margin set to ``dz`` (sampled when None).

    Entries after the first are ``-|spread * N(0,1)|`` sorted, so z_2 = max of them.
    """
    rest = -np.sort(np.abs(spread * rng.standard_normal((n, c - 1))), axis=1)
    rest -= rest[:, :1]
    if dz is None:
        dz = rng.exponential(2.0, size=n)
    z = np.empty((n, c))
    z[:, 0] = np.asarray(dz)
    z[:, 1:] = rest
    return z


def random_temperatures(rng, n: int, below: bool) -> np.ndarray:
    """Log-uniform on [0.05, 0.98] or [1.02, 10]."""
    lo, hi = (0.05, 0.98) if below else (1.02, 10.0)
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size=n))


def verify_gradient_sign_theorem(num_cases: int = 100_000, seed: int = 0, num_classes: int = 10,
                                 grad_fn=None) -> TheoryReport:
    """Whenever the top margin exceeds the bound, d gap / d z_1 must be > 0 (T < 1) or < 0 (T > 1).

    ``num_cases`` cases per branch; margins are drawn between 0.25 and 2 times the bound.
    M = C is excluded (the gap is identically zero there).
    """
    grad_fn = grad_gap_z1 if grad_fn is None else grad_fn
    rng = make_rng(seed)
    c = num_classes
    cols = {k: [] for k in ("T", "M", "dz", "bound", "grad", "covered", "ok")}
    for below in (True, False):
        ts = random_temperatures(rng, num_cases, below)
        b = np.array([bound_b(t, c) for t in ts])
        dz = b * rng.uniform(0.25, 2.0, size=num_cases)
        z = random_sorted_logits(rng, num_cases, c, dz)
        m = rng.integers(1, c, size=num_cases)
        grad = np.array([grad_fn(z[i], ts[i], int(m[i])) for i in range(num_cases)]) \
            if grad_fn is not grad_gap_z1 else _grad_rows(z, ts, m)
        covered = dz > b
        ok = np.where(covered, grad > 0 if below else grad < 0, True)
        for k, v in zip(cols, (ts, m, dz, b, grad, covered, ok)):
            cols[k].append(v)
    cols = {k: np.concatenate(v) for k, v in cols.items()}
    return TheoryReport("gradient_sign", cols, int((~cols["ok"]).sum()), int(cols["covered"].sum()),
                        {"num_classes": c})


def _grad_rows(z, ts, m):
    """grad_gap_z1 row by row with per-row temperatures, vectorised."""
    ts = np.asarray(ts)[:, None]
    e1 = np.exp(z - z[:, :1])
    et = np.exp((z - z[:, :1]) / ts)
    idx = np.arange(z.shape[1])[None, :]
    tail_mask = idx >= np.asarray(m)[:, None]
    s1, st = e1.sum(1), et.sum(1)
    p1, pt = 1 / s1, 1 / st
    tail1 = (e1 * tail_mask).sum(1) / s1
    tailt = (et * tail_mask).sum(1) / st
    return p1 * tail1 - pt * tailt / ts[:, 0]


def _gap_mp(z, t, m, dps: int = 40):
    with mp.workdps(dps):
        e1 = [mp.exp(mp.mpf(v)) for v in z]
        et = [mp.exp(mp.mpf(v) / mp.mpf(t)) for v in z]
        return mp.fsum(e1[:m]) / mp.fsum(e1) - mp.fsum(et[:m]) / mp.fsum(et)


def fd_grad_z1(z, temperature: float, m: int, h: float = 1e-6) -> float:
    """Central difference of ``gap`` in z_1, evaluated with 40-digit arithmetic."""
    z = [float(v) for v in z]
    with mp.workdps(40):
        zp, zm = [mp.mpf(v) for v in z], [mp.mpf(v) for v in z]
        zp[0] += mp.mpf(h)
        zm[0] -= mp.mpf(h)
        return float((_gap_mp(zp, temperature, m) - _gap_mp(zm, temperature, m)) / (2 * mp.mpf(h)))


def gradient_fd_check(num_cases: int = 10_000, seed: int = 0, num_classes: int = 10,
                      h: float = 1e-6, rtol: float = 1e-5, grad_fn=None) -> TheoryReport:
    """Analytic gradient against a central difference in z_1.

    The difference quotient is formed in extended precision so that its
    error is the O(h^2) truncation term rather than cancellation noise.
    z_1 - z_2 >= 0.1 here, so the +-h moves keep the vector sorted.
    """
    rng = make_rng(seed)
    c = num_classes
    ts = np.where(rng.random(num_cases) < 0.5, random_temperatures(rng, num_cases, True),
                  random_temperatures(rng, num_cases, False))
    z = random_sorted_logits(rng, num_cases, c, rng.uniform(0.1, 6.0, num_cases), spread=2.0)
    m = rng.integers(1, c, size=num_cases)
    if grad_fn is None:
        a = _grad_rows(z, ts, m)
    else:
        a = np.array([grad_fn(z[i], ts[i], int(m[i])) for i in range(num_cases)])
    fd = np.array([fd_grad_z1(z[i], ts[i], int(m[i]), h) for i in range(num_cases)])
    rel = np.abs(a - fd) / np.maximum(np.abs(fd), 1e-300)
    return TheoryReport("gradient_fd", {"T": ts, "M": m, "dz": z[:, 0] - z[:, 1], "analytic": a,
                                        "finite_difference": fd, "rel_err": rel,
                                        "ok": rel <= rtol},
                        int((rel > rtol).sum()), num_cases,
                        {"max_rel_err": float(rel.max()), "rtol": rtol})


def set_sizes(sorted_probs: np.ndarray, q) -> np.ndarray:
    """Row-wise ``deterministic_set_size`` for descending probability rows."""
    cum = np.cumsum(sorted_probs, axis=-1)
    hit = cum >= np.asarray(q)[..., None]
    return np.where(hit.any(axis=-1), hit.argmax(axis=-1) + 1, sorted_probs.shape[-1])


def verify_sufficient_condition(num_cases: int = 100_000, seed: int = 0,
                                num_classes: int = 10) -> TheoryReport:
    """Gap inequality on the (L-1)- or (L_T-1)-prefix must force the stated set-size order.

    T > 1 with q >= q_T:  g(L-1) >= q - q_T  implies  L <= L_T   (needs L > 1)
    T < 1 with q <= q_T:  g(L_T-1) <= q - q_T implies L >= L_T   (needs L_T > 1)
    """
    rng = make_rng(seed)
    c = num_classes
    below = rng.random(num_cases) < 0.5
    ts = np.where(below, random_temperatures(rng, num_cases, True),
                  random_temperatures(rng, num_cases, False))
    z = random_sorted_logits(rng, num_cases, c, rng.exponential(1.5, num_cases), spread=1.5)
    p = softmax(z, 1.0)
    pt = softmax(z / ts[:, None], 1.0)
    q = rng.uniform(0.05, 1.0, num_cases)
    # threshold moves from tiny (antecedent usually true) to large
    shift = rng.uniform(0, 1, num_cases) * np.where(rng.random(num_cases) < 0.5, 0.05, 0.5)
    q_t = np.where(below, np.minimum(q + shift, 1.0), np.maximum(q - shift, 1e-6))
    L = set_sizes(p, q)
    Lt = set_sizes(pt, q_t)
    cum, cumt = np.cumsum(p, axis=1), np.cumsum(pt, axis=1)

    def prefix(cm, k):  # sum of the first k entries, k >= 0
        padded = np.concatenate([np.zeros((len(cm), 1)), cm], axis=1)
        return padded[np.arange(len(cm)), k]

    applicable = np.where(below, Lt > 1, L > 1)
    k = np.where(below, Lt - 1, L - 1)
    g = prefix(cum, k) - prefix(cumt, k)
    antecedent = applicable & np.where(below, g <= q - q_t, g >= q - q_t)
    conclusion = np.where(below, L >= Lt, L <= Lt)
    ok = ~antecedent | conclusion
    trivial = ~applicable
    return TheoryReport(
        "sufficient_condition",
        {"T": ts, "q": q, "q_T": q_t, "L": L, "L_T": Lt, "antecedent": antecedent,
         "trivial": trivial, "conclusion": conclusion, "ok": ok},
        int((~ok).sum()), int(antecedent.sum()),
        {"trivial_cases": int(trivial.sum()), "trivial_conclusion_holds": bool(conclusion[trivial].all())},
    )


def last_index(d: np.ndarray, positive: bool) -> int | None:
    """1-based last index with d > 0 (or d < 0); None when there is none."""
    hits = np.flatnonzero(d > 0 if positive else d < 0)
    return int(hits[-1]) + 1 if hits.size else None


@dataclass
class DecayRecord:
    T: float
    dz: float
    s: int | None
    bound: float
    max_gap_diff: float
    precondition: bool
    ok: bool


def decay_bound(z, temperature: float) -> DecayRecord:
    """Bound on ``|gap(M) - gap(L)|`` over all M, L when only the top entry moves.

    The bound applies when the last index at which TS lowers (T > 1) or raises
    (T < 1) the probability is 1; otherwise the record has
    ``precondition=False`` and nothing is asserted.
    """
    z = _as_sorted(z)
    t = check_temperature(temperature)
    if t == 1.0:
        raise ValueError("T = 1 leaves every probability unchanged")
    c = z.size
    m = np.arange(1, c + 1)
    g = _tail_mass(z, t, m) - _tail_mass(z, 1.0, m)
    d = np.diff(np.concatenate([[0.0], g]))
    s = last_index(d, positive=t > 1)
    dz = float(z[0] - z[1])
    r = (c - 1) * math.exp(-dz / t if t > 1 else -dz)
    bound = r / (r + 1)
    max_diff = float(np.abs(g[:, None] - g[None, :]).max())
    pre = s == 1
    return DecayRecord(t, dz, s, bound, max_diff, pre, (max_diff < bound) if pre else True)


def verify_decay_bound(num_cases: int = 10_000, seed: int = 0, num_classes: int = 100,
                       max_draws: int | None = None) -> TheoryReport:
    """Collect ``num_cases`` random cases with s = 1 and check the bound on each."""
    rng = make_rng(seed)
    c = num_classes
    max_draws = max_draws or 50 * num_cases
    recs, drawn, skipped = [], 0, 0
    while len(recs) < num_cases and drawn < max_draws:
        batch = 2 * (num_cases - len(recs)) + 16
        below = rng.random(batch) < 0.5
        ts = np.where(below, random_temperatures(rng, batch, True),
                      random_temperatures(rng, batch, False))
        z = random_sorted_logits(rng, batch, c, rng.uniform(1.0, 15.0, batch), spread=2.0)
        for i in range(batch):
            drawn += 1
            rec = decay_bound(z[i], ts[i])
            if rec.precondition:
                recs.append(rec)
                if len(recs) == num_cases:
                    break
            else:
                skipped += 1
    cols = {k: np.array([getattr(r, k) for r in recs]) for k in
            ("T", "dz", "bound", "max_gap_diff", "ok")}
    return TheoryReport("decay_bound", cols, int((~cols["ok"]).sum()), len(recs),
                        {"num_classes": c, "skipped_precondition_unmet": skipped})


def verify_score_decrease(num_cases: int = 100_000, seed: int = 0, num_classes: int = 10
                          ) -> TheoryReport:
    """Top-L softmax mass never grows with T; strictly falls unless L = C or all logits tie."""
    rng = make_rng(seed)
    c = num_classes
    z = random_sorted_logits(rng, num_cases, c, rng.exponential(1.5, num_cases), spread=2.0)
    # a slice of cases with all-equal logits to exercise the equality branch
    flat = rng.random(num_cases) < 0.01
    z[flat] = rng.normal(size=(int(flat.sum()), 1))
    t_lo = np.exp(rng.uniform(math.log(0.1), math.log(10.0), num_cases))
    t_hi = t_lo * np.exp(rng.uniform(math.log(1.01), math.log(10.0), num_cases))
    L = rng.integers(1, c + 1, size=num_cases)
    mass_lo = 1 - _tail_rows(z, t_lo, L)
    mass_hi = 1 - _tail_rows(z, t_hi, L)
    tail_lo, tail_hi = _tail_rows(z, t_lo, L), _tail_rows(z, t_hi, L)
    strict_expected = (L < c) & ~flat
    ok = np.where(strict_expected, tail_hi > tail_lo, tail_hi >= tail_lo)
    return TheoryReport("score_decrease",
                        {"T_small": t_lo, "T_large": t_hi, "L": L, "mass_small_T": mass_lo,
                         "mass_large_T": mass_hi, "strict_expected": strict_expected, "ok": ok},
                        int((~ok).sum()), num_cases,
                        {"strict_cases": int(strict_expected.sum())})


def _tail_rows(z, ts, m):
    e = np.exp((z - z[:, :1]) / np.asarray(ts)[:, None])
    mask = np.arange(z.shape[1])[None, :] >= np.asarray(m)[:, None]
    return (e * mask).sum(1) / e.sum(1)


def verify_entropy_monotonicity(num_cases: int = 100_000, seed: int = 0, num_classes: int = 10,
                                slack: float = 1e-12) -> TheoryReport:
    """Entropy of softmax(z / T) strictly increases with T for non-constant z."""
    rng = make_rng(seed)
    z = rng.normal(scale=rng.uniform(0.1, 3.0, (num_cases, 1)), size=(num_cases, num_classes))
    t_lo = np.exp(rng.uniform(math.log(0.2), math.log(5.0), num_cases))
    t_hi = t_lo * np.exp(rng.uniform(math.log(1.01), math.log(5.0), num_cases))
    h_lo = entropy_at(z / t_lo[:, None], 1.0)
    h_hi = entropy_at(z / t_hi[:, None], 1.0)
    ok = h_hi > h_lo - slack
    strict = h_hi > h_lo
    return TheoryReport("entropy_monotonicity",
                        {"T_small": t_lo, "T_large": t_hi, "H_small": h_lo, "H_large": h_hi,
                         "strict": strict, "ok": ok},
                        int((~ok).sum()), num_cases, {"strict_increases": int(strict.sum())})


def quantile_similarity_report(table: LogitsTable, method: ScoreMethod, alpha: float,
                               temperatures, indices=None, seed: int = 0) -> list[dict]:
    """Which CP sample sets the threshold at T = 1 and at each T, with its top margin.

    Descriptive only: nothing here is asserted.
    """
    idx = np.arange(table.num_samples) if indices is None else np.asarray(indices, dtype=np.int64)
    z = table.logits[idx]
    y = table.labels[idx]
    order = sort_order(z)
    zs = np.take_along_axis(z, order, axis=1)
    dz = zs[:, 0] - zs[:, 1]
    u = make_rng(seed).random(len(idx)) if method.randomized else None
    k, _ = quantile_index(len(idx), alpha)

    def qsample(t):
        s = label_scores(method, softmax(z, t), y, u, order)
        return int(np.argsort(s, kind="stable")[k - 1]), s

    i1, _ = qsample(1.0)
    rows = []
    for t in temperatures:
        it, _ = qsample(float(t))
        rows.append({
            "T": float(t),
            "index_T1": int(idx[i1]),
            "index_T": int(idx[it]),
            "same_sample": i1 == it,
            "dz_T1": float(dz[i1]),
            "dz_T": float(dz[it]),
            "median_dz": float(np.median(dz)),
            "top5_T1": np.sort(softmax(z[i1], 1.0))[::-1][:5].tolist(),
            "top5_T": np.sort(softmax(z[it], float(t)))[::-1][:5].tolist(),
        })
    return rows
