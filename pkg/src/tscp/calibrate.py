"""Temperature scaling: ECE / NLL objectives, the T* search and reliability bins."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import LogitsTable
from .softmax import check_temperature

OBJECTIVES = ("ece", "nll")


@dataclass(frozen=True)
class EceConfig:
    num_bins: int = 10

    def __post_init__(self):
        if int(self.num_bins) != self.num_bins or self.num_bins < 2:
            raise ValueError(f"num_bins must be an integer >= 2, got {self.num_bins}")


@dataclass(frozen=True)
class SearchConfig:
    t_min: float = 0.1
    t_max: float = 10.0
    grid_step: float = 0.01
    tol: float = 1e-4

    def __post_init__(self):
        if not (0 < self.t_min < self.t_max) or not math.isfinite(self.t_max):
            raise ValueError(f"invalid temperature bracket [{self.t_min}, {self.t_max}]")
        if not self.grid_step > 0:
            raise ValueError("grid_step must be positive")


@dataclass
class CalibrationResult:
    t_star: float
    objective: str
    objective_value_before: float
    objective_value_after: float
    search_trace: list = field(default_factory=list, repr=False)

    def to_dict(self, with_trace: bool = False) -> dict:
        d = {
            "t_star": self.t_star,
            "objective": self.objective,
            "objective_value_before": self.objective_value_before,
            "objective_value_after": self.objective_value_after,
        }
        if with_trace:
            d["search_trace"] = [list(p) for p in self.search_trace]
        return d


class _Prepared:
    """T-independent pieces of a table, so objectives over a grid cost one exp pass per T."""

    def __init__(self, table: LogitsTable):
        z = table.logits
        rows = np.arange(table.num_samples)
        pred = z.argmax(axis=1)  # TS keeps the argmax
        centered = z - z[rows, pred][:, None]  # <= 0, top entry exactly 0
        self.true_centered = centered[rows, table.labels]
        centered[rows, pred] = -np.inf
        self.rest = centered
        self.hits = (pred == table.labels)

    def rest_mass(self, t: float) -> np.ndarray:
        """Softmax normalizer minus the top term; log1p of it keeps tiny tails."""
        return np.exp(self.rest / t).sum(axis=1)

    def confidence(self, t: float) -> np.ndarray:
        return 1.0 / (1.0 + self.rest_mass(t))

    def nll(self, t: float) -> float:
        return float((np.log1p(self.rest_mass(t)) - self.true_centered / t).sum())


def _confidence_and_hits(table: LogitsTable, temperature: float):
    prep = _Prepared(table)
    return prep.confidence(check_temperature(temperature)), prep.hits


def _ece_from(conf, hits, num_bins: int) -> float:
    b = _bin_index(conf, num_bins)
    acc_sum = np.bincount(b, weights=hits.astype(np.float64), minlength=num_bins)
    conf_sum = np.bincount(b, weights=conf, minlength=num_bins)
    return float(np.abs(acc_sum - conf_sum).sum() / len(conf))


def _bin_index(conf: np.ndarray, num_bins: int) -> np.ndarray:
    # bins [k/L, (k+1)/L), the last one closed at 1
    return np.minimum((conf * num_bins).astype(np.int64), num_bins - 1)


def ece(table: LogitsTable, temperature: float = 1.0, config: EceConfig = EceConfig()) -> float:
    """Expected calibration error, binning samples by their max softmax probability."""
    conf, hits = _confidence_and_hits(table, temperature)
    return _ece_from(conf, hits, config.num_bins)


def nll(table: LogitsTable, temperature: float = 1.0) -> float:
    """Summed negative log-likelihood of the true labels under softmax(z / T)."""
    return _Prepared(table).nll(check_temperature(temperature))


def reliability_diagram(
    table: LogitsTable, temperature: float = 1.0, config: EceConfig = EceConfig()
) -> list[tuple[float, float, int, float, float]]:
    """Per-bin ``(bin_low, bin_high, count, accuracy, mean_confidence)``.

    Empty bins report NaN accuracy and confidence.
    """
    conf, hits = _confidence_and_hits(table, temperature)
    L = config.num_bins
    b = _bin_index(conf, L)
    counts = np.bincount(b, minlength=L)
    acc_sum = np.bincount(b, weights=hits.astype(np.float64), minlength=L)
    conf_sum = np.bincount(b, weights=conf, minlength=L)
    rows = []
    for k in range(L):
        n = int(counts[k])
        acc = acc_sum[k] / n if n else float("nan")
        mc = conf_sum[k] / n if n else float("nan")
        rows.append((k / L, (k + 1) / L, n, float(acc), float(mc)))
    return rows


def golden_section(f, lo: float, hi: float, tol: float = 1e-4):
    """Minimise a unimodal ``f`` on [lo, hi]; returns ``(x, f(x), trace)``."""
    invphi = (math.sqrt(5) - 1) / 2
    trace = []
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    trace += [(c, fc), (d, fd)]
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
            trace.append((c, fc))
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
            trace.append((d, fd))
    return (c, fc, trace) if fc <= fd else (d, fd, trace)


def temperature_grid(t_min: float, t_max: float, step: float) -> np.ndarray:
    n = int(math.floor((t_max - t_min) / step + 1e-9))
    return np.round(t_min + step * np.arange(n + 1), 10)


def optimize_temperature(
    table: LogitsTable,
    objective: str = "nll",
    config: EceConfig = EceConfig(),
    search: SearchConfig = SearchConfig(),
) -> CalibrationResult:
    """Grid scan over the bracket, then golden-section inside the best cell.

    ECE is piecewise constant in T, so for it the grid minimum is returned
    as is. T = 1 is always on the grid when it lies inside the bracket.
    Grid ties resolve to the smallest T.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    if isinstance(search, dict):
        search = SearchConfig(**search)
    prep = _Prepared(table)
    if objective == "ece":
        f = lambda t: _ece_from(prep.confidence(t), prep.hits, config.num_bins)  # noqa: E731
    else:
        f = prep.nll

    grid = temperature_grid(search.t_min, search.t_max, search.grid_step)
    if search.t_min <= 1.0 <= search.t_max and not np.any(np.isclose(grid, 1.0, atol=1e-12)):
        grid = np.sort(np.append(grid, 1.0))
    values = np.array([f(t) for t in grid])
    trace = list(zip(grid.tolist(), values.tolist()))
    i = int(np.argmin(values))  # first occurrence -> smallest T
    t_best, v_best = float(grid[i]), float(values[i])

    if objective == "nll":
        lo = float(grid[max(i - 1, 0)])
        hi = float(grid[min(i + 1, len(grid) - 1)])
        if hi > lo:
            t_ref, v_ref, gtrace = golden_section(f, lo, hi, search.tol)
            trace += gtrace
            if v_ref < v_best:
                t_best, v_best = float(t_ref), float(v_ref)

    before = f(1.0)
    return CalibrationResult(
        t_star=t_best,
        objective=objective,
        objective_value_before=float(before),
        objective_value_after=v_best,
        search_trace=trace,
    )
