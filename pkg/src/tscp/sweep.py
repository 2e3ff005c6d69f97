"""Temperature sweeps, calibration-set curve approximation and the two-branch guideline."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibrate import CalibrationResult, EceConfig, SearchConfig, optimize_temperature
from .conformal import (
    CPModel,
    ScoreMethod,
    conformal_quantile,
    fit_mondrian,
    fit_threshold,
    label_scores,
    predict_set,
    score_matrix,
    sort_order,
)
from .data import LogitsTable, SplitPlan, derive_seed, make_rng, make_split
from .metrics import METRIC_NAMES, MetricsReport, aggregate, coverage_metrics, evaluate
from .softmax import check_temperature, softmax

T_FLOOR = 0.3
SELECTION_RULES = ("min_top_cov_gap", "min_avg_size", "user_fixed")


class ConsistencyError(ValueError):
    """Models handed to the two-branch predictor do not match the plan."""


@dataclass(frozen=True)
class Grid:
    t_min: float = 0.5
    t_max: float = 5.0
    step: float = 0.1
    allow_below_floor: bool = False

    def __post_init__(self):
        if not (self.t_min > 0 and self.step > 0 and self.t_max >= self.t_min):
            raise ValueError(f"bad temperature grid {self}")
        if self.t_min < T_FLOOR - 1e-12 and not self.allow_below_floor:
            raise ValueError(f"t_min={self.t_min} is below the floor {T_FLOOR}; "
                             "pass allow_below_floor=True to override")

    def values(self) -> np.ndarray:
        n = int(math.floor((self.t_max - self.t_min) / self.step + 1e-9))
        return np.round(self.t_min + self.step * np.arange(n + 1), 10)


def trial_seeds(trial_seed: int) -> dict:
    """Seeds for the pieces of one trial, all derived from ``trial_seed``."""
    return {tag: derive_seed(trial_seed, 0, tag) for tag in ("split", "cp-u", "eval-u")}


@dataclass
class SweepCurve:
    temperatures: np.ndarray
    methods: list
    alpha: float
    q_hat: dict
    reports: dict
    t_star: float | None = None
    t_c_empirical: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def metric(self, method: str, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.reports[method]])

    def method_names(self) -> list[str]:
        return [m.name for m in self.methods]

    def rows(self) -> list[dict]:
        out = []
        for name in self.method_names():
            for i, t in enumerate(self.temperatures):
                r = self.reports[name][i]
                out.append({"T": float(t), "method": name, "q_hat": float(self.q_hat[name][i]),
                            **{m: getattr(r, m) for m in METRIC_NAMES}})
        return out

    @classmethod
    def from_rows(cls, meta: dict, rows: list[dict]) -> "SweepCurve":
        """Rebuild a curve from its CSV rows and JSON metadata (per-class detail is not kept)."""
        methods = [ScoreMethod(m["kind"], bool(m["randomized"]), float(m["lambda"]), int(m["k_reg"]))
                   for m in meta["methods"]]
        temps = np.array(meta["grid"], dtype=np.float64)
        q_hat, reports = {}, {}
        for m in methods:
            mine = sorted((r for r in rows if r["method"] == m.name), key=lambda r: float(r["T"]))
            q_hat[m.name] = np.array([float(r["q_hat"]) for r in mine])
            reports[m.name] = [MetricsReport(**{k: float(r[k]) for k in METRIC_NAMES},
                                             alpha=float(meta["alpha"]), n_eval=0,
                                             per_class_coverage=np.array([]))
                               for r in mine]
        reserved = {"grid", "alpha", "methods", "t_star", "t_c_empirical"}
        return cls(temps, methods, float(meta["alpha"]), q_hat, reports, meta.get("t_star"),
                   dict(meta.get("t_c_empirical", {})),
                   {k: v for k, v in meta.items() if k not in reserved})

    def meta(self) -> dict:
        return {
            "grid": [float(t) for t in self.temperatures],
            "alpha": self.alpha,
            "methods": [{"name": m.name, "kind": m.kind, "randomized": m.randomized,
                         "lambda": m.lam, "k_reg": m.k_reg} for m in self.methods],
            "t_star": self.t_star,
            "t_c_empirical": dict(self.t_c_empirical),
            **self.metadata,
        }


def _check_methods(methods) -> list[ScoreMethod]:
    methods = list(methods)
    if not methods:
        raise ValueError("no score methods given")
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate method names {names}")
    return methods


def _one_trial(table, cp_idx, ev_idx, methods, alpha, temps, cp_seed, ev_seed):
    """Per-method lists of (q_hat, MetricsReport) over ``temps`` for a fixed split."""
    z_cp, y_cp = table.logits[cp_idx], table.labels[cp_idx]
    z_ev, y_ev = table.logits[ev_idx], table.labels[ev_idx]
    # same streams fit_threshold / evaluate would draw from these seeds
    u_cp = make_rng(cp_seed).random(len(cp_idx))
    u_ev = make_rng(ev_seed).random(len(ev_idx))
    o_cp, o_ev = sort_order(z_cp), sort_order(z_ev)
    out = {m.name: [] for m in methods}
    for t in temps:
        p_cp, p_ev = softmax(z_cp, t), softmax(z_ev, t)
        for m in methods:
            uc, ue = (u_cp, u_ev) if m.randomized else (None, None)
            q, _ = conformal_quantile(label_scores(m, p_cp, y_cp, uc, o_cp), alpha)
            sets = score_matrix(m, p_ev, ue, o_ev) <= q
            out[m.name].append((q, coverage_metrics(sets, y_ev, alpha, table.num_classes)))
    return out


def _assemble(temps, methods, alpha, trials, t_star, metadata) -> SweepCurve:
    q_hat, reports, t_c = {}, {}, {}
    for m in methods:
        q_hat[m.name] = np.array([np.median([tr[m.name][i][0] for tr in trials])
                                  for i in range(len(temps))])
        reports[m.name] = [aggregate([tr[m.name][i][1] for tr in trials], metadata.get("base_seed"))
                           for i in range(len(temps))]
        if m.adaptive:
            sizes = np.array([r.avg_size for r in reports[m.name]])
            t_c[m.name] = float(temps[int(np.argmax(sizes))])
    return SweepCurve(np.asarray(temps, dtype=np.float64), list(methods), float(alpha), q_hat,
                      reports, t_star, t_c, metadata)


def calibration_temperature(table: LogitsTable, split: SplitPlan, objective: str = "ece") -> float:
    return optimize_temperature(table.subset(split.calib_indices), objective, EceConfig(),
                                SearchConfig()).t_star


def run_sweep(table: LogitsTable, split: SplitPlan, methods, alpha: float, grid: Grid = Grid(),
              num_trials: int = 1, base_seed: int = 0, t_star: float | None = None,
              resample: bool | None = None) -> SweepCurve:
    """Fit on the CP split and score the eval split at every grid temperature.

    Trial ``t`` uses seed ``base_seed + t``. With ``resample`` (default: on
    when ``num_trials > 1``) each trial redraws the calib / CP / eval split
    with the same fractions; otherwise ``split`` is reused and only the
    randomization changes. Per-T metrics are medians over trials.
    ``t_star`` defaults to the ECE-optimal temperature on the calibration split.
    """
    methods = _check_methods(methods)
    if isinstance(grid, dict):
        grid = Grid(**grid)
    temps = grid.values()
    if resample is None:
        resample = num_trials > 1
    if num_trials < 1:
        raise ValueError("num_trials must be >= 1")
    trials = []
    for k in range(num_trials):
        s = trial_seeds(base_seed + k)
        sp = make_split(table, split.calib_fraction, split.cp_fraction, s["split"]) if resample else split
        trials.append(_one_trial(table, sp.cp_indices, sp.eval_indices, methods, alpha, temps,
                                 s["cp-u"], s["eval-u"]))
    if t_star is None:
        t_star = calibration_temperature(table, split)
    meta = {"base_seed": base_seed, "num_trials": num_trials, "resample": resample,
            "split_seed": split.seed, "calib_fraction": split.calib_fraction,
            "cp_fraction": split.cp_fraction, "kind": "full"}
    return _assemble(temps, methods, alpha, trials, t_star, meta)


def approximate_curves(table: LogitsTable, split: SplitPlan, methods, alpha: float,
                       grid: Grid = Grid(), seed: int = 0, t_star: float | None = None
                       ) -> SweepCurve:
    """Single-trial sweep that scores the calibration split instead of held-out data."""
    methods = _check_methods(methods)
    if isinstance(grid, dict):
        grid = Grid(**grid)
    if len(split.calib_indices) == 0:
        raise ValueError("empty calibration split")
    temps = grid.values()
    s = trial_seeds(seed)
    trial = _one_trial(table, split.cp_indices, split.calib_indices, methods, alpha, temps,
                       s["cp-u"], s["eval-u"])
    if t_star is None:
        t_star = calibration_temperature(table, split)
    meta = {"base_seed": seed, "num_trials": 1, "resample": False, "split_seed": split.seed,
            "calib_fraction": split.calib_fraction, "cp_fraction": split.cp_fraction,
            "kind": "approximated"}
    return _assemble(temps, methods, alpha, [trial], t_star, meta)


@dataclass
class GuidelinePlan:
    t_star: float
    t_hat: float
    selection_rule: str
    method: str | None = None
    approximated_curve: SweepCurve | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {"t_star": self.t_star, "t_hat": self.t_hat, "selection_rule": self.selection_rule,
             "method": self.method}
        if self.approximated_curve is not None:
            c = self.approximated_curve
            d["approximated_curve"] = {"meta": c.meta(), "rows": c.rows()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GuidelinePlan":
        curve = d.get("approximated_curve")
        if curve is not None:
            curve = SweepCurve.from_rows(curve["meta"], curve["rows"])
        return cls(float(d["t_star"]), float(d["t_hat"]), d["selection_rule"], d.get("method"), curve)


def select_t_hat(curve: SweepCurve, rule: str = "min_top_cov_gap", method: str | None = None,
                 t_hat: float | None = None, t_star: float | None = None) -> GuidelinePlan:
    """Pick the CP-branch temperature from a curve. Ties go to the smallest T."""
    if rule not in SELECTION_RULES:
        raise ValueError(f"rule must be one of {SELECTION_RULES}, got {rule!r}")
    if curve is None or len(curve.temperatures) == 0:
        raise ValueError("empty curve")
    if method is None:
        adaptive = [m.name for m in curve.methods if m.adaptive]
        method = adaptive[0] if adaptive else curve.methods[0].name
    if method not in curve.reports:
        raise ValueError(f"method {method!r} not in curve")
    if t_star is None:
        t_star = curve.t_star if curve.t_star is not None else 1.0
    if rule == "user_fixed":
        if t_hat is None:
            raise ValueError("user_fixed needs t_hat")
        chosen = check_temperature(t_hat)
    else:
        key = "top_cov_gap" if rule == "min_top_cov_gap" else "avg_size"
        chosen = float(curve.temperatures[int(np.argmin(curve.metric(method, key)))])
    return GuidelinePlan(float(t_star), float(chosen), rule, method, curve)


@dataclass
class MicroDiff:
    differences: np.ndarray
    increased: int
    unchanged: int
    decreased: int
    avg_size_a: float
    avg_size_b: float


def microscopic_diff(table: LogitsTable, split: SplitPlan, method: ScoreMethod, alpha: float,
                     t_a: float, t_b: float, seed: int = 0) -> MicroDiff:
    """Per eval sample ``|set at t_b| - |set at t_a|``, sorted descending."""
    if not method.adaptive:
        raise ValueError("microscopic analysis is defined for adaptive methods (aps, raps)")
    s = trial_seeds(seed)
    sizes = []
    for t in (t_a, t_b):
        model = fit_threshold(table, split.cp_indices, method, alpha, t, s["cp-u"])
        z = table.logits[split.eval_indices]
        u = make_rng(s["eval-u"]).random(len(z)) if method.randomized else None
        p = softmax(z, t)
        sizes.append((score_matrix(method, p, u, sort_order(z)) <= model.q_hat).sum(axis=1))
    d = (sizes[1] - sizes[0]).astype(np.int64)
    return MicroDiff(np.sort(d)[::-1], int((d > 0).sum()), int((d == 0).sum()),
                     int((d < 0).sum()), float(sizes[0].mean()), float(sizes[1].mean()))


def two_branch_predict(plan: GuidelinePlan, model_conf: CalibrationResult, model_cp: CPModel,
                       logits, u: float | None = None) -> tuple[float, frozenset]:
    """Confidence from the T* branch, prediction set from the T-hat branch."""
    if not math.isclose(model_conf.t_star, plan.t_star, rel_tol=0, abs_tol=1e-12):
        raise ConsistencyError(f"calibration model has T*={model_conf.t_star}, plan says {plan.t_star}")
    if not math.isclose(model_cp.temperature, plan.t_hat, rel_tol=0, abs_tol=1e-12):
        raise ConsistencyError(f"CP model fitted at T={model_cp.temperature}, plan says {plan.t_hat}")
    conf = float(softmax(np.asarray(logits, dtype=np.float64), model_conf.t_star).max())
    return conf, predict_set(model_cp, logits, u)


def mondrian_compare(table: LogitsTable, calib_fraction: float, cp_fraction: float,
                     method: ScoreMethod, alpha: float, num_trials: int = 100, base_seed: int = 0,
                     grid: Grid = Grid()) -> dict:
    """Per-trial metrics of Mondrian CP and of pooled CP at T-hat = argmin approximated TopCovGap.

    Both use the same split per trial. T-hat comes from that trial's
    calibration-set curve, as a practitioner would pick it.
    """
    out = {"mondrian": [], "ts_t_hat": [], "t_hat": []}
    for k in range(num_trials):
        s = trial_seeds(base_seed + k)
        sp = make_split(table, calib_fraction, cp_fraction, s["split"])
        mcp = fit_mondrian(table, sp.cp_indices, method, alpha, 1.0, s["cp-u"])
        out["mondrian"].append(evaluate(mcp, table, sp.eval_indices, s["eval-u"]))
        approx = approximate_curves(table, sp, [method], alpha, grid, base_seed + k, t_star=1.0)
        t_hat = select_t_hat(approx, "min_top_cov_gap", method.name).t_hat
        model = fit_threshold(table, sp.cp_indices, method, alpha, t_hat, s["cp-u"])
        out["ts_t_hat"].append(evaluate(model, table, sp.eval_indices, s["eval-u"]))
        out["t_hat"].append(t_hat)
    return out


def summarize_comparison(result: dict) -> list[dict]:
    """Rows ``{approach, metric, median, std}`` over trials."""
    rows = []
    for approach in ("mondrian", "ts_t_hat"):
        reps = result[approach]
        for m in ("avg_size", "mar_cov_gap", "top_cov_gap"):
            vals = np.array([getattr(r, m) for r in reps])
            rows.append({"approach": approach, "metric": m, "median": float(np.median(vals)),
                         "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0})
    return rows
