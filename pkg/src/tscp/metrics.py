"""Set-size and coverage metrics, and median-of-means aggregation over trials."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .conformal import CPModel, MondrianModel, predict_sets, predict_sets_mondrian
from .data import LogitsTable, make_rng

METRIC_NAMES = ("avg_size", "mar_cov_gap", "top_cov_gap", "avg_cov_gap")


@dataclass
class MetricsReport:
    avg_size: float
    mar_cov_gap: float
    top_cov_gap: float
    avg_cov_gap: float
    alpha: float
    n_eval: int
    per_class_coverage: np.ndarray = field(repr=False)
    coverage: float = float("nan")
    num_missing_classes: int = 0
    num_trials: int = 1
    base_seed: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        # missing classes serialise as null
        d["per_class_coverage"] = [None if math.isnan(v) else float(v)
                                   for v in np.asarray(self.per_class_coverage)]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["per_class_coverage"] = np.array(
            [np.nan if v is None else v for v in d["per_class_coverage"]], dtype=np.float64)
        return cls(**d)


def top_fraction_count(num_classes: int, fraction: float = 0.05) -> int:
    return max(1, math.ceil(round(fraction * num_classes, 9)))


def coverage_metrics(sets: np.ndarray, labels, alpha: float, num_classes: int | None = None
                     ) -> MetricsReport:
    """Metrics from a boolean membership matrix ``sets`` (n, C) and true labels."""
    sets = np.asarray(sets, dtype=bool)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = sets.shape
    if n == 0:
        raise ValueError("empty evaluation split")
    num_classes = c if num_classes is None else num_classes
    covered = sets[np.arange(n), labels]
    counts = np.bincount(labels, minlength=num_classes)
    hits = np.bincount(labels, weights=covered.astype(np.float64), minlength=num_classes)
    present = counts > 0
    per_class = np.full(num_classes, np.nan)
    per_class[present] = hits[present] / counts[present]
    dev = np.abs(per_class[present] - (1 - alpha))
    k = min(top_fraction_count(num_classes), dev.size)
    top = float(np.sort(dev)[::-1][:k].mean())
    cov = float(covered.mean())
    return MetricsReport(
        avg_size=float(sets.sum(axis=1).mean()),
        mar_cov_gap=abs(cov - (1 - alpha)),
        top_cov_gap=top,
        avg_cov_gap=float(dev.mean()),
        alpha=float(alpha),
        n_eval=int(n),
        per_class_coverage=per_class,
        coverage=cov,
        num_missing_classes=int((~present).sum()),
    )


def evaluate(model: CPModel | MondrianModel, table: LogitsTable, eval_indices, seed: int = 0
             ) -> MetricsReport:
    """Build sets for the eval rows (one uniform per row if randomized) and score them."""
    idx = np.asarray(eval_indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty evaluation split")
    u = make_rng(seed).random(idx.size) if model.method.randomized else None
    z = table.logits[idx]
    if isinstance(model, MondrianModel):
        sets = predict_sets_mondrian(model, z, u)
    else:
        sets = predict_sets(model, z, u)
    return coverage_metrics(sets, table.labels[idx], model.alpha, table.num_classes)


class TrialError(RuntimeError):
    def __init__(self, seed: int, exc: Exception):
        super().__init__(f"trial with seed {seed} failed: {exc!r}")
        self.seed = seed


def aggregate(reports: list[MetricsReport], base_seed: int | None = None) -> MetricsReport:
    """Per-metric median over trials (even counts average the two central values)."""
    if not reports:
        raise ValueError("no trial reports")
    med = {m: float(np.median([getattr(r, m) for r in reports])) for m in METRIC_NAMES}
    pcc = np.vstack([r.per_class_coverage for r in reports])
    with warnings.catch_warnings():
        # all-NaN columns are classes missing from every trial
        warnings.simplefilter("ignore", RuntimeWarning)
        per_class = np.nanmedian(pcc, axis=0)
    return MetricsReport(
        **med,
        alpha=reports[0].alpha,
        n_eval=int(np.median([r.n_eval for r in reports])),
        per_class_coverage=per_class,
        coverage=float(np.median([r.coverage for r in reports])),
        num_missing_classes=int(np.isnan(per_class).sum()),
        num_trials=len(reports),
        base_seed=base_seed,
    )


def run_trials(trial_fn, num_trials: int, base_seed: int = 0) -> list:
    if num_trials < 1:
        raise ValueError("num_trials must be >= 1")
    out = []
    for seed in range(base_seed, base_seed + num_trials):
        try:
            out.append(trial_fn(seed))
        except Exception as exc:
            raise TrialError(seed, exc) from exc
    return out


def median_of_means(trial_fn, num_trials: int, base_seed: int = 0) -> MetricsReport:
    """Run ``trial_fn(seed)`` for seeds base_seed .. base_seed+num_trials-1 and take medians."""
    return aggregate(run_trials(trial_fn, num_trials, base_seed), base_seed)
