"""LAC / APS / RAPS scores, split-conformal thresholds and classwise (Mondrian) CP."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import LogitsTable, make_rng
from .softmax import check_temperature, softmax

KINDS = ("lac", "aps", "raps")


class QuantileClampWarning(UserWarning):
    """ceil((n+1)(1-alpha)) exceeded n; the maximum score was used."""


@dataclass(frozen=True)
class ScoreMethod:
    kind: str = "aps"
    randomized: bool = False
    lam: float = 0.1
    k_reg: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ValueError("lambda must be >= 0")
        if self.k_reg < 0 or int(self.k_reg) != self.k_reg:
            raise ValueError("k_reg must be a non-negative integer")

    @property
    def adaptive(self) -> bool:
        return self.kind != "lac"

    @property
    def name(self) -> str:
        return self.kind + ("-rand" if self.randomized else "")


def _check_u(method: ScoreMethod, u, n: int | None = None):
    if not method.randomized:
        return None
    if u is None:
        raise ValueError(f"randomized {method.kind} needs a uniform draw u")
    u = np.asarray(u, dtype=np.float64)
    if np.any((u < 0) | (u > 1)):
        raise ValueError("u must lie in [0, 1]")
    return u


def sort_order(probs_or_logits) -> np.ndarray:
    """Descending order per row, ties by ascending class index.

    Temperature scaling never changes this order, so callers sweeping T can
    compute it once from the logits and pass it back in.
    """
    return np.argsort(-np.asarray(probs_or_logits), axis=-1, kind="stable")


def _sorted_view(probs: np.ndarray, order=None):
    if order is None:
        order = sort_order(probs)
    sp = np.take_along_axis(probs, order, axis=-1)
    return order, sp


def score_matrix(method: ScoreMethod, probs, u=None, order=None) -> np.ndarray:
    """Scores of every candidate label, shape (N, C). ``u`` has one draw per row."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    n, c = p.shape
    u = _check_u(method, u)
    if method.kind == "lac":
        return 1.0 - p
    order, sp = _sorted_view(p, order)
    cum = np.cumsum(sp, axis=1)
    if u is not None:
        cum = cum - np.broadcast_to(u, (n,)).reshape(n, 1) * sp
    if method.kind == "raps":
        ranks = np.arange(1, c + 1)
        cum = cum + method.lam * np.maximum(ranks - method.k_reg, 0)
    out = np.empty_like(cum)
    np.put_along_axis(out, order, cum, axis=1)
    return out


def label_scores(method: ScoreMethod, probs, labels, u=None, order=None) -> np.ndarray:
    """Scores at the given labels only, shape (N,)."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(p.shape[0])
    u = _check_u(method, u)
    if method.kind == "lac":
        return 1.0 - p[rows, labels]
    order, sp = _sorted_view(p, order)
    # 0-based position of the label in the sorted vector
    pos = np.argmax(order == labels[:, None], axis=1)
    cum = np.cumsum(sp, axis=1)[rows, pos]
    if u is not None:
        cum = cum - np.broadcast_to(u, (p.shape[0],)) * sp[rows, pos]
    if method.kind == "raps":
        cum = cum + method.lam * np.maximum(pos + 1 - method.k_reg, 0)
    return cum


def score(method: ScoreMethod, probs, label: int, u: float | None = None) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("probs must be a single probability vector")
    if not 0 <= label < p.size:
        raise ValueError(f"label {label} out of range")
    return float(label_scores(method, p[None, :], [label], None if u is None else [u])[0])


def quantile_index(n: int, alpha: float) -> tuple[int, bool]:
    """1-based order statistic ceil((n+1)(1-alpha)), clamped to n. Returns (k, clamped)."""
    if n < 1:
        raise ValueError("need at least one calibration score")
    # round away representation noise, e.g. 10 * (1 - 0.7) = 3.0000000000000004
    k = math.ceil(round((n + 1) * (1 - alpha), 9))
    return (n, True) if k > n else (max(k, 1), False)


def conformal_quantile(scores, alpha: float) -> tuple[float, bool]:
    s = np.sort(np.asarray(scores, dtype=np.float64))
    k, clamped = quantile_index(len(s), alpha)
    return float(s[k - 1]), clamped


@dataclass(frozen=True)
class CPModel:
    method: ScoreMethod
    alpha: float
    temperature: float
    q_hat: float
    n_cal: int
    clamp_warning: bool = False

    def to_dict(self) -> dict:
        return {
            "method": self.method.kind,
            "randomized": self.method.randomized,
            "lambda": self.method.lam,
            "k_reg": self.method.k_reg,
            "alpha": self.alpha,
            "temperature": self.temperature,
            "q_hat": self.q_hat,
            "n_cal": self.n_cal,
            "clamp_warning": self.clamp_warning,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CPModel":
        method = ScoreMethod(d["method"], bool(d["randomized"]), float(d["lambda"]), int(d["k_reg"]))
        return cls(method, float(d["alpha"]), float(d["temperature"]), float(d["q_hat"]),
                   int(d["n_cal"]), bool(d.get("clamp_warning", False)))


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def calibration_scores(table: LogitsTable, indices, method: ScoreMethod, temperature: float,
                       seed: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    z = table.logits[idx]
    u = make_rng(seed).random(len(idx)) if method.randomized else None
    return label_scores(method, softmax(z, temperature), table.labels[idx], u, sort_order(z))


def fit_threshold(table: LogitsTable, indices, method: ScoreMethod, alpha: float,
                  temperature: float = 1.0, seed: int = 0) -> CPModel:
    """Split-conformal threshold on the CP subset ``indices``.

    Randomized methods take one uniform per CP sample from the seeded stream,
    so the same seed reuses the same draws at every temperature.
    """
    _check_alpha(alpha)
    check_temperature(temperature)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty CP set")
    s = calibration_scores(table, idx, method, temperature, seed)
    q, clamped = conformal_quantile(s, alpha)
    if clamped:
        warnings.warn(f"n={idx.size} too small for alpha={alpha}; using the max score",
                      QuantileClampWarning, stacklevel=2)
    return CPModel(method, float(alpha), float(temperature), q, int(idx.size), clamped)


def predict_sets(model: CPModel, logits, u=None) -> np.ndarray:
    """Boolean membership matrix (N, C): label y is in the set iff s(x, y) <= q_hat."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    p = softmax(z, model.temperature)
    return score_matrix(model.method, p, u, sort_order(z)) <= model.q_hat


def predict_set(model: CPModel, logits, u: float | None = None) -> frozenset[int]:
    z = np.asarray(logits, dtype=np.float64)
    mask = predict_sets(model, z[None, :], None if u is None else [u])[0]
    return frozenset(int(i) for i in np.flatnonzero(mask))


def deterministic_set_size(probs, q_hat: float) -> int:
    """Smallest prefix of the (descending) probabilities whose sum reaches ``q_hat``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("expected a non-empty 1-D probability vector")
    if np.any(np.diff(p) > 0):
        raise ValueError("probabilities must be sorted in descending order")
    hit = np.flatnonzero(np.cumsum(p) >= q_hat)
    # rounding can leave the full sum a hair below 1
    return int(hit[0]) + 1 if hit.size else p.size


@dataclass(frozen=True)
class MondrianModel:
    """One CPModel per class; ``fallback`` lists classes that use the pooled threshold."""

    models: dict
    pooled: CPModel
    fallback: frozenset = field(default_factory=frozenset)

    @property
    def method(self) -> ScoreMethod:
        return self.pooled.method

    @property
    def alpha(self) -> float:
        return self.pooled.alpha

    @property
    def temperature(self) -> float:
        return self.pooled.temperature

    def thresholds(self) -> np.ndarray:
        return np.array([self.models[c].q_hat for c in sorted(self.models)])

    def __getitem__(self, c: int) -> CPModel:
        return self.models[c]


def fit_mondrian(table: LogitsTable, indices, method: ScoreMethod, alpha: float,
                 temperature: float = 1.0, seed: int = 0) -> MondrianModel:
    """Classwise thresholds, each from the CP samples of that class."""
    _check_alpha(alpha)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty CP set")
    s = calibration_scores(table, idx, method, temperature, seed)
    q, clamped = conformal_quantile(s, alpha)
    pooled = CPModel(method, float(alpha), float(temperature), q, int(idx.size), clamped)
    labels = table.labels[idx]
    models, fallback = {}, set()
    for c in range(table.num_classes):
        sc = s[labels == c]
        if sc.size == 0:
            models[c] = pooled
            fallback.add(c)
            continue
        qc, cl = conformal_quantile(sc, alpha)
        models[c] = CPModel(method, float(alpha), float(temperature), qc, int(sc.size), cl)
    return MondrianModel(models, pooled, frozenset(fallback))


def predict_sets_mondrian(model: MondrianModel, logits, u=None) -> np.ndarray:
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    p = softmax(z, model.temperature)
    return score_matrix(model.method, p, u, sort_order(z)) <= model.thresholds()[None, :]
