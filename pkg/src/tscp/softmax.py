"""Stable softmax with temperature, entropy and argmax."""
from __future__ import annotations

import math

import numpy as np


def check_temperature(t) -> float:
    t = float(t)
    if not (t > 0 and math.isfinite(t)):
        raise ValueError(f"temperature must be positive and finite, got {t}")
    return t


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``logits / temperature``; works on 1-D or 2-D input."""
    t = check_temperature(temperature)
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    z = (z - z.max(axis=-1, keepdims=True)) / t
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    t = check_temperature(temperature)
    z = np.asarray(logits, dtype=np.float64)
    z = (z - z.max(axis=-1, keepdims=True)) / t
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_at(logits, temperature: float) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("expected a non-empty 1-D logits vector")
    return softmax(z, temperature)


def entropy(p) -> float | np.ndarray:
    """Shannon entropy in nats, with 0 ln 0 = 0. Row-wise for 2-D input."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    return float(h) if h.ndim == 0 else h


def entropy_at(logits, temperature: float) -> float | np.ndarray:
    """Entropy of softmax(z / T) computed from log-probabilities.

    More accurate than ``entropy(softmax_at(...))`` when most of the mass sits
    on one entry.
    """
    logp = log_softmax(logits, temperature)
    h = -(np.exp(logp) * logp).sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


def argmax_class(logits) -> int:
    """Index of the largest entry; ties go to the lowest index."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("expected a non-empty 1-D vector")
    return int(np.argmax(z))
