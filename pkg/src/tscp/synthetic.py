"""Synthetic logits with a known calibration temperature.

Each sample gets a latent class c; its calibrated logits are Gaussian noise
plus a class-dependent boost on c. The label is drawn from softmax of those
logits, so the calibrated logits are exactly calibrated. Returned logits are
the calibrated ones multiplied by ``beta``: beta > 1 is overconfident
(T* = beta), beta < 1 underconfident.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LogitsTable, make_rng
from .softmax import softmax


@dataclass(frozen=True)
class GeneratorConfig:
    num_samples: int = 20000
    num_classes: int = 100
    beta: float = 2.0
    strength_low: float = 6.0
    strength_high: float = 11.0
    noise: float = 1.0


def calibrated_logits(cfg: GeneratorConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = make_rng(seed)
    n, c = cfg.num_samples, cfg.num_classes
    strength = rng.uniform(cfg.strength_low, cfg.strength_high, size=c)
    latent = rng.integers(0, c, size=n)
    z = cfg.noise * rng.standard_normal((n, c))
    z[np.arange(n), latent] += strength[latent]
    p = softmax(z)
    u = rng.random((n, 1))
    labels = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), c - 1)
    return z, labels


def overconfident_table(cfg: GeneratorConfig = GeneratorConfig(), seed: int = 0) -> LogitsTable:
    z, labels = calibrated_logits(cfg, seed)
    return LogitsTable(cfg.beta * z, labels)


def make_table(num_samples: int = 20000, num_classes: int = 100, beta: float = 2.0,
               seed: int = 0, **kw) -> LogitsTable:
    return overconfident_table(GeneratorConfig(num_samples, num_classes, beta, **kw), seed)
