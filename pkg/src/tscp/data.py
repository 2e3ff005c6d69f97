"""Logits files, validated tables and seeded index splits."""
from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    """A logits file could not be parsed."""


class ValidationError(ValueError):
    """Parsed values violate the LogitsTable invariants."""


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox4x64 generator.

    All randomness in the package goes through this so a given seed gives the
    same stream on every platform numpy supports.
    """
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(base_seed: int, trial: int = 0, tag: str = "") -> int:
    """Deterministic 64-bit child seed for (base seed, trial index, purpose tag)."""
    ss = np.random.SeedSequence(
        [int(base_seed) & 0xFFFFFFFFFFFFFFFF, int(trial), zlib.crc32(tag.encode())]
    )
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class LogitsTable:
    logits: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        logits = np.array(self.logits, dtype=np.float64)
        labels = np.array(self.labels)
        if logits.ndim != 2:
            raise ValidationError(f"logits must be 2-D, got shape {logits.shape}")
        n, c = logits.shape
        if n < 1:
            raise ValidationError("table needs at least one sample")
        if c < 2:
            raise ValidationError(f"need at least 2 classes, got {c}")
        if labels.shape != (n,):
            raise ValidationError(f"labels shape {labels.shape} != ({n},)")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValidationError("labels must be integers")
        labels = labels.astype(np.int64)
        if not np.all(np.isfinite(logits)):
            row = int(np.argwhere(~np.isfinite(logits))[0, 0])
            raise ValidationError(f"non-finite logit in row {row}")
        bad = (labels < 0) | (labels >= c)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ValidationError(f"label {labels[row]} in row {row} outside [0, {c - 1}]")
        logits.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)

    @property
    def num_samples(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    def subset(self, indices) -> "LogitsTable":
        idx = np.asarray(indices, dtype=np.int64)
        return LogitsTable(self.logits[idx], self.labels[idx])


def _load_csv(path: Path) -> LogitsTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not header or header[-1] != "label":
            raise DataFormatError(f"{path}:1: last header column must be 'label'")
        c = len(header) - 1
        expected = [f"z{i}" for i in range(c)]
        if header[:-1] != expected:
            raise DataFormatError(f"{path}:1: logit columns must be named z0..z{c - 1}")
        rows, labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != c + 1:
                raise DataFormatError(f"{path}:{lineno}: expected {c + 1} fields, got {len(rec)}")
            try:
                rows.append([float(f) for f in rec[:-1]])
                lab = float(rec[-1])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if lab != int(lab):
                raise DataFormatError(f"{path}:{lineno}: label {rec[-1]!r} is not an integer")
            labels.append(int(lab))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return LogitsTable(np.array(rows), np.array(labels, dtype=np.int64))


def _load_jsonl(path: Path) -> LogitsTable:
    rows, labels = [], []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                z = [float(v) for v in rec["logits"]]
                lab = rec["label"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not isinstance(lab, int) or isinstance(lab, bool):
                raise DataFormatError(f"{path}:{lineno}: label must be an integer")
            if width is None:
                width = len(z)
            elif len(z) != width:
                raise DataFormatError(f"{path}:{lineno}: expected {width} logits, got {len(z)}")
            rows.append(z)
            labels.append(lab)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return LogitsTable(np.array(rows), np.array(labels, dtype=np.int64))


def load_logits(path, format: str | None = None) -> LogitsTable:
    """Read a CSV (``z0,...,z{C-1},label``) or JSONL (``{"logits": [...], "label": k}``) file."""
    path = Path(path)
    if format is None:
        format = "jsonl" if path.suffix in (".jsonl", ".json") else "csv"
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    if format == "csv":
        return _load_csv(path)
    if format == "jsonl":
        return _load_jsonl(path)
    raise ValueError(f"unknown format {format!r}")


def save_logits(table: LogitsTable, path, format: str = "csv") -> None:
    path = Path(path)
    if format == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"z{i}" for i in range(table.num_classes)] + ["label"])
            for z, y in zip(table.logits, table.labels):
                w.writerow([repr(float(v)) for v in z] + [int(y)])
    elif format == "jsonl":
        with open(path, "w") as fh:
            for z, y in zip(table.logits, table.labels):
                fh.write(json.dumps({"logits": [float(v) for v in z], "label": int(y)}) + "\n")
    else:
        raise ValueError(f"unknown format {format!r}")


@dataclass(frozen=True)
class SplitPlan:
    calib_fraction: float
    cp_fraction: float
    seed: int
    calib_indices: np.ndarray = field(repr=False)
    cp_indices: np.ndarray = field(repr=False)
    eval_indices: np.ndarray = field(repr=False)

    @property
    def n_cp(self) -> int:
        return len(self.cp_indices)


def _count(n: int, fraction: float) -> int:
    # tolerate representation error, e.g. 0.29 * 100 = 28.999999999999996
    return int(math.floor(n * fraction + 1e-9))


def make_split(num_samples, calib_fraction: float, cp_fraction: float, seed: int) -> SplitPlan:
    """Shuffle ``range(N)`` with a seeded Philox stream and cut it into calib / cp / eval.

    ``num_samples`` may be a LogitsTable or an int. Sizes are
    ``floor(N * fraction)``; what is left goes to eval.
    """
    n = num_samples.num_samples if isinstance(num_samples, LogitsTable) else int(num_samples)
    for name, f in (("calib_fraction", calib_fraction), ("cp_fraction", cp_fraction)):
        if not 0.0 < f < 1.0:
            raise ValueError(f"{name} must lie in (0, 1), got {f}")
    if calib_fraction + cp_fraction >= 1.0:
        raise ValueError("calib_fraction + cp_fraction must be < 1")
    n_cal, n_cp = _count(n, calib_fraction), _count(n, cp_fraction)
    if n_cal < 1 or n_cp < 1:
        raise ValueError(f"N={n} too small for fractions ({calib_fraction}, {cp_fraction})")
    perm = make_rng(seed).permutation(n)
    return SplitPlan(
        calib_fraction=calib_fraction,
        cp_fraction=cp_fraction,
        seed=int(seed),
        calib_indices=perm[:n_cal],
        cp_indices=perm[n_cal:n_cal + n_cp],
        eval_indices=perm[n_cal + n_cp:],
    )
