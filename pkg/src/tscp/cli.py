"""Command-line entry point: ``tscp <command> [flags]``.

Exit codes: 0 success, 1 a theory check reported violations, 2 usage or I/O error.
Every command resolves and validates its whole configuration (JSON file via
``--config``, overridden by flags) before computing, and writes its outputs
only at the end through temp files renamed into place.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import theory
from .calibrate import EceConfig, SearchConfig, optimize_temperature, reliability_diagram
from .conformal import CPModel, ScoreMethod, fit_threshold
from .data import DataFormatError, ValidationError, load_logits, make_split
from .metrics import evaluate, median_of_means
from .sweep import (
    Grid,
    approximate_curves,
    calibration_temperature,
    mondrian_compare,
    run_sweep,
    select_t_hat,
    summarize_comparison,
    trial_seeds,
)

DEFAULTS = {
    "input": None,
    "format": None,
    "alpha": 0.1,
    "seed": 0,
    "out_dir": ".",
    "calib_fraction": 0.1,
    "cp_fraction": 0.1,
    "method": None,
    "randomized": False,
    "lam": 0.1,
    "k_reg": 5,
    "temperature": 1.0,
    "t_min": 0.5,
    "t_max": 5.0,
    "t_step": 0.1,
    "trials": 1,
    "allow_below_floor": False,
    "objective": "ece",
    "bins": 10,
    "rule": "min-topcovgap",
    "t_hat": None,
    "model": None,
    "cases": None,
}
RULES = {"min-topcovgap": "min_top_cov_gap", "min-avgsize": "min_avg_size", "fixed": "user_fixed"}


class UsageError(Exception):
    pass


class Outputs:
    """Collects output files and writes them all at once via temp-file + rename."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files: dict[str, str] = {}

    def add(self, name: str, text: str) -> None:
        self.files[name] = text

    def commit(self) -> list[Path]:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        staged = []
        try:
            for name, text in self.files.items():
                fd, tmp = tempfile.mkstemp(dir=self.out_dir, prefix=f".{name}.", suffix=".tmp")
                with os.fdopen(fd, "w", newline="") as fh:
                    fh.write(text)
                staged.append((tmp, self.out_dir / name))
        except BaseException:
            for tmp, _ in staged:
                os.unlink(tmp)
            raise
        for tmp, final in staged:
            os.replace(tmp, final)
        return [final for _, final in staged]


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r[h] for h in header] if isinstance(r, dict) else list(r))
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def _add_shared(p):
    p.add_argument("--config", help="JSON file with default values for any flag")
    p.add_argument("--input", help="logits file (CSV or JSONL)")
    p.add_argument("--format", choices=["csv", "jsonl"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--calib-fraction", dest="calib_fraction", type=float)
    p.add_argument("--cp-fraction", dest="cp_fraction", type=float)


def _add_method(p, multi=False):
    if multi:
        p.add_argument("--method", action="append", choices=["lac", "aps", "raps"])
    else:
        p.add_argument("--method", choices=["lac", "aps", "raps"])
    p.add_argument("--randomized", action="store_true", default=None)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--k-reg", dest="k_reg", type=int)


def _add_grid(p):
    p.add_argument("--t-min", dest="t_min", type=float)
    p.add_argument("--t-max", dest="t_max", type=float)
    p.add_argument("--t-step", dest="t_step", type=float)
    p.add_argument("--trials", type=int)
    p.add_argument("--allow-below-floor", dest="allow_below_floor", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tscp", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit T* and write reliability bins")
    _add_shared(p)
    p.add_argument("--objective", choices=["ece", "nll"])
    p.add_argument("--bins", type=int)

    p = sub.add_parser("fit", help="fit a CP threshold on the CP split")
    _add_shared(p)
    _add_method(p)
    p.add_argument("--temperature", type=float)

    p = sub.add_parser("eval", help="evaluate a fitted CP model on the eval split")
    _add_shared(p)
    _add_method(p)
    p.add_argument("--temperature", type=float)
    p.add_argument("--model", help="cp_model.json from `fit`; fitted afresh when omitted")
    p.add_argument("--trials", type=int)

    p = sub.add_parser("sweep", help="metrics over a temperature grid")
    _add_shared(p)
    _add_method(p, multi=True)
    _add_grid(p)

    p = sub.add_parser("guideline", help="two-branch plan: T* for confidence, T-hat for CP")
    _add_shared(p)
    _add_method(p)
    _add_grid(p)
    p.add_argument("--rule", choices=sorted(RULES))
    p.add_argument("--t-hat", dest="t_hat", type=float)

    p = sub.add_parser("verify-theory", help="run the randomized theory checks")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--cases", type=int, help="cases per check (default: full-size runs)")

    p = sub.add_parser("mondrian-compare", help="classwise CP vs pooled CP at T-hat")
    _add_shared(p)
    _add_method(p)
    _add_grid(p)
    return ap


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from None
        unknown = set(file_cfg) - set(DEFAULTS) - {"lambda"}
        if unknown:
            raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
        if "lambda" in file_cfg:
            file_cfg["lam"] = file_cfg.pop("lambda")
        cfg.update(file_cfg)
    for k, v in vars(args).items():
        if k in DEFAULTS and v is not None:
            cfg[k] = v
    cfg["command"] = args.command
    return cfg


def _methods(cfg, default) -> list[ScoreMethod]:
    kinds = cfg["method"] or default
    if isinstance(kinds, str):
        kinds = [kinds]
    return [ScoreMethod(k, bool(cfg["randomized"]), float(cfg["lam"]), int(cfg["k_reg"])) for k in kinds]


def _grid(cfg) -> Grid:
    return Grid(cfg["t_min"], cfg["t_max"], cfg["t_step"], bool(cfg["allow_below_floor"]))


def _load(cfg):
    if not cfg["input"]:
        raise UsageError("--input is required")
    path = Path(cfg["input"])
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    table = load_logits(path, cfg["format"])
    split = make_split(table, cfg["calib_fraction"], cfg["cp_fraction"], trial_seeds(cfg["seed"])["split"])
    return table, split


def _check_alpha(cfg):
    if not 0 < cfg["alpha"] < 1:
        raise UsageError(f"--alpha must lie in (0, 1), got {cfg['alpha']}")


def cmd_calibrate(cfg, out: Outputs) -> int:
    table, split = _load(cfg)
    ece_cfg = EceConfig(cfg["bins"])
    calib = table.subset(split.calib_indices)
    res = optimize_temperature(calib, cfg["objective"], ece_cfg, SearchConfig())
    bins = reliability_diagram(calib, res.t_star, ece_cfg)
    out.add("calibration.json", _json_text({**res.to_dict(), "n_calib": calib.num_samples,
                                            "seed": cfg["seed"]}))
    header = ["bin_low", "bin_high", "count", "accuracy", "mean_confidence"]
    out.add("reliability.csv", _csv_text(header, bins))
    print(f"T* = {res.t_star:.4f} ({cfg['objective']}: {res.objective_value_before:.6g} -> "
          f"{res.objective_value_after:.6g})")
    return 0


def _fit(cfg, table, split):
    method = _methods(cfg, ["aps"])[0]
    return fit_threshold(table, split.cp_indices, method, cfg["alpha"], cfg["temperature"],
                         trial_seeds(cfg["seed"])["cp-u"])


def cmd_fit(cfg, out: Outputs) -> int:
    _check_alpha(cfg)
    table, split = _load(cfg)
    model = _fit(cfg, table, split)
    out.add("cp_model.json", _json_text(model.to_dict()))
    print(f"q_hat = {model.q_hat:.6g} (n_cal={model.n_cal}{', clamped' if model.clamp_warning else ''})")
    return 0


def cmd_eval(cfg, out: Outputs) -> int:
    _check_alpha(cfg)
    table, split = _load(cfg)
    if cfg["model"]:
        mpath = Path(cfg["model"])
        if not mpath.is_file():
            raise FileNotFoundError(f"model file not found: {mpath}")
        model = CPModel.from_dict(json.loads(mpath.read_text()))
        if model.alpha != cfg["alpha"]:
            cfg["alpha"] = model.alpha
    else:
        model = _fit(cfg, table, split)
    if cfg["trials"] > 1:
        def trial(seed):
            s = trial_seeds(seed)
            sp = make_split(table, cfg["calib_fraction"], cfg["cp_fraction"], s["split"])
            m = fit_threshold(table, sp.cp_indices, model.method, model.alpha, model.temperature, s["cp-u"])
            return evaluate(m, table, sp.eval_indices, s["eval-u"])
        report = median_of_means(trial, cfg["trials"], cfg["seed"])
    else:
        report = evaluate(model, table, split.eval_indices, trial_seeds(cfg["seed"])["eval-u"])
    out.add("metrics.json", _json_text({"model": model.to_dict(), "metrics": report.to_dict()}))
    print(f"avg_size={report.avg_size:.4f} mar_cov_gap={report.mar_cov_gap:.4f} "
          f"top_cov_gap={report.top_cov_gap:.4f} avg_cov_gap={report.avg_cov_gap:.4f}")
    return 0


SWEEP_HEADER = ["T", "method", "q_hat", "avg_size", "mar_cov_gap", "top_cov_gap", "avg_cov_gap"]


def cmd_sweep(cfg, out: Outputs) -> int:
    _check_alpha(cfg)
    methods = _methods(cfg, ["lac", "aps", "raps"])
    grid = _grid(cfg)
    table, split = _load(cfg)
    curve = run_sweep(table, split, methods, cfg["alpha"], grid, cfg["trials"], cfg["seed"])
    out.add("sweep.csv", _csv_text(SWEEP_HEADER, curve.rows()))
    out.add("sweep.json", _json_text(curve.meta()))
    print(f"T* = {curve.t_star:.3f}; empirical T_c: " +
          ", ".join(f"{k}={v:.2f}" for k, v in curve.t_c_empirical.items()))
    return 0


def cmd_guideline(cfg, out: Outputs) -> int:
    _check_alpha(cfg)
    rule = RULES[cfg["rule"]]
    if rule == "user_fixed" and cfg["t_hat"] is None:
        raise UsageError("--rule fixed needs --t-hat")
    method = _methods(cfg, ["raps"])[0]
    grid = _grid(cfg)
    table, split = _load(cfg)
    t_star = calibration_temperature(table, split)
    curve = approximate_curves(table, split, [method], cfg["alpha"], grid, cfg["seed"], t_star=t_star)
    plan = select_t_hat(curve, rule, method.name, cfg["t_hat"], t_star)
    out.add("plan.json", _json_text(plan.to_dict()))
    print(f"T* = {plan.t_star:.3f} (confidence branch), T-hat = {plan.t_hat:.3f} (CP branch, {rule})")
    return 0


FULL_CASES = {"score_decrease": 100_000, "gradient_sign": 100_000, "gradient_fd": 10_000,
              "sufficient_condition": 100_000, "decay_bound": 10_000,
              "entropy_monotonicity": 100_000}


def run_theory_checks(cases: int | None, seed: int) -> list[theory.TheoryReport]:
    n = lambda name: cases if cases is not None else FULL_CASES[name]  # noqa: E731
    return [
        theory.verify_score_decrease(n("score_decrease"), seed),
        theory.verify_gradient_sign_theorem(n("gradient_sign"), seed),
        theory.gradient_fd_check(n("gradient_fd"), seed),
        theory.verify_sufficient_condition(n("sufficient_condition"), seed),
        theory.verify_decay_bound(n("decay_bound"), seed),
        theory.verify_entropy_monotonicity(n("entropy_monotonicity"), seed),
    ]


def cmd_verify_theory(cfg, out: Outputs) -> int:
    if cfg["cases"] is not None and cfg["cases"] < 1:
        raise UsageError("--cases must be >= 1")
    t0 = time.perf_counter()
    reports = run_theory_checks(cfg["cases"], cfg["seed"])
    buf = io.StringIO()
    for r in reports:
        r.write_jsonl(buf)
    total = sum(r.violations for r in reports)
    summary = {"violations": total, "checks": [r.summary() for r in reports],
               "bound_minimizer": {str(c): theory.bound_minimizer(c) for c in (10, 100, 1000)},
               "seconds": round(time.perf_counter() - t0, 3)}
    buf.write(json.dumps({"summary": summary}) + "\n")
    out.add("theory.jsonl", buf.getvalue())
    for r in reports:
        s = r.summary()
        print(f"{s['check']:22s} cases={s['cases']:<7d} covered={s['covered']:<7d} violations={s['violations']}")
    print(f"violations: {total}")
    return 0 if total == 0 else 1


def cmd_mondrian_compare(cfg, out: Outputs) -> int:
    _check_alpha(cfg)
    method = _methods(cfg, ["raps"])[0]
    grid = _grid(cfg)
    table, _ = _load(cfg)
    res = mondrian_compare(table, cfg["calib_fraction"], cfg["cp_fraction"], method, cfg["alpha"],
                           cfg["trials"], cfg["seed"], grid)
    rows = summarize_comparison(res)
    out.add("mondrian_compare.csv", _csv_text(["approach", "metric", "median", "std"], rows))
    for r in rows:
        print(f"{r['approach']:10s} {r['metric']:12s} median={r['median']:.4f} std={r['std']:.4f}")
    return 0


COMMANDS = {
    "calibrate": cmd_calibrate,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "guideline": cmd_guideline,
    "verify-theory": cmd_verify_theory,
    "mondrian-compare": cmd_mondrian_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        out = Outputs(Path(cfg["out_dir"]))
        code = COMMANDS[args.command](cfg, out)
        out.commit()
        return code
    except (UsageError, FileNotFoundError, DataFormatError, ValidationError, ValueError, OSError) as exc:
        print(f"tscp {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
