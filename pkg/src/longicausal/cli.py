"""Command-line entry point: ``longicausal {estimate,simulate,diagnose}``.

Each command reads an optional JSON config (``--config``); flags override
config values, and every key has a default listed in ``DEFAULTS``.  Reports
embed the resolved config and its hash, and contain no timestamps, so a
rerun with the same config reproduces them byte for byte.

Failures print one JSON object ``{"error": ..., "message": ..., "command": ...}``
to stderr and exit with status 2 (bad input) or 1 (numerical failure).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import DataValidationError, LongitudinalDataset, load_wide_csv, split_folds
from .learners import LearnerSpec
from .nuisance import cumulative_weights, fit_propensity, write_diagnostics_csv
from .simulation import METHODS, DgpSpec, run_monte_carlo, true_ate

__all__ = ["DEFAULTS", "ConfigError", "resolve_config", "main"]

WORKERS_ENV = "LONGICAUSAL_WORKERS"

_COMMON = {
    "seed": 0,
    "alpha": 0.05,
    "trim": [0.01, 0.99],
    "out": "out",
}

DEFAULTS = {
    "estimate": {
        **_COMMON,
        "data": None,
        "schema": None,
        "outcomes": None,
        "methods": ["mase"],
        "fold_seed": 0,
        "bootstrap_B": 200,
        "tune_folds": 3,
        "retune_per_suffix": False,
        "ps_learners": None,
        "ice_learners": None,
        "dump_nuisances": False,
        "dump_scores": False,
        "msm_stabilized": False,
    },
    "simulate": {
        **_COMMON,
        "dgp": {},
        "R": 100,
        "methods": list(METHODS),
        "workers": 1,
        "bootstrap_B": 200,
        "retune_per_suffix": False,
        "truth_draws": 200000,
        "msm_stabilized": False,
    },
    "diagnose": {
        **_COMMON,
        "data": None,
        "schema": None,
        "fold_seed": 0,
        "bins": 20,
        "tune_folds": 3,
        "ps_learners": None,
    },
}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    if not math.isfinite(x):
        return "nan"
    return format(x, ".6g")


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(_canonical(cfg).encode()).hexdigest()


def _parse_trim(v):
    if isinstance(v, str):
        parts = v.split(",")
    else:
        parts = list(v)
    if len(parts) != 2:
        raise ConfigError(f"trim needs two bounds LO,HI, got {v!r}")
    try:
        lo, hi = (float(p) for p in parts)
    except (TypeError, ValueError):
        raise ConfigError(f"trim bounds must be numbers, got {v!r}") from None
    if not 0.0 < lo < hi < 1.0:
        raise ConfigError(f"trim bounds must satisfy 0 < lo < hi < 1, got {lo}, {hi}")
    return [lo, hi]


def _learner_grids(v, what):
    """``[[{"kind": ..., "hyperparameters": {...}}, ...], ...]`` to LearnerSpec grids."""
    if v is None:
        return None
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{what} must be a non-empty list of grids")
    grids = []
    for grid in v:
        if not isinstance(grid, list) or not grid:
            raise ConfigError(f"{what}: every grid must be a non-empty list")
        specs = []
        for item in grid:
            extra = set(item) - {"kind", "hyperparameters", "seed"}
            if extra:
                raise ConfigError(f"{what}: unknown learner keys {sorted(extra)}")
            try:
                specs.append(
                    LearnerSpec(item["kind"], item.get("hyperparameters", {}), item.get("seed", 0))
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{what}: {exc}") from None
        grids.append(specs)
    return grids


def resolve_config(command: str, file_cfg: dict | None, overrides: dict) -> dict:
    """Merge defaults, config file and flag overrides; validate the result."""
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    file_cfg = file_cfg or {}
    if not isinstance(file_cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(file_cfg) - set(cfg)
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
    cfg.update(file_cfg)
    cfg.update({k: v for k, v in overrides.items() if v is not None})

    cfg["trim"] = _parse_trim(cfg["trim"])
    try:
        cfg["alpha"] = float(cfg["alpha"])
        cfg["seed"] = int(cfg["seed"])
    except (TypeError, ValueError):
        raise ConfigError("alpha must be a number and seed an integer") from None
    if not 0.0 < cfg["alpha"] < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {cfg['alpha']}")
    if "methods" in cfg:
        m = cfg["methods"]
        if isinstance(m, str):
            m = [s.strip() for s in m.split(",") if s.strip()]
        bad = [x for x in m if x not in METHODS]
        if bad or not m:
            raise ConfigError(f"methods must be a non-empty subset of {list(METHODS)}, got {m}")
        cfg["methods"] = list(m)
    if command in ("estimate", "diagnose"):
        if not cfg["data"]:
            raise ConfigError("no dataset path given (config key 'data')")
        if cfg["schema"] is None:
            raise ConfigError("no schema given (config key 'schema')")
    if command == "simulate":
        try:
            DgpSpec.from_dict(cfg["dgp"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"dgp: {exc}") from None
        if int(cfg["R"]) < 2:
            raise ConfigError("R must be at least 2")
        if int(cfg["workers"]) < 1:
            raise ConfigError("workers must be at least 1")
    for key in ("bootstrap_B",):
        if key in cfg and cfg[key] and int(cfg[key]) < 100:
            raise ConfigError(f"{key} must be 0 or at least 100")
    return cfg


def _load_dataset(cfg) -> LongitudinalDataset:
    return load_wide_csv(cfg["data"], cfg["schema"])


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _json_text(doc) -> str:
    return json.dumps(_clean(doc), sort_keys=True, indent=1) + "\n"


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return _clean(x.item())
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _weight_summary(pf) -> dict:
    T = pf.n_timepoints
    probs = [0.0, 0.01, 0.25, 0.5, 0.75, 0.99, 1.0]
    out = {}
    for t in range(1, T + 1):
        w = cumulative_weights(pf, t)
        out[str(t)] = {
            "quantiles": dict(zip([str(p) for p in probs], np.quantile(w, probs).tolist())),
            "mean": float(w.mean()),
        }
    return out


def _ps_summary(pf) -> dict:
    return {
        "trim": list(pf.trim),
        "trim_hits": pf.trim_hits().tolist(),
        "raw_min": pf.raw.min(axis=0).tolist(),
        "raw_max": pf.raw.max(axis=0).tolist(),
        "weights": _weight_summary(pf),
        "flags": {str(k): v for k, v in pf.flags.items()},
    }


def cmd_estimate(cfg: dict) -> dict:
    from .baselines import ice_lm, msm_lm
    from .pipeline import run_mase

    ds = _load_dataset(cfg)
    outcomes = cfg["outcomes"]
    if outcomes is None:
        outcomes = list(range(ds.q))
    for j in outcomes:
        if not isinstance(j, int) or not 0 <= j < ds.q:
            raise ConfigError(f"outcome index {j!r} out of range 0..{ds.q - 1}")
    trim = tuple(cfg["trim"])
    ps_specs = _learner_grids(cfg["ps_learners"], "ps_learners")
    ice_specs = _learner_grids(cfg["ice_learners"], "ice_learners")
    B = int(cfg["bootstrap_B"])
    out = Path(cfg["out"])
    results = []
    pf = None
    for j in outcomes:
        for m in cfg["methods"]:
            row = {"outcome": j, "method": m}
            if m == "mase":
                res = run_mase(
                    ds, j, fold_seed=cfg["fold_seed"], seed=cfg["seed"], ps_specs=ps_specs,
                    ice_specs=ice_specs, trim=trim, alpha=cfg["alpha"],
                    tune_folds=cfg["tune_folds"], retune_per_suffix=cfg["retune_per_suffix"], pf=pf,
                )
                pf = res.pf
                est = res.estimate
                row.update(
                    ate=res.ate, se=res.se, ci=list(res.inference.ci), theta=est.theta.tolist(),
                    solver={
                        "name": est.solver,
                        "condition_number": est.condition_number,
                        "score_norm": est.score_norm,
                    },
                    flags={"negative_variance": res.inference.flags["negative_variance"],
                           "ice": {str(k): v for k, v in res.ice.flags.items()}},
                    propensity=_ps_summary(res.pf),
                )
                if cfg["dump_nuisances"]:
                    out.mkdir(parents=True, exist_ok=True)
                    write_diagnostics_csv(out / f"nuisances_outcome{j}.csv", res.pf, res.ice)
                if cfg["dump_scores"]:
                    _write(out / f"scores_outcome{j}.json", est.scores.to_json())
            elif m == "msm_lm":
                e = msm_lm(
                    ds, j, trim, stabilized=bool(cfg["msm_stabilized"]), B=B, seed=cfg["seed"],
                    alpha=cfg["alpha"],
                )
                row.update(ate=e.ate, se=e.se, ci=e.ci, diagnostics=e.diagnostics)
            else:
                e = ice_lm(ds, j, B=B, seed=cfg["seed"], alpha=cfg["alpha"])
                row.update(ate=e.ate, se=e.se, ci=e.ci, diagnostics=e.diagnostics)
            if row["ate"] is None or not math.isfinite(row["ate"]):
                raise ArithmeticError(f"non-finite ATE for outcome {j}, method {m}")
            results.append(row)
    report = {
        "format": "longicausal.estimate",
        "version": 1,
        "software_version": __version__,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "n_subjects": ds.n_subjects,
        "n_timepoints": ds.n_timepoints,
        "fold_seed": cfg["fold_seed"],
        "seed": cfg["seed"],
        "results": results,
    }
    _write(out / "estimate.json", _json_text(report))
    rows = []
    for r in results:
        lo, hi = r["ci"] if r["ci"] is not None else (None, None)
        rows.append([r["outcome"], r["method"], _fmt(r["ate"]), _fmt(r["se"]), _fmt(lo), _fmt(hi)])
    _write(out / "estimate.csv", _csv_text(["outcome", "method", "ate", "se", "ci_lo", "ci_hi"], rows))
    return report


def cmd_simulate(cfg: dict) -> dict:
    spec = DgpSpec.from_dict(cfg["dgp"])
    truth = true_ate(spec, n_oracle=int(cfg["truth_draws"]))
    options = {
        "alpha": cfg["alpha"],
        "trim": list(cfg["trim"]),
        "bootstrap_B": int(cfg["bootstrap_B"]),
        "retune_per_suffix": bool(cfg["retune_per_suffix"]),
        "msm_stabilized": bool(cfg["msm_stabilized"]),
    }
    rep = run_monte_carlo(
        spec, cfg["methods"], int(cfg["R"]), cfg["seed"], int(cfg["workers"]), options, truth
    )
    out = Path(cfg["out"])
    _write(out / "simulate.csv", rep.to_csv())
    doc = json.loads(rep.to_json())
    resolved = dict(cfg)
    resolved.pop("workers")  # parallelism does not change results
    doc.update(config=resolved, config_hash=config_hash(resolved), software_version=__version__)
    _write(out / "simulate.json", _json_text(doc))
    return doc


def ps_histogram(prob: np.ndarray, bins: int) -> list[list]:
    """Rows ``(visit, bin_lo, bin_hi, count)`` over equal-width bins of [0, 1]."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    rows = []
    for t in range(prob.shape[1]):
        counts, _ = np.histogram(prob[:, t], bins=edges)
        rows += [[t + 1, _fmt(edges[b]), _fmt(edges[b + 1]), int(c)] for b, c in enumerate(counts)]
    return rows


def cmd_diagnose(cfg: dict) -> dict:
    ds = _load_dataset(cfg)
    bins = int(cfg["bins"])
    if bins < 1:
        raise ConfigError("bins must be positive")
    folds = split_folds(ds, cfg["fold_seed"])
    pf = fit_propensity(
        ds, folds, _learner_grids(cfg["ps_learners"], "ps_learners"), tuple(cfg["trim"]),
        seed=cfg["seed"], tune_folds=cfg["tune_folds"],
    )
    out = Path(cfg["out"])
    hist = ps_histogram(pf.raw, bins)
    _write(out / "ps_histogram.csv", _csv_text(["visit", "bin_lo", "bin_hi", "count"], hist))
    doc = {
        "format": "longicausal.diagnostics",
        "version": 1,
        "software_version": __version__,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "n_subjects": ds.n_subjects,
        "propensity": _ps_summary(pf),
    }
    _write(out / "diagnostics.json", _json_text(doc))
    return doc


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="longicausal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--alpha", type=float)
        p.add_argument("--trim", help="LO,HI propensity bounds")
        p.add_argument("--workers", type=int)
        if name != "diagnose":
            p.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
        if name == "estimate":
            p.add_argument(
                "--dump-diagnostics", action="store_true", default=None,
                help="also write per-subject nuisance CSVs and score JSON",
            )
    return parser


def _workers(flag, cfg_value):
    if flag is not None:
        return flag
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    return cfg_value


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_cfg = None
        if args.config:
            try:
                with open(args.config, encoding="utf-8") as fh:
                    file_cfg = json.load(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from None
        overrides = {
            "seed": args.seed,
            "out": args.out,
            "alpha": args.alpha,
            "trim": args.trim,
            "methods": getattr(args, "methods", None),
        }
        if getattr(args, "dump_diagnostics", None):
            overrides["dump_nuisances"] = overrides["dump_scores"] = True
        if args.command == "simulate":
            base = (file_cfg or {}).get("workers", DEFAULTS["simulate"]["workers"])
            overrides["workers"] = _workers(args.workers, base)
        cfg = resolve_config(args.command, file_cfg, overrides)
        COMMANDS[args.command](cfg)
    except (ConfigError, DataValidationError, FileNotFoundError) as exc:
        _report_error(args.command, exc)
        return 2
    except (ArithmeticError, np.linalg.LinAlgError, RuntimeError, ValueError) as exc:
        _report_error(args.command, exc)
        return 1
    return 0


def _report_error(command, exc):
    doc = {"command": command, "error": type(exc).__name__, "message": str(exc)}
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")


if __name__ == "__main__":
    sys.exit(main())
