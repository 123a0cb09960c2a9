"""Config-driven command line: JSON in, JSON and CSV reports out."""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .flow import BlowUpError, linearize
from .gaussian import (SingularCovarianceError, covariance, density_bound_constant,
                       frozen_density, gsp_constant)
from .model import model_from_config, validate_assumptions
from .parametrix import (beta_tail_bound, convolve_chain, green_remainder,
                         kernel_exponent_profile, series_partial_sum)
from .simulate import aronson_fit, euler_paths, kde_grid, uniqueness_experiment, xi_epsilon
from .streams import set_default_threads

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_VALIDATION = 2
EXIT_CONFIG = 64

STOCHASTIC = {"validate", "series", "mc-compare", "bounds-fit", "uniqueness", "xi-scan",
              "green-remainder"}

CSV_COLUMNS = {
    "density": ["index", "s", "t", "x", "y", "value", "stderr", "provenance"],
    "series": ["index", "s", "t", "x", "y", "k_max", "value", "stderr", "provenance"],
    "mc-compare": ["index", "y", "series_value", "series_stderr", "kde_value", "kde_stderr",
                   "z_score", "within"],
    "scaling-check": ["tau", "gsp_constant", "lambda_min", "lambda_max", "log_peak_density"],
    "kernel-profile": ["tau", "normalized_kernel"],
    "bounds-fit": ["index", "y", "value", "stderr"],
    "uniqueness": ["radius", "gap", "combined_stderr", "argmax", "within"],
    "xi-scan": ["eps", "value", "stderr", "error"],
    "green-remainder": ["span", "value", "stderr", "bound"],
}


class ConfigError(ValueError):
    pass


class ValidationFailure(Exception):
    def __init__(self, results):
        super().__init__("assumption validation failed")
        self.results = results


def _vec(v) -> list:
    return [float(a) for a in np.ravel(v)]


def _fmt(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(repr(float(a)) for a in np.ravel(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _need(cfg: Mapping, key: str):
    if key not in cfg:
        raise ConfigError(f"config is missing {key!r}")
    return cfg[key]


def make_test_function(spec: Mapping | None) -> tuple[Callable, float]:
    """(h, sup|h|) from {"kind": "bump" | "constant" | "coordinate", ...}."""
    spec = dict(spec or {"kind": "bump"})
    kind = spec.get("kind", "bump")
    if kind == "bump":
        centre = np.asarray(spec.get("center", 0.0), dtype=float)
        width = float(spec.get("width", 1.0))
        return (lambda t, y: np.exp(-np.sum((y - centre) ** 2, axis=-1) / width ** 2)), 1.0
    if kind == "constant":
        value = float(spec.get("value", 1.0))
        return (lambda t, y: np.full(np.shape(y)[0], value)), abs(value)
    if kind == "coordinate":
        i = int(spec.get("index", 0))
        clip = float(spec.get("clip", 10.0))
        return (lambda t, y: np.clip(y[..., i], -clip, clip)), clip
    raise ConfigError(f"unknown test function kind {kind!r}")


def _points(cfg: Mapping, dim: int) -> list[tuple[np.ndarray, np.ndarray]]:
    if "points" in cfg:
        pts = [(np.asarray(p[0], float), np.asarray(p[1], float)) for p in cfg["points"]]
    else:
        pts = [(np.asarray(_need(cfg, "x"), float), np.asarray(_need(cfg, "y"), float))]
    for x, y in pts:
        if x.shape != (dim,) or y.shape != (dim,):
            raise ConfigError(f"points must have {dim} coordinates")
    return pts


def _grid(cfg: Mapping, dim: int) -> np.ndarray:
    grid = np.atleast_2d(np.asarray(_need(cfg, "grid"), dtype=float))
    if grid.shape[1] != dim:
        raise ConfigError(f"grid points must have {dim} coordinates")
    return grid


def cmd_validate(model, cfg, seed):
    rep = validate_assumptions(model, int(cfg.get("budget", 1000)), seed,
                               float(cfg.get("nd_threshold", 1e-6)))
    results = rep.to_dict()
    if not rep.ok:
        raise ValidationFailure(results)
    return results, None


def cmd_density(model, cfg, seed):
    s, t = float(_need(cfg, "s")), float(_need(cfg, "t"))
    rows = []
    for i, (x, y) in enumerate(_points(cfg, model.dim)):
        lin = linearize(model, t, y, start=s)
        est = frozen_density(lin, s, t, x, y, int(cfg.get("quad_order", 16)))
        rows.append({"index": i, "s": s, "t": t, "x": _vec(x), "y": _vec(y), **est.to_dict()})
    return {"points": rows}, rows


def cmd_series(model, cfg, seed):
    s, t = float(_need(cfg, "s")), float(_need(cfg, "t"))
    k_max = int(cfg.get("k_max", 2))
    budget = int(cfg.get("budget", 100_000))
    sampler = cfg.get("sampler", "beta")
    rows = []
    for i, (x, y) in enumerate(_points(cfg, model.dim)):
        est = series_partial_sum(model, s, t, x, y, k_max, budget, seed, sampler)
        rows.append({"index": i, "s": s, "t": t, "x": _vec(x), "y": _vec(y), "k_max": k_max,
                     **est.to_dict()})
    return {"points": rows}, rows


def cmd_mc_compare(model, cfg, seed):
    s, t = float(cfg.get("s", 0.0)), float(_need(cfg, "t"))
    x = np.asarray(cfg.get("x", [0.0] * model.dim), dtype=float)
    grid = _grid(cfg, model.dim)
    k_max = int(cfg.get("k_max", 2))
    ens = euler_paths(model, s, x, t, int(cfg.get("n_steps", 400)),
                      int(cfg.get("mc_budget", 1_000_000)), seed)
    kde = kde_grid(ens, grid)
    rows = []
    for i, (y, kd) in enumerate(zip(grid, kde)):
        ser = series_partial_sum(model, s, t, x, y, k_max, int(cfg.get("budget", 100_000)),
                                 seed, cfg.get("sampler", "beta"))
        comb = math.hypot(ser.stderr, kd.stderr)
        z = abs(ser.value - kd.value) / comb if comb > 0 else math.inf
        rows.append({"index": i, "y": _vec(y), "series_value": ser.value,
                     "series_stderr": ser.stderr, "kde_value": kd.value,
                     "kde_stderr": kd.stderr, "z_score": z, "within": bool(z <= 3.0)})
    return {"rows": rows, "all_within": all(r["within"] for r in rows)}, rows


def cmd_scaling_check(model, cfg, seed):
    T = float(cfg.get("T", model.horizon))
    y = np.asarray(cfg.get("y", [0.0] * model.dim), dtype=float)
    taus = [float(v) for v in cfg.get("taus", [1e-3, 1e-2, 1e-1, 1.0])]
    lin = linearize(model, T, y, start=T - max(taus))
    rows = []
    for tau in sorted(taus):
        cov = covariance(lin, T - tau, T)
        lam = cov.eigvals_hat()
        peak = frozen_density(lin, T - tau, T, lin.theta(T - tau), y).value
        rows.append({"tau": tau, "gsp_constant": gsp_constant(cov), "lambda_min": float(lam[0]),
                     "lambda_max": float(lam[-1]), "log_peak_density": math.log(peak)})
    logt = np.log([r["tau"] for r in rows])
    slope = float(np.polyfit(logt, [r["log_peak_density"] for r in rows], 1)[0]) \
        if len(rows) > 1 else math.nan
    gs = [r["gsp_constant"] for r in rows]
    return {"rows": rows, "peak_density_slope": slope,
            "expected_slope": -model.n ** 2 * model.d / 2.0,
            "gsp_spread": max(gs) - min(gs)}, rows


def cmd_kernel_profile(model, cfg, seed):
    taus = np.asarray(cfg.get("taus", np.logspace(-3, -1, 8).tolist()), dtype=float)
    prof = kernel_exponent_profile(model, cfg.get("offset", [1.0] * model.dim),
                                   cfg.get("y", [0.0] * model.dim), taus, cfg.get("T"))
    rows = [{"tau": float(a), "normalized_kernel": float(b)}
            for a, b in zip(prof.taus, prof.normalized)]
    res = prof.to_dict()
    res["theory"] = model.eta / 2.0 - 1.0
    return res, rows


def cmd_bounds_fit(model, cfg, seed):
    s, t = float(cfg.get("s", 0.0)), float(_need(cfg, "t"))
    x = np.asarray(cfg.get("x", [0.0] * model.dim), dtype=float)
    grid = _grid(cfg, model.dim)
    ens = euler_paths(model, s, x, t, int(cfg.get("n_steps", 400)),
                      int(cfg.get("mc_budget", 200_000)), seed)
    kde = kde_grid(ens, grid)
    lower, upper = aronson_fit(np.broadcast_to(x, grid.shape), grid, [e.value for e in kde],
                               model, t - s, s)
    lin = linearize(model, t, grid[0], start=s)
    pts = [(s + f * (t - s), x) for f in cfg.get("fractions", [0.0, 0.25, 0.5, 0.75])]
    C_frozen = density_bound_constant(lin, pts)
    dt = float(cfg.get("dt", t - s))
    tails = {str(k): beta_tail_bound(k, model.eta, dt, max(C_frozen, 1.0)) for k in range(3)}
    rows = [{"index": i, "y": _vec(y), "value": e.value, "stderr": e.stderr}
            for i, (y, e) in enumerate(zip(grid, kde))]
    return {"aronson_lower": lower, "aronson_upper": upper, "density_bound_constant": C_frozen,
            "beta_tail_bounds": tails, "rows": rows,
            "finite": bool(math.isfinite(lower) and math.isfinite(upper))}, rows


def cmd_uniqueness(model, cfg, seed):
    fam = cfg.get("families", ["spherical", "axis"])
    rep = uniqueness_experiment(model, fam[0], fam[1], cfg.get("radii", [0.1, 0.05, 0.025]),
                                int(cfg.get("budget", 100_000)), _grid(cfg, model.dim), seed,
                                float(cfg.get("s", 0.0)), float(cfg.get("t", 0.5)),
                                cfg.get("x"), int(cfg.get("n_steps", 200)))
    rows = [{k: v for k, v in r.to_dict().items() if k in CSV_COLUMNS["uniqueness"]}
            for r in rep.rows]
    return rep.to_dict(), rows


def cmd_xi_scan(model, cfg, seed):
    h, sup = make_test_function(cfg.get("h"))
    s = float(cfg.get("s", 0.0))
    x = np.asarray(cfg.get("x", [0.0] * model.dim), dtype=float)
    target = float(h(np.array([s]), x[None])[0])
    rows = []
    for eps in cfg.get("eps", [0.1, 0.05, 0.025]):
        est = xi_epsilon(model, h, s, x, float(eps), int(cfg.get("budget", 400_000)), seed)
        rows.append({"eps": float(eps), "value": est.value, "stderr": est.stderr,
                     "error": abs(est.value - target)})
    errs = [r["error"] for r in rows]
    ratios = [b / a for a, b in zip(errs, errs[1:]) if a > 0]
    return {"rows": rows, "target": target, "h_sup": sup, "ratios": ratios,
            "decreasing": all(b < a for a, b in zip(errs, errs[1:]))}, rows


def cmd_green_remainder(model, cfg, seed):
    h, sup = make_test_function(cfg.get("h"))
    s = float(cfg.get("s", 0.0))
    x = np.asarray(cfg.get("x", [0.0] * model.dim), dtype=float)
    eps = float(cfg.get("eps", 0.0))
    rows = []
    for span in cfg.get("spans", [0.01, 0.04, 0.16]):
        est = green_remainder(model, h, s, x, eps, s + float(span),
                              int(cfg.get("budget", 100_000)), seed, cfg.get("sampler", "beta"))
        rows.append({"span": float(span), "value": est.value, "stderr": est.stderr,
                     "bound": 0.5 * sup})
    vals = [abs(r["value"]) for r in rows]
    slope = float(np.polyfit(np.log([r["span"] for r in rows]), np.log(vals), 1)[0]) \
        if len(rows) > 1 and all(v > 0 for v in vals) else math.nan
    return {"rows": rows, "h_sup": sup, "growth_exponent": slope}, rows


COMMANDS: dict[str, Callable] = {
    "validate": cmd_validate,
    "density": cmd_density,
    "series": cmd_series,
    "mc-compare": cmd_mc_compare,
    "scaling-check": cmd_scaling_check,
    "kernel-profile": cmd_kernel_profile,
    "bounds-fit": cmd_bounds_fit,
    "uniqueness": cmd_uniqueness,
    "xi-scan": cmd_xi_scan,
    "green-remainder": cmd_green_remainder,
}


def _write_csv(path: Path, command: str, rows) -> None:
    cols = CSV_COLUMNS[command]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in cols])


def _write_report(out: Path, command: str, cfg: Mapping, results: Any, timings: Mapping,
                  rows=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    report = {"command": command, "config": cfg, "results": results, "timings": dict(timings)}
    text = json.dumps(report, sort_keys=True, indent=2, default=_json_default)
    (out / f"{command}.json").write_text(text + "\n")
    if rows is not None and command in CSV_COLUMNS:
        _write_csv(out / f"{command}.csv", command, rows)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def run(command: str, cfg: Mapping, out: str | Path = ".", seed: int | None = None,
        threads: int | None = None) -> int:
    """Run one command; returns the process exit status."""
    out = Path(out)
    cfg = dict(cfg)
    if command not in COMMANDS:
        print(f"unknown command {command!r}", file=sys.stderr)
        return EXIT_CONFIG
    if seed is not None:
        cfg["seed"] = int(seed)
    if threads is not None:
        set_default_threads(threads)
    t0 = time.perf_counter()
    try:
        if command in STOCHASTIC and "seed" not in cfg:
            raise ConfigError(f"command {command!r} needs an explicit seed")
        run_seed = int(cfg.get("seed", 0))
        if run_seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        model = model_from_config(_need(cfg, "model"))
    except (ConfigError, ValueError, TypeError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    timings = {"setup_s": time.perf_counter() - t0}
    t1 = time.perf_counter()
    try:
        results, rows = COMMANDS[command](model, cfg, run_seed)
    except ValidationFailure as exc:
        timings["run_s"] = time.perf_counter() - t1
        _write_report(out, command, cfg, exc.results, timings)
        return EXIT_VALIDATION
    except (BlowUpError, FloatingPointError, SingularCovarianceError, np.linalg.LinAlgError) as exc:
        timings["run_s"] = time.perf_counter() - t1
        _write_report(out, command, cfg, {"error": str(exc), "partial": True}, timings)
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, TypeError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    timings["run_s"] = time.perf_counter() - t1
    _write_report(out, command, cfg, results, timings, rows)
    return EXIT_OK


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="kolmo-parametrix",
                                description="Parametrix experiments for chain SDEs.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", default=".", help="directory for the JSON and CSV reports")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (results do not depend on it)")
    args = p.parse_args(argv)
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not isinstance(cfg, dict):
        print("config error: top level must be an object", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.command, cfg, args.out, args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())
