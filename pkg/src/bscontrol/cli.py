"""Configuration ingestion and experiment orchestration.

Plain-text key/value configs (INI sections), deterministic seeding and
bit-stable emission: CSV with 17 significant digits, schema-versioned JSON
summaries.  Exit codes: 2 validation, 3 smallness violation, 4
conditioning, 5 internal.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import diagnostics
from .errors import (BSControlError, ConditioningError, ConfigurationError,
                     SmallnessViolationError)
from .fi import FIProblem, solution_summary
from .geometry import SpaceTimeField, build_grid, build_masks, build_time_grid
from .insensitize import (PerturbationSpec, SynthesisBundle, insensitivity_check,
                          synthesize)
from .solvers import (LinearOperatorSet, coefficient_preset,
                      dump_trajectory_csv, solve_adjoint_cascade,
                      validate_coefficients)
from .weights import (WeightParams, admissible_time_profile, build_chi,
                      build_eta, build_weight_tables, check_elementary_estimates,
                      dump_weight_csv, empirical_carleman_check, validate_params)

SCHEMA = "bscontrol-report-v1"

DEFAULTS = {
    "grid": {"length": "1.0", "cells": "64"},
    "time": {"horizon": "8.0", "steps": "128"},
    "masks": {"omega": "0.25,0.75", "obs_bulk": "0.35,0.65",
              "obs_surface": "left,right", "margin": "0.02"},
    "coefficients": {"preset": "logistic"},
    "weights": {"lambda": "1.0", "m": "2.3", "s_coeff": "1.0",
                "rho_clip": "700", "eta_peak": "0.5"},
    "functional": {"theta": "1.0", "theta_s": "0.5"},
    "source": {"family": "gaussian", "amplitude": "1e-3",
               "center": "0.45", "width": "0.12"},
    "solver": {"cg_tol": "1e-10", "cg_max_iter": "20000",
               "newton_tol": "1e-11", "loop_tol": "1e-9", "max_outer": "30"},
    "run": {"seed": "12345"},
}


@dataclass
class RunConfig:
    raw: dict
    seed: int

    def get(self, section: str, key: str) -> str:
        return self.raw[section][key]

    def getf(self, section: str, key: str) -> float:
        try:
            return float(self.raw[section][key])
        except ValueError as exc:
            raise ConfigurationError(
                f"[{section}] {key} = {self.raw[section][key]!r}: not a number") from exc

    def geti(self, section: str, key: str) -> int:
        try:
            return int(self.raw[section][key])
        except ValueError as exc:
            raise ConfigurationError(
                f"[{section}] {key} = {self.raw[section][key]!r}: not an integer") from exc

    def interval(self, section: str, key: str) -> tuple[float, float]:
        parts = self.raw[section][key].split(",")
        if len(parts) != 2:
            raise ConfigurationError(f"[{section}] {key}: expected 'a,b'")
        return float(parts[0]), float(parts[1])

    def hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True) + f"|seed={self.seed}"
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_config(path: str | None, seed_override: int | None = None) -> RunConfig:
    raw = {s: dict(kv) for s, kv in DEFAULTS.items()}
    if path is not None:
        cp = configparser.ConfigParser()
        read = cp.read(path)
        if not read:
            raise ConfigurationError(f"config file not found: {path}")
        for section in cp.sections():
            if section not in raw:
                raise ConfigurationError(f"unknown config section [{section}]")
            for key, val in cp[section].items():
                if key not in raw[section]:
                    raise ConfigurationError(
                        f"unknown key '{key}' in section [{section}]")
                raw[section][key] = val
    seed = int(raw["run"]["seed"]) if seed_override is None else int(seed_override)
    return RunConfig(raw=raw, seed=seed)


def build_setup(cfg: RunConfig):
    """Construct the full synthesis bundle plus the configured source."""
    grid = build_grid(cfg.getf("grid", "length"), cfg.geti("grid", "cells"))
    tgrid = build_time_grid(cfg.getf("time", "horizon"), cfg.geti("time", "steps"))
    surf = [s.strip() for s in cfg.get("masks", "obs_surface").split(",") if s.strip()]
    masks = build_masks(grid, cfg.interval("masks", "omega"),
                        cfg.interval("masks", "obs_bulk"), surf,
                        cfg.getf("masks", "margin"))
    preset = cfg.get("coefficients", "preset")
    kw = {k: float(v) for k, v in cfg.raw["coefficients"].items() if k != "preset"}
    cs = coefficient_preset(preset, **kw)
    validate_coefficients(cs)
    params = validate_params(WeightParams(
        lam=cfg.getf("weights", "lambda"), m=cfg.getf("weights", "m"),
        s_coeff=cfg.getf("weights", "s_coeff"),
        rho_clip=cfg.getf("weights", "rho_clip")), tgrid.horizon)
    eta = build_eta(grid, masks, cfg.getf("weights", "eta_peak"))
    tables = build_weight_tables(grid, tgrid, eta, params)
    chi = build_chi(grid, masks)
    ops = LinearOperatorSet.from_coefficients(cs, grid, tgrid)
    bundle = SynthesisBundle(
        cs=cs, grid=grid, time_grid=tgrid, masks=masks, tables=tables,
        chi=chi, ops=ops, theta=cfg.getf("functional", "theta"),
        theta_s=cfg.getf("functional", "theta_s"),
        cg_tol=cfg.getf("solver", "cg_tol"),
        max_iter=cfg.geti("solver", "cg_max_iter"),
        loop_tol=cfg.getf("solver", "loop_tol"),
        max_outer=cfg.geti("solver", "max_outer"))
    F = build_source(cfg, bundle)
    return bundle, F


def build_source(cfg: RunConfig, bundle: SynthesisBundle,
                 rng=None) -> SpaceTimeField:
    """Named analytic source families times the admissible time profile.

    The time profile decays at the critical rate that keeps the weighted
    source norms finite; the family shapes the spatial part.  Cell c of
    the returned field holds the source sample for step c.
    """
    family = cfg.get("source", "family")
    amp = cfg.getf("source", "amplitude")
    g, tg = bundle.grid, bundle.time_grid
    M = tg.step_count
    x = g.x
    if family == "zero":
        shape = np.zeros_like(x)
    elif family == "gaussian":
        c0 = cfg.getf("source", "center")
        wd = cfg.getf("source", "width")
        shape = np.exp(-0.5 * ((x - c0) / wd) ** 2)
    elif family == "random_fourier":
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        shape = np.zeros_like(x)
        for k in range(1, 5):
            shape += rng.standard_normal() / k * np.cos(np.pi * k * x / g.length
                                                        + rng.uniform(0, 2 * np.pi))
    else:
        raise ConfigurationError(f"unknown source family '{family}'")
    prof = admissible_time_profile(bundle.tables)   # (M,), peak 1
    F = SpaceTimeField.zeros(g, M + 1)
    F.bulk[1:] = amp * prof[:, None] * shape[None, :]
    F.surface[1:] = F.bulk[1:][:, [0, -1]]
    return F


def _fmt(v):
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return float(f"{v:.17g}")
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (np.floating, float)):
        return _fmt(float(obj))
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (str, bool)) or obj is None:
        return obj
    return str(obj)


def write_json(payload: dict, path: str) -> None:
    payload = {"schema": SCHEMA, **_jsonable(payload)}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(rows: list[dict], path: str) -> None:
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(",".join(
                f"{v:.17g}" if isinstance(v, (float, np.floating)) else str(v)
                for v in (row[k] for k in keys)) + "\n")


def cmd_synthesize(cfg: RunConfig, outdir: str) -> dict:
    t0 = time.perf_counter()
    bundle, F = build_setup(cfg)
    rng = np.random.default_rng(cfg.seed)
    report = synthesize(F, bundle)
    specs = [PerturbationSpec.random(bundle.grid, rng) for _ in range(3)]
    checks = insensitivity_check(bundle, F, report.v, specs)
    sol = report.fi_solution
    base_prob = FIProblem(
        F=F, G=SpaceTimeField.zeros(bundle.grid, bundle.time_grid.step_count + 1),
        theta=bundle.theta, theta_s=bundle.theta_s, grid=bundle.grid,
        time_grid=bundle.time_grid, masks=bundle.masks, tables=bundle.tables,
        chi=bundle.chi, ops=bundle.ops)
    summary = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "status": report.status,
        "iterations": report.iterations,
        "increments": report.increments,
        "cg_iters": report.cg_iters,
        "h0_norm": {"linear": report.h0_norm_linear,
                    "quasilinear": report.h0_norm_quasilinear,
                    "recovered": report.h0_norm_recovered},
        "log_x_norm_sq": report.log_x_norm_sq,
        "log_y_norm_sq": report.log_y_norm_sq,
        "v_norms": sol.log_norms if sol else {},
        "optimality_residual": sol.optimality_residual if sol else 0.0,
        "fi": solution_summary(sol, base_prob) if sol else {},
        "insensitivity": checks,
        "wall_seconds": time.perf_counter() - t0,
    }
    write_json(summary, os.path.join(outdir, "synthesis.json"))
    write_csv([{"iteration": i + 1, "increment": inc,
                "h0_norm": report.h0_history[i],
                "cg_iters": report.cg_iters[i]}
               for i, inc in enumerate(report.increments)],
              os.path.join(outdir, "iterations.csv"))
    if report.quasi_states is not None:
        dump_trajectory_csv(*report.quasi_states, bundle.grid,
                            bundle.time_grid, os.path.join(outdir, "trajectory.csv"))
    dump_weight_csv(bundle.tables, os.path.join(outdir, "weights.csv"))
    ladder_rows = []
    for i, chk in enumerate(checks):
        for tau, dval in zip(sorted(specs[i].tau_ladder, reverse=True),
                             chk["fd_ladder"]):
            ladder_rows.append({"direction": i, "tau": tau, "fd_derivative": dval})
    write_csv(ladder_rows, os.path.join(outdir, "tau_ladders.csv"))
    return summary


def cmd_diagnose(cfg: RunConfig, which: str, outdir: str) -> dict:
    bundle, F = build_setup(cfg)
    rng = np.random.default_rng(cfg.seed)
    out: dict = {"config_hash": cfg.hash(), "seed": cfg.seed, "suite": which}
    if which == "duality":
        gap = diagnostics.duality_battery(bundle.ops, rng, n_pairs=100)
        out.update(max_scaled_gap=gap, passed=bool(gap <= 1e-13))
    elif which == "carleman":
        def adjoint(f1, g1):
            return solve_adjoint_cascade(bundle.ops, f1, g1, bundle.theta,
                                         bundle.theta_s, bundle.masks)
        rep = empirical_carleman_check(50, bundle.tables, bundle.grid,
                                       bundle.time_grid, bundle.masks,
                                       adjoint, rng)
        finite = math.isfinite(rep["max_ratio_alpha"]) and math.isfinite(rep["max_ratio_beta"])
        out.update(**rep, passed=finite)
    elif which == "estimates":
        rep = check_elementary_estimates(bundle.tables, bundle.time_grid.dt)
        out.update(**rep, passed=bool(rep["identity_max_live"] <= 1e-12))
    elif which == "gradient":
        err = diagnostics.gradient_check(bundle.cs, bundle.ops, rng)
        out.update(relative_error=err, passed=bool(err <= 1e-6))
    elif which == "convergence":
        rep = diagnostics.convergence_orders(bundle.cs)
        out.update(**rep, passed=bool(rep["spatial_order_min"] >= 1.9
                                      and rep["temporal_order"] >= 0.9))
    else:
        raise ConfigurationError(f"unknown diagnostic suite '{which}'")
    write_json(out, os.path.join(outdir, f"diagnose_{which}.json"))
    return out


SWEEP_PARAMS = ("amplitude", "N", "M", "lambda", "s_coeff", "theta_s")


def cmd_sweep(cfg: RunConfig, parameter: str, values: list[str], outdir: str) -> list[dict]:
    if parameter not in SWEEP_PARAMS:
        raise ConfigurationError(
            f"sweep parameter must be one of {SWEEP_PARAMS}, got '{parameter}'")
    rows = []
    for val in values:
        raw = {s: dict(kv) for s, kv in cfg.raw.items()}
        if parameter == "amplitude":
            raw["source"]["amplitude"] = val
        elif parameter == "N":
            raw["grid"]["cells"] = val
        elif parameter == "M":
            raw["time"]["steps"] = val
        elif parameter == "lambda":
            raw["weights"]["lambda"] = val
        elif parameter == "s_coeff":
            raw["weights"]["s_coeff"] = val
        elif parameter == "theta_s":
            raw["functional"]["theta_s"] = val
        sub = RunConfig(raw=raw, seed=cfg.seed)
        row = {"parameter": parameter, "value": val}
        try:
            bundle, F = build_setup(sub)
            rep = synthesize(F, bundle)
            row.update(status=rep.status, iterations=rep.iterations,
                       h0_linear=rep.h0_norm_linear,
                       h0_quasilinear=rep.h0_norm_quasilinear,
                       log_x_norm_sq=rep.log_x_norm_sq,
                       log_y_norm_sq=rep.log_y_norm_sq)
        except SmallnessViolationError as exc:
            row.update(status="smallness-violation", detail=str(exc))
        except ConditioningError as exc:
            row.update(status="conditioning", detail=str(exc))
        except ConfigurationError as exc:
            row.update(status="invalid", detail=str(exc))
        rows.append(row)
    write_csv([{k: r.get(k, "") for k in
                ("parameter", "value", "status", "iterations", "h0_linear",
                 "h0_quasilinear", "log_x_norm_sq", "log_y_norm_sq", "detail")}
               for r in rows], os.path.join(outdir, f"sweep_{parameter}.csv"))
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="bscontrol",
                                 description="Insensitizing-control synthesis "
                                 "for 1D bulk-surface reaction-diffusion systems")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("synthesize", "diagnose", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key/value config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        if name == "diagnose":
            p.add_argument("--which", required=True,
                           choices=["duality", "carleman", "estimates",
                                    "gradient", "convergence"])
        if name == "sweep":
            p.add_argument("--parameter", required=True)
            p.add_argument("--values", required=True,
                           help="comma-separated list")
    args = ap.parse_args(argv)

    outdir = args.out or os.environ.get("BSCONTROL_OUT", ".")
    os.makedirs(outdir, exist_ok=True)
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "synthesize":
            summary = cmd_synthesize(cfg, outdir)
            print(f"synthesize: {summary['status']} in {summary['iterations']} "
                  f"iterations; quasilinear h(.,0) norm "
                  f"{summary['h0_norm']['quasilinear']:.3e}")
        elif args.command == "diagnose":
            out = cmd_diagnose(cfg, args.which, outdir)
            print(f"diagnose {args.which}: {'PASS' if out.get('passed') else 'FAIL'}")
            if not out.get("passed"):
                return 5
        elif args.command == "sweep":
            rows = cmd_sweep(cfg, args.parameter, args.values.split(","), outdir)
            for row in rows:
                print(f"sweep {row['parameter']}={row['value']}: {row['status']}")
        return 0
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except SmallnessViolationError as exc:
        print(f"smallness violation: {exc}", file=sys.stderr)
        return 3
    except ConditioningError as exc:
        print(f"conditioning failure: {exc}", file=sys.stderr)
        return 4
    except BSControlError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
