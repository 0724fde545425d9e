"""Command-line front end: ``plumeplace <command> --config FILE``.

Exit codes: 0 on success, 2 for configuration or input errors, 3 for
numerical failures (non-finite iterates, divergence, singular systems).
"""

from __future__ import annotations

import argparse
import dataclasses
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .config import ConfigError, load_config, parse_config
from .design import (DESIGN_METHODS, a_optimal_design, a_optimal_risk, concentration_mass, kmeans_design,
                     random_design)
from .evaluate import ImseEstimate, imse_on_draws, mape, oracle_estimator
from .inverse import qp_matrices, solve_batch
from .layout import LayoutFormatError, SensorLayout, read_layout_csv, write_layout_csv
from .optimize import NumericalFailure, gap_sweep, reevaluate_trajectory, rsaa_run, sba_run
from .scenario import sample_draws, sample_winds

log = logging.getLogger("plumeplace")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _streams(seed):
    """Independent generators for design, algorithm and evaluation."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def _write_summary(path, items):
    with open(path, "w") as fh:
        for k, v in items:
            fh.write(f"{k}: {v}\n")


def _fmt(x):
    return repr(float(x))


def make_design(cfg, method, rng):
    """Initial layout from the configured (or overridden) method."""
    n, bounds = cfg.n_sensors, cfg.bounds
    if method == "fixed":
        return SensorLayout(cfg.init_coords, *bounds)
    if method == "random":
        return random_design(bounds, n, rng)
    if method == "kmeans":
        return kmeans_design(cfg.field, cfg.priors.wind, bounds, n, cfg.design, rng, cfg.params,
                             cfg.priors.emission.mean)
    return a_optimal_design(cfg.field, cfg.gaussian_prior, cfg.priors.wind, bounds, n, cfg.design, rng,
                            cfg.noise, cfg.params)


def _risk(cfg, layout, seed):
    winds = sample_winds(cfg.priors.wind, np.random.default_rng(seed), cfg.design.n_wind_samples)
    return a_optimal_risk(layout, cfg.field, cfg.gaussian_prior, winds, cfg.noise, cfg.params)


def _scoring(cfg):
    """Lower-level settings for scoring layouts: the exact minimiser, never a truncated iteration."""
    return dataclasses.replace(cfg.lower, solver="exact")


def _echo(cfg):
    return json.dumps(cfg.raw, sort_keys=True, separators=(",", ":"))


def cmd_init_design(cfg, method, out):
    rng_design, _, _ = _streams(cfg.seed)
    layout = make_design(cfg, method, rng_design)
    write_layout_csv(os.path.join(out, "layout_init.csv"), layout.coords)
    risk = _risk(cfg, layout, cfg.seed)
    print(f"a_optimal_risk: {risk:.10g}")
    _write_summary(os.path.join(out, "init_design_summary.txt"), [
        ("command", "init-design"), ("method", method), ("seed", cfg.seed), ("n_sensors", layout.n_sensors),
        ("a_optimal_risk", _fmt(risk)), ("config", _echo(cfg))])
    return layout


def _initial_layout(cfg, rng):
    if cfg.init_coords is not None:
        return SensorLayout(cfg.init_coords, *cfg.bounds)
    return make_design(cfg, cfg.design_method, rng)


def cmd_optimize(cfg, out, threads):
    rng_design, rng_alg, rng_eval = _streams(cfg.seed)
    init = _initial_layout(cfg, rng_design)
    write_layout_csv(os.path.join(out, "layout_init.csv"), init.coords)
    items = [("command", "optimize"), ("algorithm", cfg.algorithm), ("seed", cfg.seed),
             ("n_sensors", init.n_sensors)]
    if cfg.algorithm == "sba":
        layout, traj = sba_run(cfg.field, cfg.priors, cfg.noise, cfg.params, init, cfg.sba, rng_alg)
        traj.write_csv(os.path.join(out, "trajectory.csv"))
        items += [("iterations", cfg.sba.M), ("objective_initial", _fmt(traj.objective[0])),
                  ("objective_final", _fmt(traj.objective[-1])),
                  ("degenerate_scenarios", int(traj.n_degenerate.sum()))]
        if traj.randomized_index is not None:
            items.append(("randomized_index", traj.randomized_index))
        if cfg.reevaluate_every > 0:
            its, vals = reevaluate_trajectory(traj, cfg.field, cfg.priors, cfg.noise, cfg.params, _scoring(cfg),
                                              cfg.reevaluate_N, rng_eval, cfg.reevaluate_every)
            with open(os.path.join(out, "reevaluated.csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["iter", "imse"])
                w.writerows([int(m), _fmt(v)] for m, v in zip(its, vals))
            items += [("reevaluated_initial", _fmt(vals[0])), ("reevaluated_final", _fmt(vals[-1]))]
    else:
        res = rsaa_run(cfg.field, cfg.priors, cfg.noise, cfg.params, cfg.bounds, init.n_sensors, cfg.rsaa,
                       rng_alg, template=init.coords, threads=threads)
        layout = res.layout
        with open(os.path.join(out, "rsaa_runs.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "sensor", "x", "y", "value"])
            for k, (coords, v) in enumerate(zip(res.run_layouts, res.run_values)):
                for i, (x, y) in enumerate(coords):
                    w.writerow([k, i, _fmt(x), _fmt(y), _fmt(v)])
        g = res.gap
        items += [("K_effective", res.k_effective), ("excluded_runs", len(res.excluded)),
                  ("gap_upper", _fmt(g.upper)), ("gap_lower", _fmt(g.lower)), ("gap_delta", _fmt(g.delta)),
                  ("alpha", g.alpha), ("imse", _fmt(g.imse)), ("imse_stderr", _fmt(g.imse_stderr))]
        if cfg.rsaa_sweep:
            ks, deltas = gap_sweep(res, cfg.field, cfg.priors, cfg.noise, cfg.params, cfg.lower,
                                   cfg.rsaa_sweep_N, cfg.rsaa.alpha, rng_eval)
            with open(os.path.join(out, "gap_sweep.csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["K", "delta"])
                w.writerows([int(k), _fmt(v)] for k, v in zip(ks, deltas))
    write_layout_csv(os.path.join(out, "layout_final.csv"), layout.coords)
    items += [("final_layout", json.dumps(layout.coords.tolist())), ("config", _echo(cfg))]
    _write_summary(os.path.join(out, "optimize_summary.txt"), items)
    return layout


def evaluate_layout(cfg, coords, rng):
    """IMSE estimate and MAPE of a layout on ``cfg.eval_N`` fresh scenarios."""
    priors = cfg.eval_priors or cfg.priors
    draws = sample_draws(cfg.eval_N, len(coords), priors.wind, priors.emission, cfg.noise, rng)
    obs = draws.observe_at(cfg.field, coords, cfg.params)
    if cfg.estimator == "oracle":
        theta_hat = obs.thetas.copy()
    else:
        C, d = qp_matrices(obs.forward, obs.observations, cfg.noise.sigma, cfg.lower.lam1, cfg.lower.lam2)
        theta_hat = solve_batch(C, d, _scoring(cfg))
    sq = np.sum((theta_hat - obs.thetas) ** 2, axis=1)
    return ImseEstimate.from_values(sq, keep=True), mape(theta_hat, obs.thetas)


def cmd_evaluate(cfg, layout_path, out):
    _, _, rng_eval = _streams(cfg.seed)
    coords = read_layout_csv(layout_path)
    SensorLayout(coords, *cfg.bounds)
    est, mp = evaluate_layout(cfg, coords, rng_eval)
    print(f"imse: {est.mean:.10g}\nimse_stderr: {est.stderr:.6g}\nmape_percent: {mp:.6g}")
    if cfg.per_sample_csv:
        with open(os.path.join(out, "evaluate_samples.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "squared_error"])
            w.writerows([i, _fmt(v)] for i, v in enumerate(est.values))
    _write_summary(os.path.join(out, "evaluate_summary.txt"), [
        ("command", "evaluate"), ("layout", layout_path), ("seed", cfg.seed), ("estimator", cfg.estimator),
        ("N", est.n), ("imse", _fmt(est.mean)), ("imse_stderr", _fmt(est.stderr)),
        ("mape_percent", _fmt(mp)), ("config", _echo(cfg))])
    return est, mp


def cmd_sample_field(cfg, out):
    _, _, rng_eval = _streams(cfg.seed)
    xs, ys, vals = concentration_mass(cfg.field, cfg.priors.emission.expected_rates(), cfg.priors.wind,
                                      cfg.bounds, cfg.params, cfg.sample_grid, cfg.sample_winds, rng_eval)
    path = os.path.join(out, "field.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "concentration"])
        for iy, y in enumerate(ys):
            for ix, x in enumerate(xs):
                w.writerow([_fmt(x), _fmt(y), _fmt(vals[iy, ix])])
    return xs, ys, vals


def build_parser():
    p = argparse.ArgumentParser(prog="plumeplace", description="Optimal sensor placement for emission-source inversion.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("init-design", "optimize", "evaluate", "sample-field"):
        sp = sub.add_parser(name)
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="YAML run configuration")
        src.add_argument("--preset", help="built-in configuration name")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", help="output directory (default: config output_dir)")
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker cap")
        sp.add_argument("--quiet", action="store_true", help="no per-iteration log lines")
        if name == "init-design":
            sp.add_argument("--method", choices=DESIGN_METHODS, help="overrides design.method")
        if name == "evaluate":
            sp.add_argument("--layout", required=True, help="layout CSV (sensor,x,y)")
    return p


def _load(args):
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = parse_config({"preset": args.preset})
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        cfg.seed = args.seed
    return cfg


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(message)s")
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        cfg = _load(args)
        out = args.out or cfg.output_dir
        os.makedirs(out, exist_ok=True)
        t0 = time.perf_counter()
        if args.command == "init-design":
            method = args.method or cfg.design_method
            if method == "fixed":
                raise ConfigError(f"init-design needs a generating method: {', '.join(DESIGN_METHODS)}")
            cmd_init_design(cfg, method, out)
        elif args.command == "optimize":
            cmd_optimize(cfg, out, args.threads)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.layout, out)
        else:
            cmd_sample_field(cfg, out)
        log.info("done in %.2f s", time.perf_counter() - t0)
    except (NumericalFailure, ArithmeticError, np.linalg.LinAlgError) as exc:
        # LinAlgError subclasses ValueError, so this must come first
        print(f"plumeplace: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, LayoutFormatError, OSError, ValueError) as exc:
        print(f"plumeplace: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
