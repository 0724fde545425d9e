"""Run configuration: strict YAML parsing into validated objects.

A config file is a YAML mapping.  Every section and key is optional except
where noted; unknown keys are rejected with their dotted path.  A file may
name a ``preset`` and override any of its keys.

.. code-block:: yaml

    preset: example2-5sensors        # optional base
    seed: 0
    output_dir: out
    domain: {lower: [-25, -25], upper: [25, 25]}
    sources:
      positions: [[-15, 17], [-10, -5]]   # or random: {count: 20, seed: 7}
      heights: 1.0                        # scalar or one per source
    emission_prior: {mean: [8, 10], std: 20, mode: truncated-normal, p_leak: 1.0}
    wind_prior: {speed: [1, 2], direction_deg: [-135, -45]}   # or vector: [0, -5]
    noise: {sigma: 0.01}
    plume: {eddy_diffusivity: 1.0, use_wind_speed_factor: true}
    inverse: {lam1: 0.01, lam2: 0.01, solver: pd, step: 5.0e-4, iterations: 2000}
    design: {method: a-optimal, n_sensors: 5}      # or coords / layout_file
    algorithm:
      name: sba
      sba: {M: 300, rho: 5.0e-5, batch: 100}
      rsaa: {K: 250, batch: 5, subsolver: grid, grid_spacing: 1.0}
    evaluation: {N: 10000, alpha: 0.025, estimator: solver, emission_std: 2.0}

``evaluation.emission_std`` optionally replaces the prior std when scoring
a layout, so a design built under one emission uncertainty can be
validated under another.

Directions are degrees of the vector the wind blows toward, measured
counter-clockwise from +x, so ``[-135, -45]`` is any wind from between
north-west and north-east.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from .design import DESIGN_METHODS, DesignConfig, LinearGaussianPrior
from .evaluate import Priors
from .inverse import LowerLevelConfig, PdSolverConfig
from .layout import check_bounds, read_layout_csv
from .optimize import RsaaConfig, SbaConfig
from .plume import NoiseModel, PlumeParams, SourceField
from .scenario import EmissionPrior, WindPrior

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "merge"]


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


SCHEMA = {
    "preset": str,
    "seed": int,
    "output_dir": str,
    "domain": {"lower": list, "upper": list},
    "sources": {"positions": list, "heights": (float, list), "random": {"count": int, "seed": int}},
    "emission_prior": {"mean": (float, list), "std": (float, list), "mode": str, "p_leak": float},
    "wind_prior": {"speed": list, "direction_deg": list, "vector": list},
    "noise": {"sigma": float},
    "plume": {"eddy_diffusivity": float, "use_wind_speed_factor": bool, "downwind_eps": float},
    "inverse": {"lam1": float, "lam2": float, "solver": str, "step": float, "iterations": int,
                "gamma": float, "schedule": str},
    "design": {"method": str, "n_sensors": int, "coords": list, "layout_file": str, "n_starts": int,
               "n_wind_samples": int, "max_iter": int, "grid_size": int, "n_mass_points": int},
    "algorithm": {
        "name": str,
        "sba": {"M": int, "rho": float, "batch": int, "decay": bool, "warm_start": bool,
                "randomized_output": bool, "reevaluate_every": int, "reevaluate_N": int},
        "rsaa": {"K": int, "batch": int, "subsolver": str, "grid_spacing": float, "n_starts": int,
                 "alpha": float, "eval_N": int, "sweep": bool, "sweep_N": int},
    },
    "evaluation": {"N": int, "alpha": float, "estimator": str, "per_sample_csv": bool,
                   "emission_std": (float, list)},
    "sample_field": {"grid_size": int, "n_winds": int},
}


def _check(node, schema, path):
    if not isinstance(node, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(node).__name__}")
    for key, val in node.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in schema:
            raise ConfigError(f"unknown key {where!r}")
        spec = schema[key]
        if isinstance(spec, dict):
            _check(val, spec, where)
            continue
        kinds = spec if isinstance(spec, tuple) else (spec,)
        ok = False
        for kind in kinds:
            if kind is float and isinstance(val, (int, float)) and not isinstance(val, bool):
                ok = True
            elif kind is int and isinstance(val, int) and not isinstance(val, bool):
                ok = True
            elif kind not in (int, float) and isinstance(val, kind):
                ok = True
        if not ok:
            names = " or ".join(k.__name__ for k in kinds)
            raise ConfigError(f"{where}: expected {names}, got {type(val).__name__}")


def merge(base, override):
    """Recursive dict merge; ``override`` wins on leaves."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    """Fully validated run definition."""

    seed: int
    output_dir: str
    bounds: tuple
    field: SourceField
    priors: Priors
    noise: NoiseModel
    params: PlumeParams
    lower: LowerLevelConfig
    design_method: str
    n_sensors: int
    design: DesignConfig
    init_coords: np.ndarray | None
    algorithm: str
    sba: SbaConfig
    rsaa: RsaaConfig
    eval_N: int
    alpha: float
    estimator: str
    per_sample_csv: bool = False
    reevaluate_every: int = 0
    reevaluate_N: int = 2000
    rsaa_sweep: bool = False
    rsaa_sweep_N: int = 10_000
    sample_grid: int = 100
    sample_winds: int = 64
    eval_priors: Priors | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def gaussian_prior(self):
        return LinearGaussianPrior(self.priors.emission.mean, np.maximum(self.priors.emission.std, 1e-12))


def _vec(x, n, what):
    a = np.asarray(x, float)
    if a.shape != (n,) or not np.all(np.isfinite(a)):
        raise ConfigError(f"{what}: expected {n} finite numbers")
    return a


def _build(raw):
    try:
        return _build_unchecked(raw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def _build_unchecked(raw):
    dom = raw.get("domain")
    if dom is None or "lower" not in dom or "upper" not in dom:
        raise ConfigError("domain.lower and domain.upper are required")
    lower, upper = check_bounds(_vec(dom["lower"], 2, "domain.lower"), _vec(dom["upper"], 2, "domain.upper"))

    src = raw.get("sources", {})
    if ("positions" in src) == ("random" in src):
        raise ConfigError("sources: give exactly one of 'positions' or 'random'")
    if "positions" in src:
        pos = np.asarray(src["positions"], float)
        if pos.ndim != 2 or pos.shape[1] != 2 or len(pos) == 0:
            raise ConfigError("sources.positions: expected a list of [x, y] pairs")
    else:
        r = src["random"]
        if r.get("count", 0) < 1:
            raise ConfigError("sources.random.count must be >= 1")
        g = np.random.default_rng(r.get("seed", 0))
        pos = lower + (upper - lower) * g.random((r["count"], 2))
    heights = src.get("heights", 0.0)
    field_ = SourceField(pos, heights)
    Np = len(field_)

    ep = raw.get("emission_prior", {})
    mean = np.broadcast_to(np.asarray(ep.get("mean", 1.0), float), (Np,)) if np.ndim(ep.get("mean", 1.0)) == 0 \
        else _vec(ep["mean"], Np, "emission_prior.mean")
    std = ep.get("std", 1.0)
    std = np.full(Np, float(std)) if np.ndim(std) == 0 else _vec(std, Np, "emission_prior.std")
    emission = EmissionPrior(mean, std, ep.get("mode", "truncated-normal"), float(ep.get("p_leak", 1.0)))

    wp = raw.get("wind_prior", {})
    if "vector" in wp:
        if set(wp) - {"vector"}:
            raise ConfigError("wind_prior: 'vector' excludes 'speed' and 'direction_deg'")
        beta = _vec(wp["vector"], 2, "wind_prior.vector")
        if np.linalg.norm(beta) <= 0:
            raise ConfigError("wind_prior.vector must be nonzero")
        wind = WindPrior.fixed(beta)
    else:
        sp = _vec(wp.get("speed", [1.0, 1.0]), 2, "wind_prior.speed")
        ang = _vec(wp.get("direction_deg", [-90.0, -90.0]), 2, "wind_prior.direction_deg")
        wind = WindPrior(sp[0], sp[1], math.radians(ang[0]), math.radians(ang[1]))

    noise = NoiseModel(float(raw.get("noise", {}).get("sigma", 1.0)))

    pl = raw.get("plume", {})
    K = float(pl.get("eddy_diffusivity", 1.0))
    params = PlumeParams.for_domain(K, lower, upper, bool(pl.get("use_wind_speed_factor", True)))
    if "downwind_eps" in pl:
        params = PlumeParams(K, params.use_wind_speed_factor, float(pl["downwind_eps"]))

    inv = raw.get("inverse", {})
    pd = PdSolverConfig(float(inv.get("step", 5e-4)), int(inv.get("iterations", 2000)),
                        inv.get("gamma"), None, inv.get("schedule", "constant"))
    lower_cfg = LowerLevelConfig(float(inv.get("lam1", 0.01)), float(inv.get("lam2", 0.01)),
                                 inv.get("solver", "auto"), pd)

    de = raw.get("design", {})
    method = de.get("method", "random")
    if method not in DESIGN_METHODS + ("fixed",):
        raise ConfigError(f"design.method: {method!r} is not one of {', '.join(DESIGN_METHODS + ('fixed',))}")
    init = None
    if "coords" in de and "layout_file" in de:
        raise ConfigError("design: give at most one of 'coords' or 'layout_file'")
    if "coords" in de:
        init = np.asarray(de["coords"], float)
        if init.ndim != 2 or init.shape[1] != 2:
            raise ConfigError("design.coords: expected a list of [x, y] pairs")
    elif "layout_file" in de:
        init = read_layout_csv(de["layout_file"])
    if method == "fixed" and init is None:
        raise ConfigError("design.method 'fixed' needs design.coords or design.layout_file")
    n = int(de.get("n_sensors", len(init) if init is not None else 1))
    if n < 1:
        raise ConfigError("design.n_sensors must be >= 1")
    if init is not None:
        if len(init) != n:
            raise ConfigError(f"design: {len(init)} coordinates given for n_sensors={n}")
        slack = 1e-9 * max(1.0, float(np.abs(upper - lower).max()))
        if np.any(init < lower - slack) or np.any(init > upper + slack):
            raise ConfigError("design: initial layout lies outside the domain")
    dcfg = DesignConfig(n_starts=int(de.get("n_starts", 16)), n_wind_samples=int(de.get("n_wind_samples", 32)),
                        max_iter=int(de.get("max_iter", 200)), grid_size=int(de.get("grid_size", 100)),
                        n_mass_points=int(de.get("n_mass_points", 10_000)))

    alg = raw.get("algorithm", {})
    name = alg.get("name", "sba")
    if name not in ("sba", "rsaa"):
        raise ConfigError(f"algorithm.name: {name!r} is not one of sba, rsaa")
    sb = alg.get("sba", {})
    sba = SbaConfig(int(sb.get("M", 300)), float(sb.get("rho", 5e-5)), int(sb.get("batch", 100)),
                    bool(sb.get("decay", False)), lower_cfg, bool(sb.get("warm_start", True)),
                    bool(sb.get("randomized_output", False)))
    rs = alg.get("rsaa", {})
    rsaa = RsaaConfig(int(rs.get("K", 250)), int(rs.get("batch", 5)), rs.get("subsolver", "grid"),
                      float(rs.get("grid_spacing", 1.0)), int(rs.get("n_starts", 4)), sba, lower_cfg,
                      float(rs.get("alpha", 0.025)), int(rs.get("eval_N", 10_000)))

    ev = raw.get("evaluation", {})
    eval_N = int(ev.get("N", 10_000))
    alpha = float(ev.get("alpha", 0.025))
    if eval_N < 2:
        raise ConfigError("evaluation.N must be >= 2")
    if not 0 < alpha < 1:
        raise ConfigError("evaluation.alpha must lie in (0, 1)")
    estimator = ev.get("estimator", "solver")
    if estimator not in ("solver", "oracle"):
        raise ConfigError(f"evaluation.estimator: {estimator!r} is not one of solver, oracle")
    eval_priors = None
    if "emission_std" in ev:
        es = ev["emission_std"]
        es = np.full(Np, float(es)) if np.ndim(es) == 0 else _vec(es, Np, "evaluation.emission_std")
        eval_priors = Priors(wind, EmissionPrior(mean, es, emission.mode, emission.p_leak))
    sf = raw.get("sample_field", {})
    seed = int(raw.get("seed", 0))
    if seed < 0:
        raise ConfigError("seed must be >= 0")
    return RunConfig(
        seed=seed, output_dir=raw.get("output_dir", "out"), bounds=(lower, upper), field=field_,
        priors=Priors(wind, emission), noise=noise, params=params, lower=lower_cfg, design_method=method,
        n_sensors=n, design=dcfg, init_coords=init, algorithm=name, sba=sba, rsaa=rsaa, eval_N=eval_N,
        alpha=alpha, estimator=estimator, per_sample_csv=bool(ev.get("per_sample_csv", False)),
        reevaluate_every=int(sb.get("reevaluate_every", 0)), reevaluate_N=int(sb.get("reevaluate_N", 2000)),
        rsaa_sweep=bool(rs.get("sweep", False)), rsaa_sweep_N=int(rs.get("sweep_N", 10_000)),
        sample_grid=int(sf.get("grid_size", 100)), sample_winds=int(sf.get("n_winds", 64)),
        eval_priors=eval_priors, raw=raw,
    )


def parse_config(raw, presets=None):
    """Validate a raw mapping (after applying its ``preset``) into a RunConfig."""
    if raw is None:
        raw = {}
    _check(raw, SCHEMA, "")
    if "preset" in raw:
        from .presets import PRESETS
        presets = PRESETS if presets is None else presets
        name = raw["preset"]
        if name not in presets:
            raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(presets))}")
        raw = merge(presets[name], {k: v for k, v in raw.items() if k != "preset"})
        _check(raw, SCHEMA, "")
    return _build(raw)


def load_config(path):
    """Read and validate a YAML config file."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(raw)
