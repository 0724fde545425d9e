"""Built-in experiment definitions (raw config mappings, see :mod:`config`).

The 10-source field, its prior, the wind distribution and the outer/inner
hyperparameters of the Example II presets are the published values.  The
Example I geometry, eddy diffusivity and stack heights are not published;
the values here are a reconstruction (three sources stacked directly
upwind of x = 450 on a 900 m east-west sensor line).
"""

from __future__ import annotations

EXAMPLE2_SOURCES = [[-15, 17], [-10, -5], [-9, 22], [-5, 10], [5, 18],
                    [5, 0], [8, -10], [10, 19], [15, -10], [20, 5]]
EXAMPLE2_MEAN = [8, 10, 9, 8, 10, 9, 8, 10, 9, 10]

_example1 = {
    "seed": 0,
    "domain": {"lower": [0.0, 0.0], "upper": [900.0, 0.0]},
    "sources": {"positions": [[450.0, 20.0], [450.0, 40.0], [450.0, 60.0]], "heights": 1.0},
    "emission_prior": {"mean": [80.0, 60.0, 40.0], "std": 0.0},
    "wind_prior": {"vector": [0.0, -5.0]},
    "noise": {"sigma": 1.0},
    "plume": {"eddy_diffusivity": 1.0},
    "inverse": {"lam1": 1e-4, "lam2": 1e-4, "solver": "exact"},
    "evaluation": {"N": 10_000, "alpha": 0.025},
}

_example2 = {
    "seed": 0,
    "domain": {"lower": [-25.0, -25.0], "upper": [25.0, 25.0]},
    "sources": {"positions": EXAMPLE2_SOURCES, "heights": 1.0},
    "emission_prior": {"mean": EXAMPLE2_MEAN, "std": 20.0},
    "wind_prior": {"speed": [1.0, 2.0], "direction_deg": [-135.0, -45.0]},
    "noise": {"sigma": 0.01},
    "plume": {"eddy_diffusivity": 1.0},
    "inverse": {"lam1": 0.01, "lam2": 0.01, "solver": "pd", "step": 5e-4, "iterations": 2000},
    "evaluation": {"N": 10_000, "alpha": 0.025},
}


def _with(base, **sections):
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    out.update(sections)
    return out


PRESETS = {
    "example1-1sensor": _with(
        _example1,
        design={"method": "fixed", "coords": [[440.0, 0.0]]},
        algorithm={"name": "sba", "sba": {"M": 30, "rho": 5e-3, "batch": 5},
                   "rsaa": {"K": 250, "batch": 5, "subsolver": "grid", "grid_spacing": 1.0, "eval_N": 10_000}},
    ),
    "example1-2sensors": _with(
        _example1,
        inverse={"lam1": 0.01, "lam2": 0.01, "solver": "exact"},
        design={"method": "fixed", "coords": [[400.0, 0.0], [500.0, 0.0]]},
        algorithm={"name": "sba", "sba": {"M": 200, "rho": 5e-3, "batch": 5},
                   "rsaa": {"K": 50, "batch": 5, "subsolver": "grid", "grid_spacing": 5.0, "eval_N": 10_000}},
    ),
    "example2-5sensors": _with(
        _example2,
        design={"method": "a-optimal", "n_sensors": 5},
        algorithm={"name": "sba", "sba": {"M": 300, "rho": 5e-5, "batch": 100}},
    ),
    "example2-20sources-10sensors": _with(
        _example2,
        sources={"random": {"count": 20, "seed": 2024}, "heights": 1.0},
        emission_prior={"mean": EXAMPLE2_MEAN * 2, "std": 20.0},
        inverse={"lam1": 0.01, "lam2": 0.01, "solver": "pd", "step": 5e-4, "iterations": 1},
        design={"method": "a-optimal", "n_sensors": 10},
        algorithm={"name": "sba", "sba": {"M": 3000, "rho": 1e-6, "batch": 100}},
        evaluation={"N": 2000, "alpha": 0.025, "emission_std": 2.0},
    ),
}
