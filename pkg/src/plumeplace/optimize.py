"""Outer-level sensor placement algorithms.

``sba_run`` is projected stochastic gradient descent on the sensor
coordinates with a fresh scenario batch every iteration and implicit
hypergradients of the lower-level estimator.  ``rsaa_run`` repeats a
fixed-sample (SAA) placement problem ``K`` times, solves each one with a
deterministic subsolver, averages the resulting layouts and reports a
stochastic optimality-gap bound.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .evaluate import GapReport, imse_on_draws, optimality_gap_bound
from .hypergrad import batch_hypergradient
from .inverse import LowerLevelConfig, qp_matrices, solve_exact_batch, solve_pd_batch
from .layout import SensorLayout, check_bounds, project_box
from .plume import kernel_values, kernel_values_and_grads
from .scenario import sample_draws

__all__ = [
    "SbaConfig",
    "RsaaConfig",
    "Trajectory",
    "RsaaResult",
    "NumericalFailure",
    "project_box",
    "sba_run",
    "rsaa_run",
    "gap_sweep",
    "batch_objective",
    "reevaluate_trajectory",
]

log = logging.getLogger("plumeplace")


class NumericalFailure(RuntimeError):
    """A non-finite quantity stopped the outer iteration."""


@dataclass(frozen=True)
class SbaConfig:
    """Settings for the stochastic bilevel descent.

    ``rho`` is the constant step, or ``rho_0`` of ``rho / (m + 1)`` when
    ``decay`` is set.  ``lower`` selects the inner solver; with the
    primal-dual solver its ``pd.max_iter`` is the inner iteration count ``J``.
    """

    M: int = 300
    rho: float = 5e-5
    batch: int = 100
    decay: bool = False
    lower: LowerLevelConfig = field(default_factory=LowerLevelConfig)
    warm_start: bool = True
    randomized_output: bool = False

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if not self.rho >= 0 or not np.isfinite(self.rho):
            raise ValueError("rho must be finite and >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    def step(self, m):
        return self.rho / (m + 1) if self.decay else self.rho


@dataclass
class Trajectory:
    """Per-iteration record of an SBA run, ``M + 1`` entries including the start."""

    layouts: np.ndarray  # (M+1, n, 2)
    objective: np.ndarray
    grad_norm: np.ndarray
    n_degenerate: np.ndarray
    wall_time: np.ndarray  # seconds since start
    randomized_index: int | None = None

    def __len__(self):
        return len(self.objective)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "sensor", "x", "y", "objective", "grad_norm"])
        for m, coords in enumerate(self.layouts):
            for i, (x, y) in enumerate(coords):
                w.writerow([m, i, repr(float(x)), repr(float(y)),
                            repr(float(self.objective[m])), repr(float(self.grad_norm[m]))])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _batch_terms(field, coords, draws, params, noise, lam1, lam2):
    F, G = kernel_values_and_grads(field.positions, field.heights, coords, draws.directions, draws.speeds, params)
    phi = np.einsum("bij,bj->bi", F, draws.thetas) + draws.noise
    C, d = qp_matrices(F, phi, noise.sigma, lam1, lam2)
    return F, G, phi, C, d


def _lower_solve(C, d, cfg, theta0, eta0):
    if cfg.solver == "pd":
        theta, eta, _ = solve_pd_batch(C, d, theta0, eta0, cfg.pd, cfg.lam1)
        return theta, eta
    # the previous support is a good first guess for the pivoting solver
    theta, eta = solve_exact_batch(C, d, free0=theta0 > 0 if np.any(theta0) else None)
    return theta, eta


def batch_objective(field, coords, draws, params, noise, lower):
    """Sample-average squared error and hypergradient at ``coords`` for fixed draws."""
    F, G, phi, C, d = _batch_terms(field, coords, draws, params, noise, lower.lam1, lower.lam2)
    zeros = np.zeros_like(d)
    theta, _ = _lower_solve(C, d, lower, zeros, zeros)
    hg = batch_hypergradient(C, d, F, G, phi, draws.thetas, theta, noise.sigma)
    return float(np.mean(np.sum((theta - draws.thetas) ** 2, axis=1))), hg


def _diagnose(m, coords, draws, theta, hg):
    bad = np.flatnonzero(~np.all(np.isfinite(hg.per_scenario), axis=1))
    b = int(bad[0]) if len(bad) else 0
    return (f"non-finite hypergradient at outer iteration {m}: layout={coords.tolist()}, "
            f"scenario {b}: wind direction={draws.directions[b].tolist()}, speed={float(draws.speeds[b])}, "
            f"theta_true={draws.thetas[b].tolist()}, theta_hat={theta[b].tolist()}")


def sba_run(field, priors, noise, params, init, cfg=SbaConfig(), rng=None, fixed_draws=None):
    """Projected stochastic gradient descent on the sensor layout.

    Parameters
    ----------
    field : SourceField
    priors : evaluate.Priors
    noise : NoiseModel
    params : PlumeParams
    init : SensorLayout
        Starting layout; must lie in its box.
    cfg : SbaConfig
    rng : numpy Generator
    fixed_draws : ScenarioBatch, optional
        Reuse these draws at every iteration, turning the method into
        deterministic projected gradient descent on a fixed SAA objective.

    Returns
    -------
    (SensorLayout, Trajectory)
        The last iterate, or the randomly drawn iterate when
        ``cfg.randomized_output`` is set.
    """
    if not isinstance(init, SensorLayout):
        raise TypeError("init must be a SensorLayout")
    rng = np.random.default_rng() if rng is None else rng
    lower, upper = init.lower, init.upper
    s = init.coords.copy()
    n, Np = len(s), len(field)
    B = cfg.batch if fixed_draws is None else len(fixed_draws)
    theta_ws = np.zeros((B, Np))
    eta_ws = np.zeros((B, Np))
    layouts, objs, norms, degs, times = [], [], [], [], []
    t_start = time.perf_counter()
    lw = cfg.lower
    for m in range(cfg.M + 1):
        t0 = time.perf_counter()
        draws = fixed_draws if fixed_draws is not None else sample_draws(
            B, n, priors.wind, priors.emission, noise, rng)
        F, G, phi, C, d = _batch_terms(field, s, draws, params, noise, lw.lam1, lw.lam2)
        if cfg.warm_start:
            theta, eta = _lower_solve(C, d, lw, theta_ws, eta_ws)
            theta_ws, eta_ws = theta, eta
        else:
            theta, eta = _lower_solve(C, d, lw, np.zeros_like(d), np.zeros_like(d))
        hg = batch_hypergradient(C, d, F, G, phi, draws.thetas, theta, noise.sigma)
        obj = float(np.mean(np.sum((theta - draws.thetas) ** 2, axis=1)))
        if not (np.all(np.isfinite(hg.grad)) and np.isfinite(obj)):
            raise NumericalFailure(_diagnose(m, s, draws, theta, hg))
        layouts.append(s.copy())
        objs.append(obj)
        norms.append(hg.norm)
        degs.append(hg.n_degenerate)
        times.append(time.perf_counter() - t_start)
        log.info("m=%d objective=%.6g grad_norm=%.4g wall_ms=%.1f", m, obj, hg.norm,
                 1e3 * (time.perf_counter() - t0))
        if m == cfg.M:
            break
        s = np.clip(s - cfg.step(m) * hg.as_layout, lower, upper)
    traj = Trajectory(np.array(layouts), np.array(objs), np.array(norms), np.array(degs), np.array(times))
    out = s
    if cfg.randomized_output:
        w = np.array([cfg.step(m) for m in range(cfg.M)])
        if w.sum() > 0:
            k = int(rng.choice(cfg.M, p=w / w.sum()))
            traj.randomized_index = k
            out = traj.layouts[k]
    return SensorLayout(out, lower, upper), traj


def reevaluate_trajectory(traj, field, priors, noise, params, lower, N, rng, every=1):
    """Large-sample objective along a trajectory with common random numbers.

    Returns ``(iterations, values)``.
    """
    n = traj.layouts.shape[1]
    draws = sample_draws(N, n, priors.wind, priors.emission, noise, rng)
    its = np.arange(0, len(traj), every)
    if its[-1] != len(traj) - 1:
        its = np.append(its, len(traj) - 1)
    vals = np.array([imse_on_draws(traj.layouts[m], draws, field, params, noise, lower).mean() for m in its])
    return its, vals


@dataclass(frozen=True)
class RsaaConfig:
    """Settings for repeated SAA.

    ``subsolver`` is ``"grid"`` (exhaustive search over at most two free
    coordinates at ``grid_spacing``) or ``"sba"`` (multistart deterministic
    descent on the fixed sample using ``sba``).
    """

    K: int = 250
    batch: int = 5
    subsolver: str = "grid"
    grid_spacing: float = 1.0
    n_starts: int = 4
    sba: SbaConfig = field(default_factory=SbaConfig)
    lower: LowerLevelConfig = field(default_factory=LowerLevelConfig)
    alpha: float = 0.025
    eval_N: int = 10_000
    combine: str = "mean"

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.subsolver not in ("grid", "sba"):
            raise ValueError(f"unknown rSAA subsolver {self.subsolver!r}")
        if self.combine != "mean":
            raise ValueError("only the mean combine rule is implemented")
        if not self.grid_spacing > 0:
            raise ValueError("grid_spacing must be > 0")
        if self.eval_N < 2:
            raise ValueError("eval_N must be >= 2")


@dataclass
class RsaaResult:
    layout: SensorLayout
    run_layouts: np.ndarray  # (K_eff, n, 2)
    run_values: np.ndarray  # (K_eff,)
    gap: GapReport
    excluded: list
    eval_values: np.ndarray

    @property
    def k_effective(self):
        return len(self.run_values)


def layout_grid(lower, upper, n, spacing, template=None):
    """Candidate layouts varying every free coordinate (at most two) on a grid.

    A coordinate is free when its bounds differ.  ``template`` fixes the
    non-free coordinates (defaults to the lower bound).
    """
    lower, upper = check_bounds(lower, upper)
    base = np.tile(lower, (n, 1)) if template is None else np.asarray(template, float).copy()
    free = [(i, a) for i in range(n) for a in range(2) if upper[a] > lower[a]]
    if len(free) > 2:
        raise ValueError(f"grid subsolver supports at most 2 free coordinates, got {len(free)}")
    axes = []
    for _, a in free:
        pts = np.arange(lower[a], upper[a] + 0.5 * spacing, spacing)
        axes.append(np.clip(pts, lower[a], upper[a]))
    cands = np.repeat(base[None], int(np.prod([len(x) for x in axes])) if axes else 1, axis=0)
    for combo_idx, combo in enumerate(itertools.product(*axes)):
        for (i, a), v in zip(free, combo):
            cands[combo_idx, i, a] = v
    return cands


def saa_values(cands, draws, field, params, noise, lower, chunk=256):
    """Fixed-sample objective at each candidate layout ``cands (G, n, 2)``."""
    out = np.empty(len(cands))
    B = len(draws)
    for lo in range(0, len(cands), chunk):
        c = cands[lo:lo + chunk]
        sensors = np.broadcast_to(c[:, None], (len(c), B) + c.shape[1:])
        dirs = np.broadcast_to(draws.directions, (len(c), B, 2))
        speeds = np.broadcast_to(draws.speeds, (len(c), B))
        F = kernel_values(field.positions, field.heights, sensors, dirs, speeds, params)
        phi = np.einsum("gbij,bj->gbi", F, draws.thetas) + draws.noise
        C, d = qp_matrices(F, phi, noise.sigma, lower.lam1, lower.lam2)
        theta, _ = solve_exact_batch(C, d)
        out[lo:lo + chunk] = np.mean(np.sum((theta - draws.thetas) ** 2, axis=-1), axis=1)
    return out


def _grid_subsolve(draws, field, params, noise, bounds, n, cfg, template):
    cands = layout_grid(*bounds, n, cfg.grid_spacing, template)
    vals = saa_values(cands, draws, field, params, noise, cfg.lower)
    k = int(np.argmin(vals))
    return cands[k], float(vals[k])


def _sba_subsolve(draws, field, priors, params, noise, bounds, n, cfg, rng, template):
    best = (None, np.inf)
    for k, sub in enumerate(rng.spawn(cfg.n_starts)):
        lo, hi = bounds
        x0 = template if (k == 0 and template is not None) else lo + (hi - lo) * sub.random((n, 2))
        init = SensorLayout(x0, lo, hi)
        sba_cfg = SbaConfig(cfg.sba.M, cfg.sba.rho, len(draws), cfg.sba.decay, cfg.lower, False)
        lay, _ = sba_run(field, priors, noise, params, init, sba_cfg, sub, fixed_draws=draws)
        val, _ = batch_objective(field, lay.coords, draws, params, noise, cfg.lower)
        if val < best[1]:
            best = (lay.coords, val)
    return best


def rsaa_run(field, priors, noise, params, bounds, n, cfg=RsaaConfig(), rng=None, template=None, threads=1):
    """Repeated SAA: ``K`` fixed-sample placements averaged into one layout.

    Each run gets its own random substream, so results do not depend on
    ``threads``.  Runs whose subsolver raises are excluded with a warning.

    Returns
    -------
    RsaaResult
        Mean layout, per-run layouts and values, and the gap report evaluated
        with ``cfg.eval_N`` fresh scenarios at the mean layout.
    """
    rng = np.random.default_rng() if rng is None else rng
    lower, upper = check_bounds(*bounds)
    streams = rng.spawn(cfg.K + 1)

    def one_run(k):
        sub = streams[k]
        draws = sample_draws(cfg.batch, n, priors.wind, priors.emission, noise, sub)
        if cfg.subsolver == "grid":
            return _grid_subsolve(draws, field, params, noise, (lower, upper), n, cfg, template)
        return _sba_subsolve(draws, field, priors, params, noise, (lower, upper), n, cfg, sub, template)

    def guarded(k):
        try:
            return one_run(k)
        except (np.linalg.LinAlgError, FloatingPointError, NumericalFailure) as exc:
            return exc

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(guarded, range(cfg.K)))
    else:
        results = [guarded(k) for k in range(cfg.K)]
    excluded = [k for k, r in enumerate(results) if isinstance(r, Exception)]
    for k in excluded:
        warnings.warn(f"rSAA run {k} failed and was excluded: {results[k]}", RuntimeWarning, stacklevel=2)
    ok = [r for r in results if not isinstance(r, Exception)]
    if len(ok) < 2:
        raise NumericalFailure(f"only {len(ok)} rSAA runs completed; need at least 2")
    run_layouts = np.array([r[0] for r in ok])
    run_values = np.array([r[1] for r in ok])
    s_hat = project_box(run_layouts.mean(axis=0), lower, upper)
    eval_draws = sample_draws(cfg.eval_N, n, priors.wind, priors.emission, noise, streams[-1])
    vals = imse_on_draws(s_hat, eval_draws, field, params, noise, cfg.lower)
    gap = optimality_gap_bound(vals, run_values, cfg.alpha)
    return RsaaResult(SensorLayout(s_hat, lower, upper), run_layouts, run_values, gap, excluded, vals)


def gap_sweep(result, field, priors, noise, params, lower_cfg, N, alpha, rng, k_min=2):
    """Gap bound after the first ``k`` runs for ``k = k_min..K`` with common draws.

    For each ``k`` the layout is the running mean of the first ``k`` run
    layouts, evaluated on one shared set of ``N`` scenarios.  Returns
    ``(ks, deltas)``.
    """
    n = result.run_layouts.shape[1]
    draws = sample_draws(N, n, priors.wind, priors.emission, noise, rng)
    lo, hi = result.layout.lower, result.layout.upper
    cum = np.cumsum(result.run_layouts, axis=0)
    ks = np.arange(k_min, len(result.run_values) + 1)
    cache = {}
    deltas = []
    for k in ks:
        s = project_box(cum[k - 1] / k, lo, hi)
        key = s.tobytes()
        if key not in cache:
            cache[key] = imse_on_draws(s, draws, field, params, noise, lower_cfg)
        deltas.append(optimality_gap_bound(cache[key], result.run_values[:k], alpha).delta)
    return ks, np.array(deltas)
