"""Monte Carlo IMSE evaluation, MAPE and the rSAA optimality-gap bound."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .inverse import LowerLevelConfig, qp_matrices, solve_batch
from .scenario import sample_draws

__all__ = [
    "ImseEstimate",
    "GapReport",
    "Priors",
    "imse_mc",
    "imse_on_draws",
    "squared_errors",
    "mape",
    "optimality_gap_bound",
    "oracle_estimator",
]


@dataclass(frozen=True)
class Priors:
    """The wind and emission priors that define a scenario distribution."""

    wind: object
    emission: object


@dataclass
class ImseEstimate:
    """Sample mean of squared estimation errors and its standard error.

    ``stderr**2 = sum((v - mean)**2) / (N (N - 1))``.
    """

    mean: float
    stderr: float
    n: int
    n_dropped: int = 0
    values: np.ndarray | None = None

    @classmethod
    def from_values(cls, values, n_dropped=0, keep=False):
        v = np.asarray(values, float)
        N = len(v)
        if N < 2:
            raise ValueError("need at least two valid samples for a standard error")
        mean = float(v.mean())
        se = float(np.sqrt(np.sum((v - mean) ** 2) / (N * (N - 1))))
        return cls(mean, se, N, n_dropped, v if keep else None)


@dataclass(frozen=True)
class GapReport:
    """Stochastic optimality-gap bound ``delta = upper - lower``."""

    upper: float
    lower: float
    delta: float
    alpha: float
    K: int
    N: int
    imse: float
    imse_stderr: float
    run_mean: float
    run_stderr: float


def oracle_estimator(batch, C, d):
    """Returns the true rates; useful to check the evaluation plumbing."""
    return batch.thetas


def squared_errors(batch, field, coords, params, noise, cfg, estimator=None):
    """Per-scenario ``||theta_hat - theta||^2`` at ``coords`` for a draw batch.

    The batch is solved in one go; if that fails the scenarios are retried one
    by one and failures become NaN.
    """
    obs = batch.observe_at(field, coords, params)
    C, d = qp_matrices(obs.forward, obs.observations, noise.sigma, cfg.lam1, cfg.lam2)
    solve = (lambda C_, d_: solve_batch(C_, d_, cfg)) if estimator is None else (
        lambda C_, d_: estimator(obs, C_, d_))
    try:
        with np.errstate(all="ignore"):
            theta_hat = solve(C, d)
    except (np.linalg.LinAlgError, FloatingPointError):
        if estimator is not None:
            raise
        theta_hat = np.full(obs.thetas.shape, np.nan)
        for b in range(len(d)):
            try:
                theta_hat[b] = solve_batch(C[b], d[b], cfg)
            except (np.linalg.LinAlgError, FloatingPointError):
                pass
    return np.sum((theta_hat - obs.thetas) ** 2, axis=1)


def imse_on_draws(coords, draws, field, params, noise, cfg, estimator=None, chunk=4096):
    """Per-sample squared errors at ``coords`` for pre-drawn scenarios.

    Reusing the same ``draws`` across layouts gives common random numbers.
    """
    coords = np.asarray(getattr(coords, "coords", coords), float).reshape(-1, 2)
    out = np.empty(len(draws))
    for lo in range(0, len(draws), chunk):
        sl = slice(lo, lo + chunk)
        part = type(draws)(draws.directions[sl], draws.speeds[sl], draws.thetas[sl], draws.noise[sl])
        out[sl] = squared_errors(part, field, coords, params, noise, cfg, estimator)
    return out


def imse_mc(layout, field, priors, noise, params, cfg=LowerLevelConfig(), N=1000, rng=None,
            estimator=None, keep_values=False, chunk=4096):
    """Monte Carlo estimate of the IMSE of ``layout``.

    Parameters
    ----------
    layout : SensorLayout or (n, 2) array
    priors : Priors
    cfg : LowerLevelConfig
        Regularisation and lower-level solver.
    N : int
        Number of scenarios, at least 2.
    estimator : callable, optional
        ``estimator(batch, C, d) -> theta_hat`` replacing the lower-level solve.

    Returns
    -------
    ImseEstimate
        Failed samples are dropped with a warning and counted in ``n_dropped``.
    """
    if N < 2:
        raise ValueError("N must be >= 2")
    rng = np.random.default_rng() if rng is None else rng
    coords = np.asarray(getattr(layout, "coords", layout), float).reshape(-1, 2)
    draws = sample_draws(N, len(coords), priors.wind, priors.emission, noise, rng)
    vals = imse_on_draws(coords, draws, field, params, noise, cfg, estimator, chunk)
    ok = np.isfinite(vals)
    dropped = int(N - ok.sum())
    if dropped:
        warnings.warn(f"{dropped} of {N} lower-level solves failed and were dropped", RuntimeWarning,
                      stacklevel=2)
    return ImseEstimate.from_values(vals[ok], dropped, keep_values)


def mape(estimates, truths, floor=None):
    """Mean absolute percentage error over samples and sources.

    Denominators are ``max(theta_j, floor)``; the default floor is ``1e-6``
    times the largest true rate, so zero rates do not divide by zero.
    """
    est = np.asarray(estimates, float)
    tru = np.asarray(truths, float)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    if floor is None:
        floor = 1e-6 * float(np.max(tru)) if tru.size and np.max(tru) > 0 else 1e-12
    return float(np.mean(np.abs(est - tru) / np.maximum(tru, floor)) * 100.0)


def optimality_gap_bound(sample_values, run_values, alpha=0.025):
    """Upper bound on the optimality gap from an IMSE sample and K rSAA runs.

    ``upper = mean(sample) + z_a * se(sample)`` with the normal critical value
    and ``lower = mean(runs) - t_a * se(runs)`` with the Student-t critical
    value on ``K - 1`` degrees of freedom.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    est = ImseEstimate.from_values(sample_values)
    runs = ImseEstimate.from_values(run_values)
    z = float(stats.norm.ppf(1.0 - alpha))
    t = float(stats.t.ppf(1.0 - alpha, runs.n - 1))
    upper = est.mean + z * est.stderr
    lower = runs.mean - t * runs.stderr
    return GapReport(upper, lower, upper - lower, alpha, runs.n, est.n, est.mean, est.stderr,
                     runs.mean, runs.stderr)
