"""Initial sensor layouts.

Three initialisers are provided: i.i.d. uniform placement, k-means centroids
of the wind-averaged concentration mass, and the wind-averaged A-optimal
design, which minimises the closed-form Bayes risk of the linear-Gaussian
surrogate of the inverse problem.  The last one is an IMSE criterion in
disguise: for a Gaussian prior and noise the Bayes risk of the posterior mean
equals the trace of the posterior covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .layout import SensorLayout, check_bounds, project_box
from .plume import WindSample, kernel_values, kernel_values_and_grads
from .scenario import sample_winds

__all__ = [
    "LinearGaussianPrior",
    "DesignConfig",
    "a_optimal_risk",
    "a_optimal_risk_and_grad",
    "a_optimal_design",
    "random_design",
    "kmeans_design",
    "concentration_mass",
    "lloyd_kmeans",
    "DESIGN_METHODS",
]

DESIGN_METHODS = ("random", "kmeans", "a-optimal")


@dataclass(frozen=True)
class LinearGaussianPrior:
    """Gaussian prior ``N(mean, diag(std^2))`` on the emission rates.

    ``L`` is the prior precision factor (``L'L = Gamma_pr^-1``).
    """

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, float))
        std = np.broadcast_to(np.asarray(self.std, float), mean.shape).copy()
        if np.any(std <= 0) or not np.all(np.isfinite(std)):
            raise ValueError("prior std must be finite and > 0")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def from_emission_prior(cls, prior):
        return cls(prior.mean, prior.std)

    @property
    def size(self):
        return len(self.mean)

    @property
    def covariance(self):
        return np.diag(self.std**2)

    @property
    def precision(self):
        return np.diag(self.std**-2.0)

    @property
    def L(self):
        return np.diag(1.0 / self.std)


def noise_factor(noise, n):
    """``U`` with ``U'U = Gamma_eps^-1`` for isotropic noise."""
    return np.eye(n) / noise.sigma


@dataclass(frozen=True)
class DesignConfig:
    """Knobs for the k-means and A-optimal initialisers."""

    n_starts: int = 16
    n_wind_samples: int = 32
    max_iter: int = 200
    grad_tol: float = 1e-10
    n_candidates: int = 256
    grid_size: int = 100
    n_mass_points: int = 10_000
    kmeans_restarts: int = 4
    kmeans_max_iter: int = 300

    def __post_init__(self):
        for name in ("n_starts", "n_wind_samples", "grid_size", "n_mass_points",
                     "kmeans_restarts", "kmeans_max_iter", "n_candidates"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")


def _wind_arrays(wind_samples):
    """Accept a WindSample, a list of them, or ``(directions, speeds)`` arrays."""
    if isinstance(wind_samples, WindSample):
        wind_samples = [wind_samples]
    if isinstance(wind_samples, tuple) and len(wind_samples) == 2 and not isinstance(wind_samples[0], WindSample):
        dirs = np.asarray(wind_samples[0], float).reshape(-1, 2)
        speeds = np.asarray(wind_samples[1], float).reshape(-1)
    else:
        dirs = np.array([w.direction for w in wind_samples]).reshape(-1, 2)
        speeds = np.array([w.speed for w in wind_samples], float)
    if len(speeds) < 1:
        raise ValueError("need at least one wind sample")
    return dirs, speeds


def _posterior(F, prior, sigma):
    """Batched posterior covariance ``(F'F / sigma^2 + Gamma_pr^-1)^-1``."""
    H = np.einsum("wip,wiq->wpq", F, F) / sigma**2 + prior.precision
    eye = np.eye(prior.size)
    return np.array([cho_solve(cho_factor(h), eye) for h in H])


def _coords(layout):
    return np.asarray(getattr(layout, "coords", layout), float).reshape(-1, 2)


def a_optimal_risk(layout, field, prior, wind_samples, noise, params):
    """Wind-averaged Bayes risk ``||G L'||_F^2 + ||G F' U'||_F^2``.

    ``G`` is the posterior covariance for a given wind.  Averaged over the
    supplied wind samples.
    """
    dirs, speeds = _wind_arrays(wind_samples)
    coords = _coords(layout)
    F = kernel_values(field.positions, field.heights, coords, dirs, speeds, params)
    G = _posterior(F, prior, noise.sigma)
    U = noise_factor(noise, len(coords))
    prior_term = np.sum((G @ prior.L.T) ** 2, axis=(1, 2))
    data_term = np.sum((G @ np.transpose(F, (0, 2, 1)) @ U.T) ** 2, axis=(1, 2))
    return float(np.mean(prior_term + data_term))


def a_optimal_risk_and_grad(coords, field, prior, dirs, speeds, noise, params):
    """Risk via ``tr(G)`` and its analytic gradient with respect to ``coords``.

    With ``H = F'F / sigma^2 + Gamma_pr^-1`` and ``G = H^-1``,
    ``d tr(G) / d s_{i,a} = -2 sigma^-2 F_i' G^2 dF_i/ds_{i,a}``.
    """
    F, dF = kernel_values_and_grads(field.positions, field.heights, coords, dirs, speeds, params)
    G = _posterior(F, prior, noise.sigma)
    risk = np.trace(G, axis1=1, axis2=2).mean()
    G2F = np.einsum("wpq,wiq->wip", G @ G, F)  # (W, n, N_p): G^2 F_i
    grad = -2.0 / noise.sigma**2 * np.einsum("wip,wipa->wia", G2F, dF).mean(axis=0)
    return float(risk), grad


def random_design(bounds, n, rng):
    """``n`` sensors i.i.d. uniform in the box ``bounds = (lower, upper)``."""
    if n < 1:
        raise ValueError("need n >= 1")
    lower, upper = check_bounds(*bounds)
    coords = lower + (upper - lower) * rng.random((n, 2))
    return SensorLayout(coords, lower, upper)


def _greedy_start(field, prior, dirs, speeds, noise, params, lower, upper, n, n_cand, rng):
    """Add sensors one at a time, each the best of a random candidate pool."""
    cand = lower + (upper - lower) * rng.random((n_cand, 2))
    chosen = np.empty((0, 2))
    for _ in range(n):
        risks = [a_optimal_risk_and_grad(np.vstack([chosen, c]), field, prior, dirs, speeds, noise, params)[0]
                 for c in cand]
        chosen = np.vstack([chosen, cand[int(np.argmin(risks))]])
    return chosen


def _projected_descent(x, objective, lower, upper, max_iter, grad_tol):
    """Projected gradient with Armijo backtracking along the projection arc."""
    f, g = objective(x)
    scale = float(np.max(upper - lower)) or 1.0
    step = scale / max(np.abs(g).max(), 1e-300)
    for _ in range(max_iter):
        if not np.isfinite(f) or np.abs(g).max() * scale <= grad_tol * max(f, 1.0):
            break
        accepted = False
        for _ in range(60):
            x_new = np.clip(x - step * g, lower, upper)
            f_new, g_new = objective(x_new)
            if f_new <= f - 1e-4 * np.sum(g * (x - x_new)) and f_new <= f:
                accepted = True
                break
            step *= 0.5
        if not accepted or np.allclose(x_new, x, rtol=0, atol=1e-12 * scale):
            break
        x, f, g = x_new, f_new, g_new
        step *= 2.0
    return x, f


def a_optimal_design(field, prior, wind_prior, bounds, n, cfg=DesignConfig(), rng=None, noise=None, params=None):
    """Multistart projected-gradient minimiser of the wind-averaged Bayes risk.

    A fixed set of ``cfg.n_wind_samples`` winds is drawn once, so every start
    minimises the same deterministic sample-average risk.  Start 0 is a greedy
    sequential design over a random candidate pool; the rest are uniform in
    the box.  Each start draws from its own substream.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    if noise is None or params is None:
        raise ValueError("a_optimal_design needs the noise model and plume parameters")
    rng = np.random.default_rng() if rng is None else rng
    lower, upper = check_bounds(*bounds)
    if isinstance(wind_prior, WindSample):
        dirs, speeds = wind_prior.direction[None], np.array([wind_prior.speed])
    else:
        dirs, speeds = sample_winds(wind_prior, rng, cfg.n_wind_samples)
    streams = rng.spawn(cfg.n_starts)

    def objective(x):
        return a_optimal_risk_and_grad(x, field, prior, dirs, speeds, noise, params)

    best_x, best_f = None, np.inf
    for k, sub in enumerate(streams):
        if k == 0:
            x0 = _greedy_start(field, prior, dirs, speeds, noise, params, lower, upper, n, cfg.n_candidates, sub)
        else:
            x0 = lower + (upper - lower) * sub.random((n, 2))
        x, f = _projected_descent(x0, objective, lower, upper, cfg.max_iter, cfg.grad_tol)
        if f < best_f:
            best_x, best_f = x, f
    return SensorLayout(best_x, lower, upper)


def concentration_mass(field, mean_rates, wind_prior, bounds, params, grid_size=100, n_winds=64, rng=None):
    """Wind-averaged mean concentration ``sum_j mu_j E[A_j]`` on a regular grid.

    Returns ``(xs, ys, values)`` with ``values[iy, ix]``.  A fixed wind prior is
    evaluated exactly; otherwise the expectation is a sample average.
    """
    lower, upper = check_bounds(*bounds)
    xs = np.linspace(lower[0], upper[0], grid_size)
    ys = np.linspace(lower[1], upper[1], grid_size)
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    if isinstance(wind_prior, WindSample):
        dirs, speeds = wind_prior.direction[None], np.array([wind_prior.speed])
    elif wind_prior.is_fixed:
        dirs, speeds = sample_winds(wind_prior, np.random.default_rng(0), 1)
    else:
        rng = np.random.default_rng() if rng is None else rng
        dirs, speeds = sample_winds(wind_prior, rng, n_winds)
    A = kernel_values(field.positions, field.heights, pts, dirs, speeds, params)  # (W, P, N_p)
    vals = (A @ np.asarray(mean_rates, float)).mean(axis=0)
    return xs, ys, vals.reshape(grid_size, grid_size)


def _kmeanspp(X, k, rng):
    centers = [X[rng.integers(len(X))]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(X), p=d2 / total) if total > 0 else rng.integers(len(X))
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def lloyd_kmeans(X, k, rng, restarts=4, max_iter=300, tol=1e-10):
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` by inertia.

    Returns ``(centers (k, 2), labels, inertia)``.
    """
    X = np.asarray(X, float)
    if k > len(X):
        raise ValueError("more clusters than points")
    best = None
    for _ in range(restarts):
        C = _kmeanspp(X, k, rng)
        for _ in range(max_iter):
            d2 = np.sum((X[:, None, :] - C[None]) ** 2, axis=2)
            labels = np.argmin(d2, axis=1)
            newC = C.copy()
            for j in range(k):
                members = X[labels == j]
                if len(members):
                    newC[j] = members.mean(axis=0)
                else:
                    # re-seed an empty cluster at the worst-served point
                    newC[j] = X[np.argmax(d2[np.arange(len(X)), labels])]
            shift = np.max(np.abs(newC - C))
            C = newC
            if shift <= tol:
                break
        d2 = np.sum((X[:, None, :] - C[None]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(len(X)), labels].sum())
        if best is None or inertia < best[2]:
            best = (C, labels, inertia)
    return best


def mass_sample(field, mean_rates, wind_prior, bounds, params, cfg, rng):
    """Grid cells drawn with probability proportional to the concentration mass."""
    xs, ys, vals = concentration_mass(field, mean_rates, wind_prior, bounds, params, cfg.grid_size, rng=rng)
    w = vals.ravel()
    total = w.sum()
    p = w / total if total > 0 else np.full(w.size, 1.0 / w.size)
    idx = rng.choice(w.size, size=cfg.n_mass_points, p=p)
    iy, ix = np.divmod(idx, len(xs))
    return np.column_stack([xs[ix], ys[iy]])


def kmeans_design(field, wind_prior, bounds, n, cfg=DesignConfig(), rng=None, params=None, mean_rates=None):
    """k-means centroids of points sampled from the concentration mass, clipped to the box."""
    if n < 1:
        raise ValueError("need n >= 1")
    if params is None:
        raise ValueError("kmeans_design needs the plume parameters")
    rng = np.random.default_rng() if rng is None else rng
    lower, upper = check_bounds(*bounds)
    rates = np.ones(len(field)) if mean_rates is None else mean_rates
    pts = mass_sample(field, rates, wind_prior, (lower, upper), params, cfg, rng)
    k = min(n, len(np.unique(pts, axis=0)))
    centers, _, _ = lloyd_kmeans(pts, k, rng, cfg.kmeans_restarts, cfg.kmeans_max_iter)
    if k < n:
        # fewer distinct mass points than sensors: duplicate the heaviest centroids
        centers = np.vstack([centers, centers[np.arange(n - k) % k]])
    return SensorLayout(project_box(centers, lower, upper), lower, upper)
