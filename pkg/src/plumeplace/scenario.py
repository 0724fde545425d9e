"""Monte Carlo scenarios: wind and emission priors, noisy observations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .plume import WindSample, kernel_values

__all__ = [
    "WindPrior",
    "EmissionPrior",
    "Scenario",
    "ScenarioBatch",
    "sample_wind",
    "sample_winds",
    "sample_emissions",
    "sample_batch",
    "sample_draws",
]


@dataclass(frozen=True)
class WindPrior:
    """Uniform wind speed on ``[speed_min, speed_max]`` and direction on an arc.

    Directions are mathematical angles (radians from +x) of the vector the
    wind blows toward.  A wind coming from anywhere between north-west and
    north-east is the arc ``[-3 pi/4, -pi/4]``.
    """

    speed_min: float
    speed_max: float
    angle_min: float
    angle_max: float

    def __post_init__(self):
        if not (0 < self.speed_min <= self.speed_max):
            raise ValueError("need 0 < speed_min <= speed_max")
        if not self.angle_min <= self.angle_max:
            raise ValueError("need angle_min <= angle_max")

    @classmethod
    def fixed(cls, beta):
        """Degenerate prior at the wind vector ``beta``."""
        w = WindSample.from_vector(beta)
        a = float(np.arctan2(w.direction[1], w.direction[0]))
        return cls(w.speed, w.speed, a, a)

    @property
    def is_fixed(self):
        return self.speed_min == self.speed_max and self.angle_min == self.angle_max


@dataclass(frozen=True)
class EmissionPrior:
    """Nonnegative emission-rate prior with independent components.

    ``mode="truncated-normal"`` draws each rate from ``N(mean, std^2)``
    conditioned on being nonnegative.  ``mode="sparse-leak"`` multiplies such a
    draw by an independent ``Bernoulli(p_leak)`` leak indicator.
    """

    mean: np.ndarray
    std: np.ndarray
    mode: str = "truncated-normal"
    p_leak: float = 1.0

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, float))
        std = np.broadcast_to(np.asarray(self.std, float), mean.shape).copy()
        if np.any(std < 0) or not np.all(np.isfinite(std)):
            raise ValueError("prior std must be finite and >= 0")
        if self.mode not in ("truncated-normal", "sparse-leak"):
            raise ValueError(f"unknown emission prior mode {self.mode!r}")
        if not 0 <= self.p_leak <= 1:
            raise ValueError("p_leak must lie in [0, 1]")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def size(self):
        return len(self.mean)

    def expected_rates(self):
        """Mean of each rate under the prior (truncation and leak included)."""
        out = np.maximum(self.mean, 0.0)
        pos = self.std > 0
        if np.any(pos):
            m, s = self.mean[pos], self.std[pos]
            out[pos] = stats.truncnorm.mean(-m / s, np.inf, loc=m, scale=s)
        return out * (self.p_leak if self.mode == "sparse-leak" else 1.0)


@dataclass(frozen=True)
class Scenario:
    wind: WindSample
    theta_true: np.ndarray
    forward: np.ndarray
    observation: np.ndarray
    noise: np.ndarray | None = None


@dataclass
class ScenarioBatch:
    """A stack of scenarios held as arrays.

    ``noise`` keeps the standardised-noise-times-sigma draws so that the same
    scenario can be re-observed at another layout (``phi = F(s) theta + noise``).
    """

    directions: np.ndarray  # (B, 2)
    speeds: np.ndarray  # (B,)
    thetas: np.ndarray  # (B, N_p)
    noise: np.ndarray  # (B, n)
    forward: np.ndarray | None = None  # (B, n, N_p)
    observations: np.ndarray | None = None  # (B, n)

    def __len__(self):
        return len(self.speeds)

    def __getitem__(self, i):
        return Scenario(
            WindSample(self.directions[i], self.speeds[i]),
            self.thetas[i],
            None if self.forward is None else self.forward[i],
            None if self.observations is None else self.observations[i],
            self.noise[i],
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def observe_at(self, field, coords, params):
        """Forward matrices and observations at a layout (returns a new batch)."""
        F = kernel_values(field.positions, field.heights, coords, self.directions, self.speeds, params)
        phi = np.einsum("bij,bj->bi", F, self.thetas) + self.noise
        return ScenarioBatch(self.directions, self.speeds, self.thetas, self.noise, F, phi)


def sample_winds(prior, rng, size):
    """Vectorised wind draws: ``(directions (size, 2), speeds (size,))``."""
    speeds = rng.uniform(prior.speed_min, prior.speed_max, size)
    angles = rng.uniform(prior.angle_min, prior.angle_max, size)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    return dirs, speeds


def sample_wind(prior, rng):
    dirs, speeds = sample_winds(prior, rng, 1)
    return WindSample(dirs[0], speeds[0])


def _truncated_normal(mean, std, rng, size):
    """Per-component rejection sampling of ``N(mean, std^2)`` restricted to ``>= 0``.

    Zero-std components are deterministic at ``max(mean, 0)``.
    """
    shape = (size, len(mean))
    mean_b = np.broadcast_to(mean, shape)
    std_b = np.broadcast_to(std, shape)
    out = np.broadcast_to(np.maximum(mean, 0.0), shape).copy()
    todo = std_b > 0
    while todo.any():
        m = mean_b[todo]
        draw = m + std_b[todo] * rng.standard_normal(m.shape)
        ok = draw >= 0
        idx = np.flatnonzero(todo)
        out.flat[idx[ok]] = draw[ok]
        todo.flat[idx[ok]] = False
    return out


def sample_emissions(prior, rng, size=None):
    """Draw emission-rate vectors (one if ``size`` is None, else ``(size, N_p)``)."""
    vals = _truncated_normal(prior.mean, prior.std, rng, 1 if size is None else size)
    if prior.mode == "sparse-leak":
        vals = vals * (rng.random(vals.shape) < prior.p_leak)
    return vals[0] if size is None else vals


def sample_draws(count, n_sensors, wind_prior, emission_prior, noise, rng):
    """Draw the layout-independent part of ``count`` scenarios."""
    if count < 1:
        raise ValueError("count must be >= 1")
    dirs, speeds = sample_winds(wind_prior, rng, count)
    thetas = sample_emissions(emission_prior, rng, count)
    eps = noise.sigma * rng.standard_normal((count, n_sensors))
    return ScenarioBatch(dirs, speeds, thetas, eps)


def sample_batch(count, field, layout, wind_prior, emission_prior, noise, params, rng):
    """Sample ``count`` independent scenarios observed at ``layout``."""
    coords = np.asarray(getattr(layout, "coords", layout), float).reshape(-1, 2)
    draws = sample_draws(count, len(coords), wind_prior, emission_prior, noise, rng)
    return draws.observe_at(field, coords, params)
