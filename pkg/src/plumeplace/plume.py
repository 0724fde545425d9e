"""Gaussian plume forward model.

Steady-state plume kernel for point sources under a constant wind, the
forward matrix mapping emission rates to sensor readings, and closed-form
derivatives of the kernel with respect to sensor coordinates.

Conventions
-----------
* Wind direction ``w`` is the unit vector the wind blows *toward*.  A north
  wind (blowing south) is ``w = (0, -1)``.
* For a source at ``x`` and sensor at ``s`` the downwind distance is
  ``r_par = (s - x) . w`` and the crosswind offset is
  ``r_perp = |(s - x) - r_par w|``.
* The kernel is

      A = exp(-u (r_perp**2 + H**2) / (4 K r_par)) / (2 pi K r_par)

  for ``r_par > eps`` and exactly zero otherwise.  Dropping the ``u`` factor
  in the exponent (``use_wind_speed_factor=False``) gives the variant without
  the wind-speed term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PlumeParams",
    "WindSample",
    "Source",
    "SourceField",
    "NoiseModel",
    "kernel",
    "kernel_grad",
    "kernel_pair_grad",
    "kernel_values",
    "kernel_values_and_grads",
    "forward_matrix",
    "forward_jacobian",
    "observe",
]


@dataclass(frozen=True)
class PlumeParams:
    """Dispersion parameters shared by every source.

    Parameters
    ----------
    eddy_diffusivity : float
        ``K`` in the kernel, strictly positive.
    use_wind_speed_factor : bool
        Multiply the exponent by the wind speed ``u``.
    downwind_eps : float
        Points with downwind distance ``<= downwind_eps`` receive zero
        concentration.  :meth:`for_domain` sets it to ``1e-6`` times the
        diagonal of the sensor box.
    """

    eddy_diffusivity: float = 1.0
    use_wind_speed_factor: bool = True
    downwind_eps: float = 1e-6

    def __post_init__(self):
        if not (np.isfinite(self.eddy_diffusivity) and self.eddy_diffusivity > 0):
            raise ValueError("eddy_diffusivity must be finite and > 0")
        if not (np.isfinite(self.downwind_eps) and self.downwind_eps >= 0):
            raise ValueError("downwind_eps must be finite and >= 0")

    @classmethod
    def for_domain(cls, eddy_diffusivity, lower, upper, use_wind_speed_factor=True):
        diag = float(np.hypot(*(np.asarray(upper, float) - np.asarray(lower, float))))
        eps = 1e-6 * diag if diag > 0 else 1e-6
        return cls(eddy_diffusivity, use_wind_speed_factor, eps)


@dataclass(frozen=True)
class WindSample:
    """A constant wind: unit direction (blowing toward) and speed."""

    direction: np.ndarray
    speed: float

    def __post_init__(self):
        w = np.asarray(self.direction, dtype=float).reshape(2)
        if abs(np.linalg.norm(w) - 1.0) > 1e-12:
            raise ValueError(f"wind direction must be a unit vector, got {w}")
        if not (np.isfinite(self.speed) and self.speed > 0):
            raise ValueError("wind speed must be > 0")
        object.__setattr__(self, "direction", w)
        object.__setattr__(self, "speed", float(self.speed))

    @classmethod
    def from_vector(cls, beta):
        """Build from a wind vector ``beta = u * w``."""
        beta = np.asarray(beta, dtype=float)
        u = float(np.linalg.norm(beta))
        return cls(beta / u, u)

    @classmethod
    def from_angle(cls, angle, speed):
        """Direction given as a mathematical angle (radians from +x)."""
        return cls(np.array([np.cos(angle), np.sin(angle)]), speed)

    @property
    def vector(self):
        return self.speed * self.direction


@dataclass(frozen=True)
class Source:
    position: np.ndarray
    height: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, float).reshape(2))
        if not self.height >= 0:
            raise ValueError("stack height must be >= 0")


@dataclass(frozen=True)
class SourceField:
    """Fixed potential emission sources: positions ``(N_p, 2)`` and stack heights."""

    positions: np.ndarray
    heights: np.ndarray = field(default=None)

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ValueError("source positions must have shape (N_p, 2)")
        h = self.heights
        h = np.zeros(len(pos)) if h is None else np.broadcast_to(np.asarray(h, float), (len(pos),)).copy()
        if np.any(h < 0) or not np.all(np.isfinite(h)):
            raise ValueError("stack heights must be finite and >= 0")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "heights", h)

    def __len__(self):
        return len(self.positions)

    @property
    def n_sources(self):
        return len(self.positions)

    def source(self, j):
        return Source(self.positions[j], self.heights[j])


@dataclass(frozen=True)
class NoiseModel:
    """Isotropic Gaussian observation noise with standard deviation ``sigma``."""

    sigma: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError("noise sigma must be > 0")
        if not 0 < float(self.sigma) ** 2 < np.inf:
            raise ValueError(f"noise sigma {self.sigma} is outside the representable range")


def _terms(disp, w, u, H, params):
    """Kernel value and pieces of its gradient, broadcast over leading axes.

    ``disp`` is ``s - x`` with trailing axis 2; ``w`` broadcasts against it,
    ``u`` and ``H`` broadcast against ``disp[..., 0]``.
    Returns ``(A, r_par, down, perp_vec, num, factor)``; ``A`` is zero and
    ``r_par`` is replaced by 1 in the upwind region.
    """
    K = params.eddy_diffusivity
    r_par = np.sum(disp * w, axis=-1)
    perp_vec = disp - r_par[..., None] * w
    r_perp2 = np.sum(perp_vec * perp_vec, axis=-1)
    factor = u if params.use_wind_speed_factor else np.ones_like(u)
    num = factor * (r_perp2 + H * H)
    down = r_par > params.downwind_eps
    safe = np.where(down, r_par, 1.0)
    A = np.where(down, np.exp(-num / (4.0 * K * safe)) / (2.0 * np.pi * K * safe), 0.0)
    return A, safe, down, perp_vec, num, factor


def _grad_from_terms(A, r_par, down, perp_vec, num, factor, w, params):
    K = params.eddy_diffusivity
    # d/ds of the exponent: -f * 2 perp / (4 K r) + num * w / (4 K r^2)
    dexp = (-2.0 * factor[..., None] * perp_vec / (4.0 * K * r_par[..., None])
            + num[..., None] * w / (4.0 * K * r_par[..., None] ** 2))
    grad = A[..., None] * (-w / r_par[..., None] + dexp)
    return np.where(down[..., None], grad, 0.0)


def kernel_values(positions, heights, sensors, direction, speed, params):
    """Kernel matrix for arbitrary batches.

    Parameters
    ----------
    positions : (N_p, 2) array
    heights : (N_p,) array
    sensors : (..., n, 2) array
    direction : (..., 2) array, one unit vector per leading batch index
    speed : (...) array

    Returns
    -------
    (..., n, N_p) array of kernel values.
    """
    sensors = np.asarray(sensors, dtype=float)
    w = np.asarray(direction, dtype=float)[..., None, None, :]
    u = np.asarray(speed, dtype=float)[..., None, None]
    disp = sensors[..., :, None, :] - positions
    A = _terms(disp, w, u, heights, params)[0]
    return A


def kernel_values_and_grads(positions, heights, sensors, direction, speed, params):
    """Like :func:`kernel_values` but also returns ``dA/ds`` of shape ``(..., n, N_p, 2)``."""
    sensors = np.asarray(sensors, dtype=float)
    w = np.asarray(direction, dtype=float)[..., None, None, :]
    u = np.asarray(speed, dtype=float)[..., None, None]
    disp = sensors[..., :, None, :] - positions
    A, r_par, down, perp_vec, num, factor = _terms(disp, w, u, heights, params)
    factor = np.broadcast_to(factor, A.shape)
    return A, _grad_from_terms(A, r_par, down, perp_vec, num, factor, w, params)


def kernel(source, sensor, wind, params):
    """Concentration at ``sensor`` per unit emission rate of ``source``."""
    disp = np.asarray(sensor, float) - source.position
    A = _terms(disp, wind.direction, np.float64(wind.speed), source.height, params)[0]
    return float(A)


def kernel_grad(source, sensor, wind, params):
    """Closed-form gradient of :func:`kernel` with respect to the sensor coordinates."""
    disp = np.asarray(sensor, float) - source.position
    u = np.float64(wind.speed)
    A, r_par, down, perp_vec, num, factor = _terms(disp, wind.direction, u, source.height, params)
    return _grad_from_terms(A, r_par, down, perp_vec, num, np.asarray(factor), wind.direction, params)


def kernel_pair_grad(source_m, source_n, sensor, wind, params):
    """Gradient of the kernel product ``A_m * A_n`` with respect to the sensor.

    Evaluated from the product written as a single exponential,
    ``exp(E_m + E_n) / (4 pi^2 K^2 r_m r_n)``, differentiated directly.
    """
    K = params.eddy_diffusivity
    s = np.asarray(sensor, float)
    w = wind.direction
    u = np.float64(wind.speed)
    parts = []
    for src in (source_m, source_n):
        A, r, down, perp, num, factor = _terms(s - src.position, w, u, src.height, params)
        if not down:
            return np.zeros(2)
        parts.append((r, perp, num, factor))
    (rm, pm, nm, f), (rn, pn, nn, _) = parts
    expo = -nm / (4 * K * rm) - nn / (4 * K * rn)
    prod = np.exp(expo) / (4 * np.pi**2 * K**2 * rm * rn)
    # d(1/(rm rn)) = -(rm + rn) w / (rm rn)^2, scaled by the prefactor
    d_pref = -(rm + rn) * w / (rm * rn)
    d_expo = (-2 * f * pm / (4 * K * rm) + nm * w / (4 * K * rm**2)
              - 2 * f * pn / (4 * K * rn) + nn * w / (4 * K * rn**2))
    return prod * (d_pref + d_expo)


def _coords(layout):
    return np.asarray(getattr(layout, "coords", layout), dtype=float).reshape(-1, 2)


def forward_matrix(field, layout, wind, params):
    """Forward matrix ``F`` with ``F[i, j] = kernel(source j, sensor i)``."""
    return kernel_values(field.positions, field.heights, _coords(layout),
                         wind.direction, wind.speed, params)


def forward_jacobian(field, layout, wind, params):
    """``(F, dF)`` with ``dF[i, j, a] = d F[i, j] / d s_{i, a}``."""
    return kernel_values_and_grads(field.positions, field.heights, _coords(layout),
                                   wind.direction, wind.speed, params)


def observe(F, theta, noise, rng):
    """Noisy sensor readings ``F @ theta + eps`` with ``eps ~ N(0, sigma^2 I)``."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0):
        raise ValueError("emission rates must be nonnegative")
    mean = np.asarray(F) @ theta
    return mean + noise.sigma * rng.standard_normal(mean.shape)
