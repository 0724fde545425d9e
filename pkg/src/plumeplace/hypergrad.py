"""Hypergradient of the sampled IMSE with respect to sensor coordinates.

The lower-level solution ``theta_hat(s)`` is differentiated implicitly
through its KKT system restricted to the active set.  Sensor coordinates are
flattened as ``k = 2 * i + a`` (sensor ``i``, axis ``a``).  Observations are
data: ``phi`` is generated at the current layout and held fixed while
differentiating ``C(s)`` and ``d(s)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .inverse import ACTIVE_RTOL, active_set
from .plume import forward_jacobian

__all__ = [
    "QpSensitivities",
    "Hypergradient",
    "qp_sensitivities",
    "theta_jacobian",
    "imse_hypergradient",
    "batch_hypergradient",
    "sensitivity_products",
]


@dataclass
class QpSensitivities:
    """Derivatives of the QP data: ``dC[k] = dC/ds_k`` and ``dd[k] = dd/ds_k``."""

    dC: np.ndarray  # (2n, N_p, N_p)
    dd: np.ndarray  # (2n, N_p)

    @property
    def n_coords(self):
        return len(self.dd)


@dataclass
class Hypergradient:
    grad: np.ndarray  # (2n,)
    per_scenario: np.ndarray  # (B, 2n)
    strict_complementarity_ok: bool = True
    n_degenerate: int = 0

    @property
    def as_layout(self):
        return self.grad.reshape(-1, 2)

    @property
    def norm(self):
        return float(np.linalg.norm(self.grad))


def qp_sensitivities(field, layout, scenario, noise, params):
    """Closed-form ``dC/ds`` and ``dd/ds`` for one scenario.

    Only sensor ``i``'s row of ``F`` depends on ``s_i``, so
    ``dC/ds_{i,a} = (g f' + f g') / sigma^2`` with ``f = F[i]`` and
    ``g = dF[i]/ds_{i,a}``, and ``dd/ds_{i,a} = -g phi_i / sigma^2``.
    """
    coords = np.asarray(getattr(layout, "coords", layout), float).reshape(-1, 2)
    F, G = forward_jacobian(field, coords, scenario.wind, params)
    phi = np.asarray(scenario.observation, float)
    n, Np = F.shape
    inv_var = 1.0 / noise.sigma**2
    g = np.transpose(G, (0, 2, 1)).reshape(2 * n, Np)  # row k = 2i + a
    f = np.repeat(F, 2, axis=0)
    dC = inv_var * (g[:, :, None] * f[:, None, :] + f[:, :, None] * g[:, None, :])
    dd = -inv_var * g * np.repeat(phi, 2)[:, None]
    return QpSensitivities(dC, dd)


def theta_jacobian(qp, sens, sol):
    """Jacobian ``d theta_hat / ds`` of shape ``(N_p, 2n)``.

    With ``R = dC theta_hat + dd`` and ``E`` the rows of the identity picked
    out by the active set,

        d eta_A   = (E C^-1 E')^-1 E C^-1 R
        d theta   = C^-1 (-R + E' d eta_A)

    ``C`` is factored once and reused for every right-hand side.
    """
    C = np.asarray(qp.C, float)
    theta = np.asarray(sol.theta, float)
    R = (np.einsum("kpq,q->pk", sens.dC, theta) + sens.dd.T)
    factor = cho_factor(C)
    X = cho_solve(factor, R)
    act = np.flatnonzero(sol.active)
    if act.size == 0:
        return -X
    if act.size == len(theta):
        return np.zeros_like(X)
    E = np.eye(len(theta))[act]
    CinvEt = cho_solve(factor, E.T)
    S = E @ CinvEt
    d_eta = np.linalg.solve(S, X[act])
    J = -X + CinvEt @ d_eta
    # the active rows vanish analytically; remove the rounding residue
    J[act] = 0.0
    return J


def imse_hypergradient(scenarios, solutions, jacobians):
    """``(2 / B) sum_i J_i' (theta_hat_i - theta_i)`` with per-scenario terms.

    Parameters
    ----------
    scenarios : sequence of Scenario
        Supplies the true rates ``theta_true``.
    solutions : sequence of InverseSolution
        Lower-level solutions, one per scenario.
    jacobians : sequence of (N_p, 2n) arrays
        Output of :func:`theta_jacobian` for each scenario.
    """
    if not (len(scenarios) == len(solutions) == len(jacobians)):
        raise ValueError("need one solution and one jacobian per scenario")
    r = np.array([sol.theta for sol in solutions]) - np.array([sc.theta_true for sc in scenarios])
    J = np.asarray(jacobians, float)
    per = 2.0 * np.einsum("bpk,bp->bk", J, r)
    n_deg = sum(not sol.strict_complementarity for sol in solutions)
    return Hypergradient(per.mean(axis=0), per, n_deg == 0, n_deg)


def sensitivity_products(F, G, phi, theta_hat, sigma):
    """``R[b, :, k] = dC_k theta_hat + dd_k`` for a batch, without forming ``dC``.

    ``F`` is ``(B, n, N_p)``, ``G`` is ``(B, n, N_p, 2)``; returns ``(B, N_p, 2n)``.
    """
    inv_var = 1.0 / sigma**2
    f_theta = np.einsum("bip,bp->bi", F, theta_hat)  # (B, n)
    g_theta = np.einsum("bipa,bp->bia", G, theta_hat)  # (B, n, 2)
    R = G * (f_theta - phi)[:, :, None, None] + F[..., None] * g_theta[:, :, None, :]
    B, n, Np, _ = G.shape
    return inv_var * np.transpose(R, (0, 2, 1, 3)).reshape(B, Np, 2 * n)


def batch_hypergradient(C, d, F, G, phi, thetas_true, thetas_hat, sigma):
    """Hypergradient over a batch via the adjoint of the reduced KKT system.

    On the free set ``Fr`` the implicit relation is
    ``C_FrFr dtheta_Fr = -R_Fr`` with ``dtheta`` zero on the active set, so
    ``J' r = -R' v`` where ``v`` solves the masked system with right-hand side
    ``r`` restricted to ``Fr``.  This is algebraically the same Jacobian as
    :func:`theta_jacobian` but needs one solve per scenario.
    """
    C = np.asarray(C, float)
    theta_hat = np.asarray(thetas_hat, float)
    B, Np = theta_hat.shape
    act = active_set(theta_hat)
    eta = np.maximum(np.einsum("bij,bj->bi", C, theta_hat) + d, 0.0)
    scale = np.maximum(1.0, np.abs(theta_hat).max(axis=1, keepdims=True))
    degenerate = act & (eta <= ACTIVE_RTOL * scale)
    free = ~act
    both = free[:, :, None] & free[:, None, :]
    M = np.where(both, C, 0.0) + np.eye(Np) * act[:, None, :]
    resid = theta_hat - np.asarray(thetas_true, float)
    v = np.linalg.solve(M, np.where(free, resid, 0.0)[..., None])[..., 0]
    v = np.where(free, v, 0.0)
    R = sensitivity_products(F, G, phi, theta_hat, sigma)
    per = -2.0 * np.einsum("bpk,bp->bk", R, v)
    n_deg = int(degenerate.any(axis=1).sum())
    return Hypergradient(per.mean(axis=0), per, n_deg == 0, n_deg)
