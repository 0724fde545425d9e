"""Lower-level inverse problem: nonnegative elastic-net estimation of emission rates.

The estimator minimises ``0.5 theta' C theta + d' theta`` subject to
``theta >= 0`` with

    C = F'F / sigma**2 + lam1 * I,      d = lam2 * 1 - F' phi / sigma**2.

Two solvers are provided:

* :func:`solve_pd`, the projected augmented primal-dual gradient iteration
  used inside the stochastic outer loop (cheap, inexact);
* :func:`solve_exact`, which returns the exact KKT point either by
  enumerating active sets (small problems) or by block principal pivoting.

Batched versions operate on stacks of problems with leading batch axes.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "QpProblem",
    "InverseSolution",
    "PdSolverConfig",
    "SolverDivergenceError",
    "build_qp",
    "qp_matrices",
    "qp_objective",
    "aug_lagrangian",
    "aug_lagrangian_grads",
    "kkt_residual",
    "active_set",
    "solve_pd",
    "solve_pd_batch",
    "solve_exact",
    "solve_exact_batch",
    "solve_batch",
    "LowerLevelConfig",
]

ACTIVE_RTOL = 1e-7


class SolverDivergenceError(FloatingPointError):
    """Raised when primal-dual iterates blow up (step size too large)."""


@dataclass(frozen=True)
class QpProblem:
    """``min 0.5 theta' C theta + d' theta  s.t. theta >= 0``."""

    C: np.ndarray
    d: np.ndarray
    sigma: float = 1.0
    lam1: float = 0.0
    lam2: float = 0.0

    @property
    def size(self):
        return self.d.shape[-1]

    def objective(self, theta):
        return qp_objective(self.C, self.d, theta)


@dataclass
class InverseSolution:
    """Estimate and certificate from a lower-level solve.

    ``eta`` is the multiplier of ``theta >= 0``.  For the primal-dual solver it
    is recovered as ``max(C theta + d, 0)``; the raw dual iterate is kept in
    ``dual_iterate`` for warm starts.
    """

    theta: np.ndarray
    eta: np.ndarray
    active: np.ndarray
    kkt_residual: float
    iterations: int = 0
    strict_complementarity: bool = True
    dual_iterate: np.ndarray | None = field(default=None, repr=False)

    @property
    def active_set(self):
        return tuple(int(b) for b in np.flatnonzero(self.active))


@dataclass(frozen=True)
class PdSolverConfig:
    """Settings of the augmented primal-dual iteration.

    ``gamma=None`` resolves to ``10 * lam1 + 1`` at solve time.  ``tol=None``
    runs exactly ``max_iter`` steps.  ``schedule`` is ``"constant"`` or
    ``"sqrt"`` (step ``tau / sqrt(j + 1)``).
    """

    step: float = 5e-4
    max_iter: int = 2000
    gamma: float | None = None
    tol: float | None = None
    schedule: str = "constant"

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.schedule not in ("constant", "sqrt"):
            raise ValueError(f"unknown step schedule {self.schedule!r}")

    def resolved_gamma(self, lam1):
        return self.gamma if self.gamma is not None else 10.0 * lam1 + 1.0


def qp_matrices(F, phi, sigma, lam1, lam2):
    """Batched assembly of ``(C, d)`` from ``F (..., n, N_p)`` and ``phi (..., n)``."""
    F = np.asarray(F, dtype=float)
    phi = np.asarray(phi, dtype=float)
    inv_var = 1.0 / sigma**2
    Ft = np.swapaxes(F, -1, -2)
    C = inv_var * (Ft @ F)
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    C = C + lam1 * np.eye(F.shape[-1])
    d = lam2 - inv_var * np.einsum("...ij,...i->...j", F, phi)
    return C, d


def build_qp(F, phi, noise, lam1, lam2):
    """Assemble the lower-level QP for one scenario."""
    if lam1 < 0 or lam2 < 0:
        raise ValueError("regularisation weights must be >= 0")
    F = np.atleast_2d(np.asarray(F, dtype=float))
    C, d = qp_matrices(F, phi, noise.sigma, lam1, lam2)
    if lam1 == 0 and np.linalg.matrix_rank(F) < F.shape[1]:
        warnings.warn("lam1 = 0 with rank-deficient F: C is singular", RuntimeWarning, stacklevel=2)
    return QpProblem(C, d, noise.sigma, lam1, lam2)


def qp_objective(C, d, theta):
    theta = np.asarray(theta, dtype=float)
    return 0.5 * np.einsum("...i,...ij,...j->...", theta, C, theta) + np.sum(d * theta, axis=-1)


def _hinge(theta, eta, gamma):
    return np.maximum(eta - gamma * theta, 0.0)


def aug_lagrangian(qp, theta, eta, gamma):
    """Value of the augmented Lagrangian ``h_gamma``."""
    theta = np.asarray(theta, float)
    eta = np.asarray(eta, float)
    pen = (_hinge(theta, eta, gamma) ** 2 - eta**2) / (2.0 * gamma)
    return float(qp_objective(qp.C, qp.d, theta) + pen.sum())


def aug_lagrangian_grads(qp, theta, eta, gamma):
    """Gradients of ``h_gamma`` with respect to ``theta`` and ``eta``."""
    theta = np.asarray(theta, float)
    eta = np.asarray(eta, float)
    h = _hinge(theta, eta, gamma)
    g_theta = qp.C @ theta + qp.d - h
    g_eta = (h - eta) / gamma
    return g_theta, g_eta


def kkt_residual(C, d, theta, eta):
    """``max(|C theta + d - eta|, |min(theta, C theta + d)|, |eta * theta|)`` (sup norms).

    Works on batches; returns one residual per problem.
    """
    grad = np.einsum("...ij,...j->...i", C, theta) + d
    r1 = np.abs(grad - eta).max(axis=-1)
    r2 = np.abs(np.minimum(theta, grad)).max(axis=-1)
    r3 = np.abs(eta * theta).max(axis=-1)
    return np.maximum(np.maximum(r1, r2), r3)


def active_set(theta, rtol=ACTIVE_RTOL):
    """Boolean mask of indices treated as active (``theta_b`` numerically zero)."""
    theta = np.asarray(theta, float)
    scale = np.maximum(1.0, np.abs(theta).max(axis=-1, keepdims=True))
    return theta <= rtol * scale


def _recovered_multiplier(C, d, theta):
    return np.maximum(np.einsum("...ij,...j->...i", C, theta) + d, 0.0)


def _degenerate(theta, eta, active):
    scale = np.maximum(1.0, np.abs(theta).max(axis=-1, keepdims=True))
    return active & (eta <= ACTIVE_RTOL * scale)


def solve_pd_batch(C, d, theta0, eta0, cfg, lam1=0.0):
    """Run the projected augmented primal-dual iteration on a stack of QPs.

    Returns ``(theta, eta_iterate, iterations)``.  All problems take the same
    number of steps; with ``cfg.tol`` set the loop stops once every problem
    meets the tolerance.
    """
    C = np.asarray(C, float)
    d = np.asarray(d, float)
    theta = np.array(theta0, dtype=float, copy=True)
    eta = np.array(eta0, dtype=float, copy=True)
    if np.any(theta < 0) or np.any(eta < 0):
        raise ValueError("initial primal and dual iterates must be nonnegative")
    gamma = cfg.resolved_gamma(lam1)
    tau = cfg.step
    j = 0
    for j in range(1, cfg.max_iter + 1):
        if cfg.schedule == "sqrt":
            tau = cfg.step / np.sqrt(j)
        h = np.maximum(eta - gamma * theta, 0.0)
        g_theta = np.einsum("...ij,...j->...i", C, theta) + d - h
        g_eta = (h - eta) / gamma
        theta = np.maximum(theta - tau * g_theta, 0.0)
        eta = np.maximum(eta + tau * g_eta, 0.0)
        if j % 64 == 0 or j == cfg.max_iter:
            big = max(np.abs(theta).max(initial=0.0), np.abs(eta).max(initial=0.0))
            if not np.isfinite(big) or big > 1e12:
                raise SolverDivergenceError(
                    f"primal-dual iterates diverged at step {j}; reduce the step size (tau={cfg.step})")
            if cfg.tol is not None:
                res = kkt_residual(C, d, theta, _recovered_multiplier(C, d, theta))
                if np.all(res <= cfg.tol):
                    break
    return theta, eta, j


def solve_pd(qp, theta0=None, eta0=None, cfg=PdSolverConfig()):
    """Solve one lower-level QP by the projected augmented primal-dual method.

    The last iterate is returned whether or not the tolerance was reached.
    """
    n = qp.size
    theta0 = np.zeros(n) if theta0 is None else theta0
    eta0 = np.zeros(n) if eta0 is None else eta0
    theta, eta_it, its = solve_pd_batch(qp.C, qp.d, theta0, eta0, cfg, qp.lam1)
    return _package(qp.C, qp.d, theta, _recovered_multiplier(qp.C, qp.d, theta), its, eta_it)


def _package(C, d, theta, eta, iterations, dual=None):
    act = active_set(theta)
    return InverseSolution(
        theta=theta,
        eta=eta,
        active=act,
        kkt_residual=float(kkt_residual(C, d, theta, eta)),
        iterations=iterations,
        strict_complementarity=not bool(np.any(_degenerate(theta, eta, act))),
        dual_iterate=dual,
    )


def _enumerate(C, d):
    n = len(d)
    best = None
    for k in range(n + 1):
        for free in itertools.combinations(range(n), k):
            free = list(free)
            theta = np.zeros(n)
            if free:
                theta[free] = np.linalg.solve(C[np.ix_(free, free)], -d[free])
            eta = C @ theta + d
            eta[free] = 0.0
            scale = 1e-10 * max(1.0, np.abs(d).max(), np.abs(theta).max())
            if np.all(theta >= -scale) and np.all(eta >= -scale):
                return np.maximum(theta, 0.0), np.maximum(eta, 0.0)
            viol = max(-theta.min(), -eta.min())
            if best is None or viol < best[0]:
                best = (viol, theta, eta)
    raise np.linalg.LinAlgError(
        f"no active set satisfies the KKT conditions (best violation {best[0]:.3g})")


SMALL_ENUM = 4


def _enumerate_batch(Cf, df):
    """Vectorised active-set enumeration for a stack of tiny QPs.

    Every support is solved at once and the one with the smallest KKT
    violation is kept; for positive definite ``C`` exactly one is feasible.
    """
    B, n = df.shape
    masks = np.array(list(itertools.product((False, True), repeat=n)))  # (S, n)
    both = masks[:, None, :, None] & masks[:, None, None, :]
    M = np.where(both, Cf[None], np.eye(n))
    rhs = np.where(masks[:, None, :], -df[None], 0.0)
    th = np.where(masks[:, None, :], np.linalg.solve(M, rhs[..., None])[..., 0], 0.0)
    et = np.where(masks[:, None, :], 0.0, np.einsum("bij,sbj->sbi", Cf, th) + df[None])
    viol = np.maximum(-th, -et).max(axis=2)  # (S, B)
    pick = np.argmin(viol, axis=0)
    idx = np.arange(B)
    return th[pick, idx], et[pick, idx]


def solve_exact_batch(C, d, max_iter=None, free0=None):
    """Exact solutions of a stack of strictly convex QPs by block principal pivoting.

    Solves the linear complementarity problem ``eta = C theta + d``,
    ``theta, eta >= 0``, ``theta * eta = 0`` (Judice-Pires block pivoting with
    the single-pivot backup rule, which terminates for positive definite C).

    ``free0`` is an optional initial guess of the support (``theta > 0``),
    e.g. the previous solution when solving a slowly changing sequence;
    by default indices with ``d < 0`` start free.

    Returns ``(theta, eta)`` with the batch shape of ``d``.
    """
    C = np.asarray(C, dtype=float)
    d = np.asarray(d, dtype=float)
    shape = d.shape
    n = shape[-1]
    Cf = C.reshape(-1, n, n)
    df = d.reshape(-1, n)
    B = len(df)
    if n <= SMALL_ENUM and B <= 64:
        # tiny stacks: one vectorised pass beats the pivoting loop overhead
        theta, eta = _enumerate_batch(Cf, df)
        return np.maximum(theta, 0.0).reshape(shape), np.maximum(eta, 0.0).reshape(shape)
    free = (df < 0) if free0 is None else np.array(np.broadcast_to(free0, d.shape), bool).reshape(B, n)
    theta = np.zeros((B, n))
    eta = df.copy()
    ninf = np.full(B, n + 1)
    p = np.full(B, 3)
    todo = np.arange(B)
    eye = np.eye(n)
    max_iter = max_iter or 50 * (n + 1) + 100
    scale = 1e-12 * np.maximum(1.0, np.abs(df).max(axis=1))
    for _ in range(max_iter):
        if len(todo) == 0:
            break
        fr = free[todo]
        both = fr[:, :, None] & fr[:, None, :]
        # identity on the active block decouples it from the free block
        M = np.where(both, Cf[todo], eye)
        rhs = np.where(fr, -df[todo], 0.0)
        th = np.linalg.solve(M, rhs[..., None])[..., 0]
        th = np.where(fr, th, 0.0)
        et = np.einsum("bij,bj->bi", Cf[todo], th) + df[todo]
        et = np.where(fr, 0.0, et)
        theta[todo] = th
        eta[todo] = et
        tol = scale[todo][:, None] * np.maximum(1.0, np.abs(th).max(axis=1, keepdims=True))
        bad = (fr & (th < -tol)) | (~fr & (et < -tol))
        nbad = bad.sum(axis=1)
        done = nbad == 0
        k = np.flatnonzero(~done)
        b = todo[k]
        better = nbad[k] < ninf[b]
        block = better | (p[b] > 0)
        ninf[b[better]] = nbad[k[better]]
        p[b] = np.where(better, 3, np.where(block, p[b] - 1, p[b]))
        # block pivot on every infeasible index, or the single-pivot backup
        # rule on the last one when the block rule has stalled
        flip = np.where(block[:, None], bad[k], False)
        single = k[~block]
        last = n - 1 - np.argmax(bad[single][:, ::-1], axis=1)
        flip[np.flatnonzero(~block), last] = True
        free[b] ^= flip
        todo = todo[~done]
    else:
        if len(todo):
            raise np.linalg.LinAlgError("block principal pivoting did not terminate")
    return np.maximum(theta, 0.0).reshape(shape), np.maximum(eta, 0.0).reshape(shape)


def solve_exact(qp, method="auto"):
    """Exact KKT point of the lower-level QP.

    ``method`` is ``"enumerate"`` (try every active set; at most 12
    unknowns), ``"pivot"`` (block principal pivoting) or ``"auto"``.
    """
    C = np.asarray(qp.C, float)
    d = np.asarray(qp.d, float)
    n = len(d)
    if method == "auto":
        method = "enumerate" if n <= 8 else "pivot"
    if method == "enumerate":
        if n > 12:
            raise ValueError("active-set enumeration is limited to 12 unknowns")
        theta, eta = _enumerate(C, d)
    elif method == "pivot":
        theta, eta = solve_exact_batch(C, d)
    else:
        raise ValueError(f"unknown method {method!r}")
    return _package(C, d, theta, eta, 0)


@dataclass(frozen=True)
class LowerLevelConfig:
    """Regularisation weights and the solver used for the lower-level problem.

    ``solver`` is ``"exact"`` (block principal pivoting), ``"pd"`` (the
    primal-dual iteration with ``pd``) or ``"auto"``, which picks the exact
    solver; pivoting stays cheap at the problem sizes used here.
    """

    lam1: float = 0.01
    lam2: float = 0.01
    solver: str = "auto"
    pd: PdSolverConfig = field(default_factory=PdSolverConfig)

    def __post_init__(self):
        if not (self.lam1 >= 0 and self.lam2 >= 0):
            raise ValueError("regularisation weights must be >= 0")
        if self.solver not in ("auto", "exact", "pd"):
            raise ValueError(f"unknown lower-level solver {self.solver!r}")


def solve_batch(C, d, cfg, theta0=None):
    """Solve a stack of lower-level QPs according to ``cfg``; returns ``theta``."""
    if cfg.solver == "pd":
        theta0 = np.zeros(np.shape(d)) if theta0 is None else theta0
        theta, _, _ = solve_pd_batch(C, d, theta0, np.zeros(np.shape(d)), cfg.pd, cfg.lam1)
        return theta
    return solve_exact_batch(C, d)[0]
