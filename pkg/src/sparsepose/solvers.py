"""Block updates for the penalized likelihood: C by APG, R on SO(3)^n, T and Z in closed form."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geom import (
    ORTHOGRAPHIC, PERSPECTIVE, GeometryError, Hyperparams, ModelParams, PoseDictionary,
    PoseSequence2D, projection_rows, shapes, targets,
)


class SolverError(RuntimeError):
    """A block update met corrupted input or a degenerate configuration."""


@dataclass(frozen=True)
class ApgReport:
    iterations: int
    objective: float
    rel_change: float
    converged: bool


@dataclass(frozen=True)
class RotationStepReport:
    iterations: int
    grad_norm: float
    objective_before: float
    objective_after: float


def soft_threshold(x: np.ndarray, thresh: float) -> np.ndarray:
    """Proximal operator of ``thresh * ||.||_1``; ``|x| <= thresh`` maps to exactly 0."""
    return np.sign(x) * np.maximum(np.abs(x) - thresh, 0.0)


def apg_l1(f: Callable, grad: Callable, x0: np.ndarray, weight: float, lipschitz: float,
           max_iter: int = 500, tol: float = 1e-8):
    """Minimize ``f(x) + weight * ||x||_1`` with monotone FISTA.

    Function-value guarded (the returned iterate never has a larger objective
    than ``x0``), with adaptive restart whenever a proximal step fails to
    decrease the objective. Step size starts at ``1 / lipschitz`` and is
    halved by backtracking if the quadratic upper bound is violated.

    Parameters
    ----------
    f, grad : callable
        Smooth part and its gradient.
    x0 : ndarray
        Warm start.
    weight : float
        L1 weight.
    lipschitz : float
        Upper bound on the Lipschitz constant of ``grad``.

    Returns
    -------
    x : ndarray
    report : ApgReport
    """
    def F(x):
        return f(x) + weight * np.abs(x).sum()

    step = 1.0 / max(lipschitz, 1e-300)
    x = np.array(x0, dtype=float)
    Fx = F(x)
    y, t = x.copy(), 1.0
    rel, converged, it = np.inf, False, 0
    for it in range(1, max_iter + 1):
        fy, gy = f(y), grad(y)
        if not (np.isfinite(fy) and np.all(np.isfinite(gy))):
            raise SolverError("non-finite gradient in APG")
        for _ in range(100):
            z = soft_threshold(y - step * gy, step * weight)
            d = z - y
            fz = f(z)
            if not np.isfinite(fz):
                raise SolverError("non-finite objective in APG")
            if fz <= fy + np.vdot(gy, d) + np.vdot(d, d) / (2 * step) + 1e-15 * abs(fy):
                break
            step *= 0.5
        else:
            raise SolverError("APG backtracking failed to find a step")
        Fz = fz + weight * np.abs(z).sum()
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        if Fz <= Fx:
            x_prev, x = x, z
            rel = abs(Fx - Fz) / max(1.0, abs(Fx))
            Fx = Fz
            y = x + ((t - 1.0) / t_next) * (x - x_prev)
            t = t_next
        else:
            # restart from the guarded iterate
            rel = 0.0 if np.array_equal(y, x) else np.inf
            y, t = x.copy(), 1.0
        small_step = np.sqrt(np.vdot(d, d)) <= np.sqrt(tol) * max(1.0, np.sqrt(np.vdot(x, x)))
        if rel < tol and small_step:
            converged = True
            break
    return x, ApgReport(it, float(Fx), float(rel), converged)


# ---------------------------------------------------------------------------
# C step


def _frame_quadratics(params: ModelParams, W: PoseSequence2D, dictionary: PoseDictionary,
                      hyper: Hyperparams):
    """Per-frame Gram matrices ``G_t``, linear terms ``b_t`` and constants.

    The masked data term of frame t is ``c^T G_t c - 2 b_t^T c + a_t``.
    """
    mask = W.mask()
    P = projection_rows(params)
    A = (targets(params, W, hyper) - params.T[:, :, None]) * mask[:, None, :]
    Q = np.einsum("nde,kep->nkdp", P, dictionary.atoms) * mask[:, None, None, :]
    G = np.einsum("nkdp,nldp->nkl", Q, Q)
    b = np.einsum("nkdp,ndp->nk", Q, A)
    a = np.einsum("ndp,ndp->n", A, A)
    return G, b, a


def _difference_norm(n: int) -> float:
    """Largest eigenvalue of ``D^T D`` for the forward difference over ``n`` frames (< 4)."""
    if n < 2:
        return 0.0
    return 2.0 - 2.0 * np.cos(np.pi * (n - 1) / n)


def _smooth_grad(X: np.ndarray, axis: int) -> np.ndarray:
    """Gradient of ``0.5 * ||diff(X, axis)||^2``."""
    g = np.zeros_like(X)
    if X.shape[axis] < 2:
        return g
    d = np.diff(X, axis=axis)
    lo = [slice(None)] * X.ndim
    hi = [slice(None)] * X.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    g[tuple(lo)] -= d
    g[tuple(hi)] += d
    return g


def update_C(params: ModelParams, W_eff: PoseSequence2D, dictionary: PoseDictionary,
             hyper: Hyperparams):
    """Solve the convex coefficient subproblem with R, T (and Z) fixed."""
    G, b, a = _frame_quadratics(params, W_eff, dictionary, hyper)
    nu, beta = hyper.nu, hyper.beta
    if not (np.all(np.isfinite(G)) and np.all(np.isfinite(b)) and np.all(np.isfinite(a))):
        raise SolverError("non-finite data in the coefficient step")
    a_sum = float(a.sum())

    def gram(C):
        return np.matmul(G, C.T[:, :, None])[:, :, 0].T  # (k, n)

    def f(C):
        quad = float(np.sum(C * (gram(C) - 2.0 * b.T))) + a_sum
        d = C[:, 1:] - C[:, :-1]
        return 0.5 * nu * quad + 0.5 * beta * float(np.sum(d * d))

    def grad(C):
        return nu * (gram(C) - b.T) + beta * _smooth_grad(C, 1)

    lam = max(float(np.linalg.eigvalsh(G).max()), 0.0)
    lipschitz = nu * lam + beta * _difference_norm(params.n)
    if lipschitz <= 0:
        # no data and no smoothing: the L1 term alone is minimized at zero
        C = np.zeros_like(params.C)
        return C, ApgReport(0, 0.0, 0.0, True)
    C, report = apg_l1(f, grad, params.C, hyper.alpha, lipschitz,
                       hyper.apg_max_iter, hyper.apg_tol)
    return C, report


# ---------------------------------------------------------------------------
# R step


def skew(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X - np.swapaxes(X, -1, -2))


def so3_exp(Omega: np.ndarray) -> np.ndarray:
    """Matrix exponential of skew-symmetric ``(..., 3, 3)`` arrays (Rodrigues)."""
    w = np.stack([Omega[..., 2, 1], Omega[..., 0, 2], Omega[..., 1, 0]], axis=-1)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    small = theta < 1e-6
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(th) / th)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(th)) / th ** 2)
    eye = np.broadcast_to(np.eye(3), Omega.shape)
    return eye + a * Omega + b * (Omega @ Omega)


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Closest rotation(s) in Frobenius norm, with the det=+1 guard."""
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    d = np.where(d == 0, 1.0, d)
    D = np.ones(U.shape[:-1])
    D[..., -1] = d
    return (U * D[..., None, :]) @ Vt


class _RotationProblem:
    """Data term and smoothness of the rotation block, everything else fixed."""

    def __init__(self, params, W, dictionary, hyper):
        self.rows = 2 if params.camera == ORTHOGRAPHIC else 3
        self.mask = W.mask()[:, None, :]
        self.S = shapes(params.C, dictionary.atoms)
        self.A = (targets(params, W, hyper) - params.T[:, :, None]) * self.mask
        self.nu, self.gamma = hyper.nu, hyper.gamma

    def residual(self, R):
        return self.A - (R[:, :self.rows, :] @ self.S) * self.mask

    def value(self, R):
        E = self.residual(R)
        smooth = np.sum(np.diff(R, axis=0) ** 2) if R.shape[0] > 1 else 0.0
        return 0.5 * self.nu * float(np.sum(E * E)) + 0.5 * self.gamma * float(smooth)

    def euclidean_grad(self, R):
        E = self.residual(R)
        g = np.zeros_like(R)
        g[:, :self.rows, :] = -self.nu * (E @ np.swapaxes(self.S, 1, 2))
        return g + self.gamma * _smooth_grad(R, 0)

    def riemannian_grad(self, R):
        """Skew-symmetric ``Omega_t`` with grad_t = R_t Omega_t."""
        return skew(np.swapaxes(R, 1, 2) @ self.euclidean_grad(R))

    def lipschitz(self):
        ss = np.einsum("ndp,ndp->n", self.S, self.S).max() if self.S.size else 0.0
        return self.nu * float(ss) + self.gamma * _difference_norm(self.S.shape[0])


def rotation_gradient(params: ModelParams, W_eff: PoseSequence2D, dictionary: PoseDictionary,
                      hyper: Hyperparams) -> np.ndarray:
    """Riemannian gradient of the R-subproblem as skew matrices ``(n, 3, 3)``."""
    return _RotationProblem(params, W_eff, dictionary, hyper).riemannian_grad(params.R)


def rotation_subproblem_value(params, W_eff, dictionary, hyper, R=None) -> float:
    prob = _RotationProblem(params, W_eff, dictionary, hyper)
    return prob.value(params.R if R is None else R)


def update_R(params: ModelParams, W_eff: PoseSequence2D, dictionary: PoseDictionary,
             hyper: Hyperparams):
    """Riemannian gradient descent with Armijo backtracking on SO(3)^n.

    Tangent directions are ``R_t Omega_t`` with skew ``Omega_t``; the
    retraction is the exponential map, followed by an SVD re-orthonormalization
    when round-off drifts past 1e-12.
    """
    prob = _RotationProblem(params, W_eff, dictionary, hyper)
    R = params.R.copy()
    f0 = f = prob.value(R)
    step = 1.0 / max(prob.lipschitz(), 1e-12)
    gnorm, it = np.inf, 0
    for it in range(1, hyper.rot_max_iter + 1):
        Om = prob.riemannian_grad(R)
        if not np.all(np.isfinite(Om)):
            bad = int(np.argmax(~np.isfinite(Om).all(axis=(1, 2))))
            raise SolverError(f"non-finite rotation gradient at frame {bad}")
        g2 = float(np.sum(Om * Om))
        gnorm = np.sqrt(g2)
        if gnorm <= hyper.rot_tol:
            it -= 1
            break
        accepted = False
        for _ in range(60):
            trial = R @ so3_exp(-step * Om)
            ft = prob.value(trial)
            if ft <= f - 1e-4 * step * g2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        drift = np.abs(np.swapaxes(trial, 1, 2) @ trial - np.eye(3)).max()
        if drift > 1e-12:
            fixed = nearest_rotation(trial)
            ff = prob.value(fixed)
            if ff <= ft:
                trial, ft = fixed, ff
        if not np.all(np.isfinite(trial)):
            raise SolverError("rotation retraction produced non-finite values")
        R, f = trial, ft
        step *= 2.0
    else:
        gnorm = float(np.sqrt(np.sum(prob.riemannian_grad(R) ** 2)))
    return R, RotationStepReport(it, float(gnorm), float(f0), float(f))


# ---------------------------------------------------------------------------
# closed-form T and Z


def update_T(params: ModelParams, W_eff: PoseSequence2D, dictionary: PoseDictionary,
             hyper: Hyperparams) -> np.ndarray:
    """Row mean of ``target_t - R_t S_t`` over visible joints."""
    mask = W_eff.mask()
    S = shapes(params.C, dictionary.atoms)
    D = targets(params, W_eff, hyper) - projection_rows(params) @ S
    counts = mask.sum(axis=1)
    T = params.T.copy()
    seen = counts > 0
    T[seen] = np.einsum("ndp,np->nd", D, mask)[seen] / counts[seen, None]
    return T


def update_Z(params: ModelParams, W_eff: PoseSequence2D, dictionary: PoseDictionary,
             hyper: Hyperparams) -> np.ndarray:
    """Per-joint depth along each viewing ray; the root depth is pinned to 1."""
    if params.camera != PERSPECTIVE:
        raise GeometryError("depths are only defined for the perspective camera")
    U = np.einsum("ij,njp->nip", hyper.K_inv(), W_eff.homogeneous())
    V = params.R @ shapes(params.C, dictionary.atoms) + params.T[:, :, None]
    uu = np.einsum("ndp,ndp->np", U, U)
    uv = np.einsum("ndp,ndp->np", U, V)
    vis = W_eff.mask() > 0
    vis_free = vis.copy()
    vis_free[:, dictionary.skeleton.root_index] = False
    bad = np.argwhere(vis_free & (uu < 1e-12))
    if bad.size:
        t, j = bad[0]
        raise SolverError(f"degenerate viewing ray at frame {t}, joint {j}")
    Z = np.where(vis, uv / np.where(vis, uu, 1.0), params.Z)
    Z[:, dictionary.skeleton.root_index] = 1.0
    return Z


__all__ = [
    "SolverError", "ApgReport", "RotationStepReport", "soft_threshold", "apg_l1",
    "update_C", "update_R", "update_T", "update_Z", "skew", "so3_exp", "nearest_rotation",
    "rotation_gradient", "rotation_subproblem_value",
]
