"""EM over latent 2D joints: heat-map posterior means and the outer loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bcd import MONOTONE_SLACK, InitStrategy, InvariantViolation, initialize, run_bcd
from .geom import (
    CROP_SIZE, ORTHOGRAPHIC, PERSPECTIVE, GeometryError, Hyperparams, ModelParams, PoseDictionary,
    PoseSequence2D, objective, project, shapes,
)
from .solvers import so3_exp, skew

log = logging.getLogger(__name__)

TRUNCATION_SIGMAS = 4.0


@dataclass(frozen=True)
class GridMap:
    """Affine map from pixel (row, col) to image coordinates, at pixel centres:
    ``x = x0 + sx * (col + 0.5)``, ``y = y0 + sy * (row + 0.5)``."""

    sx: float
    sy: float
    x0: float = 0.0
    y0: float = 0.0

    @classmethod
    def crop(cls, height: int, width: int, size: float = CROP_SIZE) -> "GridMap":
        """Grid spanning the normalized crop ``[0, size]^2``."""
        return cls(size / width, size / height)

    def centers(self, height: int, width: int):
        xs = self.x0 + self.sx * (np.arange(width) + 0.5)
        ys = self.y0 + self.sy * (np.arange(height) + 0.5)
        return xs, ys

    def to_pixel(self, x, y):
        return (np.asarray(x) - self.x0) / self.sx - 0.5, (np.asarray(y) - self.y0) / self.sy - 0.5


@dataclass(frozen=True)
class HeatMapStack:
    values: np.ndarray  # (n, p, H, W)
    grid_map: Optional[GridMap] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 4:
            raise GeometryError(f"heat maps must be (n, p, H, W), got {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise GeometryError("heat maps must be finite and non-negative")
        empty = np.argwhere(~(v > 0).any(axis=(2, 3)))
        if empty.size:
            t, j = empty[0]
            raise GeometryError(f"heat map of frame {t}, joint {j} has no positive value")
        object.__setattr__(self, "values", v)
        if self.grid_map is None:
            object.__setattr__(self, "grid_map", GridMap.crop(v.shape[2], v.shape[3]))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape[2:]

    def centers(self):
        return self.grid_map.centers(*self.shape)

    def argmax(self) -> PoseSequence2D:
        """Location of each channel's maximum (first in row-major order on ties)."""
        n, p, H, W = self.values.shape
        flat = self.values.reshape(n, p, H * W).argmax(axis=2)
        rows, cols = np.divmod(flat, W)
        xs, ys = self.centers()
        return PoseSequence2D(np.stack([xs[cols], ys[rows]], axis=1))


def posterior(heatmaps: HeatMapStack, mu: np.ndarray, nu: float):
    """Per-channel posterior over pixels ``h * g(.; mu, nu)``, normalized.

    ``mu`` is ``(n, 2, p)``. The Gaussian is truncated at 4 standard
    deviations; channels with no heat-map mass inside the truncation fall
    back to the heat map alone and are flagged.

    Returns
    -------
    weights : ndarray (n, p, H, W)
    fallback : ndarray (n, p) of bool
    """
    h = heatmaps.values
    xs, ys = heatmaps.centers()
    dx2 = (xs[None, None, :] - mu[:, 0, :, None]) ** 2  # (n, p, W)
    dy2 = (ys[None, None, :] - mu[:, 1, :, None]) ** 2  # (n, p, H)
    d2 = dy2[..., :, None] + dx2[..., None, :]
    inside = (d2 <= TRUNCATION_SIGMAS ** 2 / nu) & (h > 0)
    fallback = ~inside.any(axis=(2, 3))
    # shift by the smallest supported distance so the exponent cannot underflow to 0
    dmin = np.where(inside, d2, np.inf).min(axis=(2, 3))
    dmin = np.where(fallback, 0.0, dmin)
    g = np.where(inside, np.exp(-0.5 * nu * (d2 - dmin[..., None, None])), 0.0)
    w = h * g
    w = np.where(fallback[..., None, None], h, w)
    w = w / w.sum(axis=(2, 3), keepdims=True)
    return w, fallback


def _posterior_mean(heatmaps: HeatMapStack, weights: np.ndarray) -> np.ndarray:
    xs, ys = heatmaps.centers()
    ex = np.einsum("nphw,w->np", weights, xs)
    ey = np.einsum("nphw,h->np", weights, ys)
    return np.stack([ex, ey], axis=1)


def expected_W(heatmaps: HeatMapStack, params: ModelParams, dictionary: PoseDictionary,
               hyper: Hyperparams, return_fallback: bool = False):
    """Posterior mean of every joint given its heat map and the current model."""
    if heatmaps.n != params.n or heatmaps.p != dictionary.p:
        raise GeometryError("heat maps do not match the parameters")
    mu = project(params, dictionary, hyper).coords
    weights, fallback = posterior(heatmaps, mu, hyper.nu)
    W = PoseSequence2D(_posterior_mean(heatmaps, weights))
    if return_fallback:
        return W, fallback
    return W


def _joint_targets(params, dictionary, hyper, xs, ys):
    """Affine map from a 2D location to the loss target of each joint.

    Returns ``(offset, Ax, Ay, model)`` such that the residual of joint j at
    ``(x, y)`` is ``offset_j + x * Ax_j + y * Ay_j - model_j``.
    """
    n, p = params.n, dictionary.p
    S = shapes(params.C, dictionary.atoms)
    if params.camera == ORTHOGRAPHIC:
        model = params.R[:, :2, :] @ S + params.T[:, :, None]
        Ax = np.zeros((n, 2, p))
        Ay = np.zeros((n, 2, p))
        Ax[:, 0, :] = 1.0
        Ay[:, 1, :] = 1.0
        return np.zeros((n, 2, p)), Ax, Ay, model
    Kinv = hyper.K_inv()
    model = params.R @ S + params.T[:, :, None]
    z = params.Z[:, None, :]
    return Kinv[:, 2][None, :, None] * z, Kinv[:, 0][None, :, None] * z, \
        Kinv[:, 1][None, :, None] * z, model


def _expected_vs_plugin_gap(heatmaps, weights, params, dictionary, hyper):
    xs, ys = heatmaps.centers()
    off, Ax, Ay, model = _joint_targets(params, dictionary, hyper, xs, ys)
    base = off - model  # (n, d, p)
    # residual at pixel (r, c): base + xs[c] * Ax + ys[r] * Ay
    res = (base[..., None, None] + Ax[..., None, None] * xs[None, None, None, None, :]
           + Ay[..., None, None] * ys[None, None, None, :, None])
    sq = np.sum(res ** 2, axis=1)  # (n, p, H, W)
    expected_loss = 0.5 * hyper.nu * float(np.sum(weights * sq))
    mean = _posterior_mean(heatmaps, weights)
    plug = base + mean[:, 0:1, :] * Ax + mean[:, 1:2, :] * Ay
    plugin_loss = 0.5 * hyper.nu * float(np.sum(plug ** 2))
    return expected_loss - plugin_loss


def check_expectation_identity(heatmaps: HeatMapStack, params_a: ModelParams,
                               params_b: ModelParams, dictionary: PoseDictionary,
                               hyper: Hyperparams, rng_seed: int = 0,
                               params_prime: Optional[ModelParams] = None) -> float:
    """``|D(a) - D(b)|`` where ``D(theta)`` is the posterior-expected loss minus
    the loss at the posterior mean, both on the pixel grid.

    The posterior is taken at ``params_prime``; when omitted it is drawn by
    perturbing ``params_a`` with ``rng_seed``. Under the perspective camera
    the gap depends on the depths, so it is only constant across parameter
    sets that share ``Z``.
    """
    if params_a.camera != params_b.camera:
        raise GeometryError("parameter sets must share the camera mode")
    if params_prime is None:
        rng = np.random.default_rng(rng_seed)
        params_prime = params_a.replace(
            C=params_a.C + 0.1 * rng.standard_normal(params_a.C.shape),
            R=params_a.R @ so3_exp(skew(0.1 * rng.standard_normal(params_a.R.shape))))
    mu = project(params_prime, dictionary, hyper).coords
    weights, _ = posterior(heatmaps, mu, hyper.nu)
    da = _expected_vs_plugin_gap(heatmaps, weights, params_a, dictionary, hyper)
    db = _expected_vs_plugin_gap(heatmaps, weights, params_b, dictionary, hyper)
    return abs(da - db)


@dataclass
class EmTrace:
    surrogate_before: list = field(default_factory=list)
    surrogate_after: list = field(default_factory=list)
    expected: list = field(default_factory=list)
    fallbacks: list = field(default_factory=list)
    bcd: list = field(default_factory=list)
    termination: str = ""

    @property
    def iterations(self) -> int:
        return len(self.surrogate_after)

    def to_dict(self) -> dict:
        return {
            "surrogate_before": list(self.surrogate_before),
            "surrogate_after": list(self.surrogate_after),
            "fallbacks": [int(f) for f in self.fallbacks],
            "bcd": [t.to_dict() for t in self.bcd],
            "termination": self.termination,
        }


def run_em(heatmaps: HeatMapStack, dictionary: PoseDictionary, hyper: Hyperparams,
           strategy: InitStrategy = InitStrategy(), camera: str = ORTHOGRAPHIC):
    """Alternate posterior means of the 2D joints (E) and BCD on them (M).

    The default initialization runs the mean-pose initializer on the
    per-channel heat-map maxima. Stops when the E-step output stops changing,
    when the surrogate ``L(theta; E[W]) + R(theta)`` settles to ``bcd_tol``,
    or after ``em_max_iter`` rounds.
    """
    if camera == PERSPECTIVE and hyper.calibration is None:
        raise GeometryError("perspective camera requires a calibration matrix")
    W0 = heatmaps.argmax()
    params = initialize(W0, dictionary, hyper, strategy, camera)
    trace = EmTrace(termination="max_iter")
    previous_W = None
    for it in range(hyper.em_max_iter):
        W_exp, fallback = expected_W(heatmaps, params, dictionary, hyper, return_fallback=True)
        if previous_W is not None and np.array_equal(W_exp.coords, previous_W.coords):
            trace.termination = "fixed_point"
            break
        before = objective(params, W_exp, dictionary, hyper)
        params, bcd_trace = run_bcd(W_exp, dictionary, hyper, params)
        after = bcd_trace.objective[-1]
        if after > before + MONOTONE_SLACK:
            raise InvariantViolation(f"M-step raised the surrogate from {before!r} to {after!r}")
        trace.surrogate_before.append(before)
        trace.surrogate_after.append(after)
        trace.expected.append(W_exp)
        trace.fallbacks.append(int(fallback.sum()))
        trace.bcd.append(bcd_trace)
        previous_W = W_exp
        if it > 0:
            prev = trace.surrogate_after[-2]
            if abs(prev - after) / max(1.0, abs(prev)) < hyper.bcd_tol:
                trace.termination = "tol"
                break
    log.debug("em finished after %d iterations (%s)", trace.iterations, trace.termination)
    return params, trace


__all__ = ["GridMap", "HeatMapStack", "posterior", "expected_W", "check_expectation_identity",
           "EmTrace", "run_em", "TRUNCATION_SIGMAS"]
