"""Initialization and the block coordinate descent driver."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geom import (
    ORTHOGRAPHIC, PERSPECTIVE, GeometryError, Hyperparams, ModelParams, PoseDictionary,
    PoseSequence2D, objective,
)
from .solvers import so3_exp, skew, update_C, update_R, update_T, update_Z

log = logging.getLogger(__name__)

MONOTONE_SLACK = 1e-10


class InvariantViolation(RuntimeError):
    """The objective increased during a block step."""


class DegenerateInitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class InitStrategy:
    """How :func:`initialize` picks the starting parameters.

    ``kind`` is ``"mean_pose_rigid"``, ``"provided_params"`` or
    ``"ground_truth_perturbed"``; the last two read ``params`` and the last
    one also ``sigma`` and ``seed``.
    """

    kind: str = "mean_pose_rigid"
    params: Optional[ModelParams] = None
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("mean_pose_rigid", "provided_params", "ground_truth_perturbed"):
            raise ValueError(f"unknown init strategy {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.kind != "mean_pose_rigid" and self.params is None:
            raise ValueError(f"{self.kind} needs params")

    @classmethod
    def mean_pose_rigid(cls):
        return cls("mean_pose_rigid")

    @classmethod
    def provided(cls, params: ModelParams):
        return cls("provided_params", params)

    @classmethod
    def ground_truth_perturbed(cls, params: ModelParams, sigma: float, seed: int = 0):
        return cls("ground_truth_perturbed", params, sigma, seed)


@dataclass
class BcdTrace:
    objective: list = field(default_factory=list)
    blocks: list = field(default_factory=list)
    termination: str = ""

    @property
    def iterations(self) -> int:
        return len(self.blocks)

    def to_dict(self) -> dict:
        return {"objective": list(self.objective), "blocks": [dict(b) for b in self.blocks],
                "termination": self.termination}


def orthographic_procrustes(W2: np.ndarray, S: np.ndarray):
    """Rotation whose first two rows best align centered ``S`` (3 x p) to ``W2`` (2 x p).

    The 2 x 3 least-squares fit is projected onto the nearest pair of
    orthonormal rows. Returns ``(R, ok)``; ``ok`` is False when the 2 x 3 cross-covariance has
    rank below 2, in which case ``R`` is the identity.
    """
    Wc = W2 - W2.mean(axis=1, keepdims=True)
    Sc = S - S.mean(axis=1, keepdims=True)
    M = Wc @ Sc.T
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[0] <= 0 or sv[1] <= 1e-12 * sv[0]:
        return np.eye(3), False
    # whiten by the pose's second moment so an exact scaled view is recovered
    # exactly; the plain polar factor of M is biased for anisotropic poses
    A = Sc @ Sc.T
    ev = np.linalg.eigvalsh(A)
    if ev[0] > 1e-9 * ev[-1]:
        M = np.linalg.solve(A, M.T).T
    U, sv, Vt = np.linalg.svd(M, full_matrices=False)
    R2 = U @ Vt
    R = np.vstack([R2, np.cross(R2[0], R2[1])])
    return R, True


def _mean_pose(dictionary: PoseDictionary) -> np.ndarray:
    code = dictionary.mean_pose_code
    if code is None:
        # without a stored code fall back to the equal-weight combination
        code = np.full(dictionary.k, 1.0 / dictionary.k)
    return code


def initialize(W: PoseSequence2D, dictionary: PoseDictionary, hyper: Hyperparams,
               strategy: InitStrategy = InitStrategy(), camera: str = ORTHOGRAPHIC) -> ModelParams:
    """Starting parameters for :func:`run_bcd`.

    ``mean_pose_rigid`` places the dictionary's mean pose in every frame,
    rotated by orthographic Procrustes onto the 2D joints, scaled by least
    squares and translated by the closed-form T update. Depths start at 1.
    """
    if strategy.kind == "provided_params":
        return strategy.params
    if strategy.kind == "ground_truth_perturbed":
        return _perturb(strategy.params, strategy.sigma, strategy.seed, dictionary)

    n, p = W.n, W.p
    if p != dictionary.p:
        raise GeometryError(f"2D poses have {p} joints, dictionary has {dictionary.p}")
    code = _mean_pose(dictionary)
    S = np.einsum("k,kdp->dp", code, dictionary.atoms)
    mask = W.mask() > 0
    if camera == PERSPECTIVE:
        U = np.einsum("ij,njp->nip", hyper.K_inv(), W.homogeneous())
        obs = U[:, :2, :]
    else:
        obs = W.coords
    R = np.empty((n, 3, 3))
    scale = np.ones(n)
    for t in range(n):
        vis = mask[t]
        Rt, ok = (np.eye(3), False) if vis.sum() < 3 else orthographic_procrustes(obs[t][:, vis], S[:, vis])
        if not ok:
            warnings.warn(f"degenerate Procrustes at frame {t}; using identity rotation",
                          DegenerateInitWarning, stacklevel=2)
        R[t] = Rt
        if vis.sum() >= 2:
            proj = Rt[:2] @ S[:, vis]
            pc = proj - proj.mean(axis=1, keepdims=True)
            oc = obs[t][:, vis] - obs[t][:, vis].mean(axis=1, keepdims=True)
            den = float(np.sum(pc * pc))
            if den > 0 and np.sum(pc * oc) > 0:
                scale[t] = float(np.sum(pc * oc)) / den
    C = np.outer(code, np.full(n, np.median(scale)))
    if camera == PERSPECTIVE:
        params = ModelParams(C, R, np.zeros((n, 3)), np.ones((n, p)), PERSPECTIVE)
    else:
        params = ModelParams(C, R, np.zeros((n, 2)), None, ORTHOGRAPHIC)
    return params.replace(T=update_T(params, W, dictionary, hyper))


def _perturb(params: ModelParams, sigma: float, seed: int, dictionary: PoseDictionary) -> ModelParams:
    if sigma == 0:
        return params
    rng = np.random.default_rng(seed)
    n = params.n
    C = params.C + sigma * rng.standard_normal(params.C.shape)
    Om = skew(rng.standard_normal((n, 3, 3))) * sigma
    R = params.R @ so3_exp(Om)
    T = params.T + sigma * rng.standard_normal(params.T.shape)
    Z = params.Z
    if Z is not None:
        Z = Z + sigma * rng.standard_normal(Z.shape)
        Z[:, dictionary.skeleton.root_index] = 1.0
    return ModelParams(C, R, T, Z, params.camera)


def run_bcd(W: PoseSequence2D, dictionary: PoseDictionary, hyper: Hyperparams,
            init: ModelParams):
    """Alternate the C, R, T (and Z) updates until the objective settles.

    Every block step is checked against the objective before it; an increase
    beyond ``MONOTONE_SLACK`` raises :class:`InvariantViolation`.
    """
    params = init
    if params.camera == PERSPECTIVE:
        if hyper.calibration is None:
            raise GeometryError("perspective camera requires a calibration matrix")
        root = dictionary.skeleton.root_index
        if np.any(params.Z[:, root] != 1.0):
            Z = params.Z.copy()
            Z[:, root] = 1.0
            params = params.replace(Z=Z)
    trace = BcdTrace()
    f = objective(params, W, dictionary, hyper)
    trace.objective.append(f)

    def step(name, candidate, record):
        nonlocal params, f
        f_new = objective(candidate, W, dictionary, hyper)
        if f_new > f + MONOTONE_SLACK:
            raise InvariantViolation(
                f"{name} step raised the objective from {f!r} to {f_new!r}")
        params, f = candidate, f_new
        record[name] = f_new

    trace.termination = "max_iter"
    for it in range(hyper.bcd_max_iter):
        f_start = f
        record = {}
        C, _ = update_C(params, W, dictionary, hyper)
        step("C", params.replace(C=C), record)
        R, _ = update_R(params, W, dictionary, hyper)
        step("R", params.replace(R=R), record)
        step("T", params.replace(T=update_T(params, W, dictionary, hyper)), record)
        if params.camera == PERSPECTIVE:
            step("Z", params.replace(Z=update_Z(params, W, dictionary, hyper)), record)
        trace.blocks.append(record)
        trace.objective.append(f)
        if abs(f_start - f) / max(1.0, abs(f_start)) < hyper.bcd_tol:
            trace.termination = "tol"
            break
    log.debug("bcd finished after %d iterations (%s), objective %.6g",
              trace.iterations, trace.termination, f)
    return params, trace


__all__ = [
    "InvariantViolation", "DegenerateInitWarning", "InitStrategy", "BcdTrace",
    "orthographic_procrustes", "initialize", "run_bcd", "MONOTONE_SLACK",
]
