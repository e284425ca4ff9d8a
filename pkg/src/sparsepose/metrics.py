"""Evaluation: limb-length rescaling, per-joint error, reconstruction error and PCP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geom import GeometryError, PoseSequence3D, Skeleton


class DegeneratePoseError(GeometryError):
    pass


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.scale * (self.rotation @ X) + self.translation[:, None]


@dataclass(frozen=True)
class PcpResult:
    score: float
    per_group: dict
    per_frame: np.ndarray
    skipped: int


def _coords(x) -> np.ndarray:
    if isinstance(x, PoseSequence3D):
        return x.coords
    a = np.asarray(x, dtype=float)
    return a[None] if a.ndim == 2 else a


def _edge_lengths(X: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    a = [e[0] for e in skeleton.edges]
    b = [e[1] for e in skeleton.edges]
    return np.linalg.norm(X[:, :, a] - X[:, :, b], axis=1)


def rescale_to_limb_length(pose, skeleton: Skeleton, target_mean_limb: float) -> PoseSequence3D:
    """Scale each frame about its root so the mean edge length equals the target."""
    X = _coords(pose)
    current = _edge_lengths(X, skeleton).mean(axis=1)
    if np.any(current < 1e-9):
        raise DegeneratePoseError(f"frame {int(np.argmin(current))} has (near) zero limb lengths")
    root = X[:, :, skeleton.root_index:skeleton.root_index + 1]
    factor = (target_mean_limb / current)[:, None, None]
    return PoseSequence3D(root + (X - root) * factor)


def _subset(X, joints):
    return X if joints is None else X[:, :, np.asarray(joints)]


def per_joint_errors(est, gt, skeleton: Skeleton, joints=None) -> np.ndarray:
    """``(n,)`` root-aligned mean joint distance per frame."""
    E, G = _coords(est), _coords(gt)
    if E.shape != G.shape:
        raise GeometryError(f"shape mismatch {E.shape} vs {G.shape}")
    r = skeleton.root_index
    E = E - E[:, :, r:r + 1] + G[:, :, r:r + 1]
    return np.linalg.norm(_subset(E, joints) - _subset(G, joints), axis=1).mean(axis=1)


def per_joint_error(est, gt, skeleton: Skeleton, joints=None) -> float:
    """Mean joint distance after moving ``est``'s root onto ``gt``'s. No rotation or scale."""
    return float(per_joint_errors(est, gt, skeleton, joints).mean())


def _weighted_similarity(est: np.ndarray, gt: np.ndarray, w: np.ndarray) -> SimilarityTransform:
    w = w / w.sum()
    me = est @ w
    mg = gt @ w
    Ec = est - me[:, None]
    Gc = gt - mg[:, None]
    M = (Ec * w) @ Gc.T
    U, sv, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    D = np.array([1.0, 1.0, d])
    Q = (U * D) @ Vt
    var = float(np.sum(w * np.sum(Gc * Gc, axis=0)))
    s = float(np.sum(sv * D)) / var
    return SimilarityTransform(s, Q, me - s * Q @ mg)


def procrustes_align(est: np.ndarray, gt: np.ndarray):
    """Least-squares similarity mapping ``gt`` onto ``est`` (single frame, 3 x p).

    Reflections are excluded. Returns the transform and the residual
    ``est - T(gt)``.
    """
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[0] != 3:
        raise GeometryError(f"procrustes expects two 3 x p arrays, got {est.shape} and {gt.shape}")
    Gc = gt - gt.mean(axis=1, keepdims=True)
    sv = np.linalg.svd(Gc, compute_uv=False)
    if gt.shape[1] < 3 or sv[0] == 0 or sv[1] <= 1e-10 * sv[0]:
        raise DegeneratePoseError("ground-truth joints are collinear or coincident")
    T = _weighted_similarity(est, gt, np.ones(gt.shape[1]))
    return T, est - T.apply(gt)


def _irls(est: np.ndarray, gt: np.ndarray, T: SimilarityTransform, iters: int):
    """Iteratively reweighted Procrustes from ``T``. Never increases the mean distance.

    Returns the final mean distance and transform.
    """
    def mean_dist(T):
        return float(np.linalg.norm(est - T.apply(gt), axis=0).mean())

    f = mean_dist(T)
    for _ in range(iters):
        r = np.linalg.norm(est - T.apply(gt), axis=0)
        w = 1.0 / np.maximum(r, 1e-12 * max(1.0, f))
        cand = _weighted_similarity(est, gt, w)
        fc = mean_dist(cand)
        if fc >= f * (1 - 1e-12):
            if fc < f:
                T, f = cand, fc
            break
        T, f = cand, fc
    return f, T


def _min_mean_distance(est: np.ndarray, gt: np.ndarray, root: int, iters: int = 100) -> float:
    """Smallest mean joint distance over similarity transforms of ``gt``.

    The problem is not convex in the rotation, so iteratively reweighted
    Procrustes runs from several starts: the least-squares fit, and that fit
    composed with half turns about the principal axes of ``gt``, each anchored
    at the centroid and at the root joint. All of these move with ``est``
    under a similarity, so the result does too. Each start gets a short run
    and only the best is refined. Only if none of them beats
    the plain root alignment is that alignment used as a further start, which
    keeps the value at or below the per-joint error.
    """
    T_ls, _ = procrustes_align(est, gt)
    Gc = gt - gt.mean(axis=1, keepdims=True)
    _, V = np.linalg.eigh(Gc @ Gc.T)
    starts = []
    for flip in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
        Q = T_ls.rotation @ (V * np.array(flip, dtype=float)) @ V.T
        for anchor in (None, root):
            if anchor is None:
                shift = est.mean(axis=1) - T_ls.scale * Q @ gt.mean(axis=1)
            else:
                shift = est[:, anchor] - T_ls.scale * Q @ gt[:, anchor]
            starts.append(_irls(est, gt, SimilarityTransform(T_ls.scale, Q, shift), 10))
    f, T = min(starts, key=lambda ft: ft[0])
    best = _irls(est, gt, T, iters)[0]
    T_root = SimilarityTransform(1.0, np.eye(3), est[:, root] - gt[:, root])
    plain = float(np.linalg.norm(est - T_root.apply(gt), axis=0).mean())
    if best > plain:
        best = min(best, _irls(est, gt, T_root, iters)[0])
    return best


def reconstruction_errors(est, gt, skeleton: Optional[Skeleton] = None, joints=None) -> np.ndarray:
    E, G = _subset(_coords(est), joints), _subset(_coords(gt), joints)
    if E.shape != G.shape:
        raise GeometryError(f"shape mismatch {E.shape} vs {G.shape}")
    root = 0
    if skeleton is not None and joints is None:
        root = skeleton.root_index
    return np.array([_min_mean_distance(E[t], G[t], root) for t in range(E.shape[0])])


def reconstruction_error(est, gt, skeleton: Optional[Skeleton] = None, joints=None) -> float:
    """Mean joint distance after the best similarity alignment, averaged over frames."""
    return float(reconstruction_errors(est, gt, skeleton, joints).mean())


def pcp(est, gt, skeleton: Skeleton, tau: float = 0.5) -> PcpResult:
    """Fraction of limbs whose mean endpoint error is within ``tau`` of the limb length."""
    if not skeleton.limb_pairs:
        raise GeometryError("skeleton declares no limbs")
    E, G = _coords(est), _coords(gt)
    if E.shape != G.shape:
        raise GeometryError(f"shape mismatch {E.shape} vs {G.shape}")
    a = [l[0] for l in skeleton.limb_pairs]
    b = [l[1] for l in skeleton.limb_pairs]
    length = np.linalg.norm(G[:, :, a] - G[:, :, b], axis=1)  # (n, L)
    err = np.linalg.norm(E[:, :, a] - G[:, :, a], axis=1) + np.linalg.norm(E[:, :, b] - G[:, :, b], axis=1)
    valid = length > 0
    ok = np.zeros_like(valid)
    ok[valid] = err[valid] / (2.0 * length[valid]) <= tau
    total = valid.sum()
    score = float(ok.sum() / total) if total else float("nan")
    groups = {}
    labels = np.array(skeleton.limb_groups)
    for g in dict.fromkeys(skeleton.limb_groups):
        cols = labels == g
        v = valid[:, cols].sum()
        groups[g] = float(ok[:, cols].sum() / v) if v else float("nan")
    with np.errstate(invalid="ignore", divide="ignore"):
        per_frame = ok.sum(axis=1) / valid.sum(axis=1)
    return PcpResult(score, groups, per_frame, int((~valid).sum()))


__all__ = ["SimilarityTransform", "PcpResult", "DegeneratePoseError", "rescale_to_limb_length",
           "per_joint_error", "per_joint_errors", "procrustes_align", "reconstruction_error",
           "reconstruction_errors", "pcp"]
