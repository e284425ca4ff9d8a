"""Learning an overcomplete pose dictionary and sparse coding against it."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .geom import PoseDictionary, Skeleton
from .solvers import apg_l1

log = logging.getLogger(__name__)


class TrainingDataError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingPoses:
    poses: np.ndarray  # (m, 3, p), root at the origin
    skeleton: Skeleton
    mean_limb_length: float

    @property
    def m(self) -> int:
        return self.poses.shape[0]


@dataclass(frozen=True)
class LearningReport:
    rounds: int
    objective: tuple  # per round, after the atom update
    reconstruction_error: float  # mean per-pose Frobenius residual
    reseeded: int


def limb_lengths(poses: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """``(..., n_edges)`` Euclidean edge lengths."""
    a = np.array([e[0] for e in skeleton.edges])
    b = np.array([e[1] for e in skeleton.edges])
    return np.linalg.norm(poses[..., :, a] - poses[..., :, b], axis=-2)


def preprocess(raw: np.ndarray, skeleton: Skeleton) -> TrainingPoses:
    raw = np.asarray(raw, dtype=float)
    if raw.ndim == 2:
        raw = raw[None]
    if raw.ndim != 3 or raw.shape[1] != 3 or raw.shape[2] != skeleton.p:
        raise TrainingDataError(f"training poses must be (m, 3, {skeleton.p}), got {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise TrainingDataError("training poses contain non-finite values")
    root = skeleton.root_index
    poses = raw - raw[:, :, root:root + 1]
    lengths = limb_lengths(poses, skeleton)
    zero = (lengths < 1e-9).any(axis=1)
    if zero.mean() > 0.01:
        raise TrainingDataError(
            f"{int(zero.sum())} of {len(poses)} poses have zero-length edges")
    return TrainingPoses(poses, skeleton, float(lengths.mean()))


def _batch_sparse_code(X: np.ndarray, D: np.ndarray, alpha: float, C0: np.ndarray,
                       max_iter: int = 500, tol: float = 1e-10):
    """Codes for the columns of ``X`` (d x m) against atoms ``D`` (d x k)."""
    G = D.T @ D
    B = D.T @ X
    xx = float(np.sum(X * X))

    def f(C):
        return 0.5 * (np.sum(C * (G @ C)) - 2.0 * np.sum(B * C) + xx)

    def grad(C):
        return G @ C - B

    L = float(np.linalg.eigvalsh(G).max())
    return apg_l1(f, grad, C0, alpha, max(L, 1e-12), max_iter, tol)


def sparse_code(pose: np.ndarray, dictionary: PoseDictionary, alpha: float,
                max_iter: int = 2000, tol: float = 1e-12) -> np.ndarray:
    """Minimize ``0.5 ||pose - sum_i c_i B_i||_F^2 + alpha ||c||_1``."""
    D = dictionary.atoms.reshape(dictionary.k, -1).T
    x = np.asarray(pose, dtype=float).reshape(-1, 1)
    c, _ = _batch_sparse_code(x, D, alpha, np.zeros((dictionary.k, 1)), max_iter, tol)
    return c[:, 0]


def _objective(X, D, C, alpha):
    R = X - D @ C
    return 0.5 * float(np.sum(R * R)) + alpha * float(np.abs(C).sum())


def _initial_picks(X: np.ndarray, k: int, rng) -> np.ndarray:
    """Training poses in seeded random order, skipping near-duplicates of
    poses already taken; repeats fill in when there are too few distinct ones."""
    m = X.shape[1]
    norms = np.linalg.norm(X, axis=0)
    U = X / np.where(norms > 0, norms, 1.0)
    order = rng.permutation(m)
    picks = []
    for i in order:
        if len(picks) == k:
            break
        if norms[i] > 0 and (not picks or np.abs(U[:, picks].T @ U[:, i]).max() < 0.99):
            picks.append(i)
    taken = set(picks)
    rest = [i for i in order if i not in taken] or list(order)
    for j in range(k - len(picks)):
        picks.append(rest[j % len(rest)])
    return np.array(picks)


def learn_dictionary(train: TrainingPoses, k: int = 64, alpha: float = 0.5, seed: int = 0,
                     rounds: int = 30, tol: float = 1e-4, atom_scale: float = 1.0):
    """Alternate sparse coding and per-atom least-squares updates.

    Atoms are projected onto the Frobenius ball of radius ``atom_scale`` after
    each update; since the single-atom subproblem is isotropic this projection
    is its exact constrained minimizer, so the training objective never goes
    up. Atoms that end a round unused are reseeded from the worst-fit pose.

    Returns
    -------
    PoseDictionary, LearningReport
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    m = train.m
    if m < k:
        warnings.warn(f"only {m} training poses for {k} atoms", stacklevel=2)
    p = train.skeleton.p
    X = train.poses.reshape(m, -1).T  # (3p, m)
    rng = np.random.default_rng(seed)
    D = X[:, _initial_picks(X, k, rng)].copy()
    norms = np.linalg.norm(D, axis=0)
    D = np.where(norms > 0, D / np.where(norms > 0, norms, 1.0), rng.standard_normal(D.shape))
    D = D / np.linalg.norm(D, axis=0) * atom_scale
    C = np.zeros((k, m))
    history = []
    reseeded = 0
    prev = np.inf
    for rnd in range(1, rounds + 1):
        C, _ = _batch_sparse_code(X, D, alpha, C)
        for j in range(k):
            cj = C[j]
            energy = float(cj @ cj)
            if energy == 0.0:
                continue
            resid = X - D @ C + np.outer(D[:, j], cj)
            u = resid @ cj / energy
            nu = np.linalg.norm(u)
            D[:, j] = u if nu <= atom_scale else u * (atom_scale / nu)
        obj = _objective(X, D, C, alpha)
        if history and obj > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"dictionary objective rose from {history[-1]} to {obj}")
        history.append(obj)
        dead = np.flatnonzero(~np.any(C != 0, axis=1))
        if dead.size:
            err = np.sum((X - D @ C) ** 2, axis=0)
            order = np.argsort(-err, kind="stable")
            for slot, j in enumerate(dead):
                col = X[:, order[slot % m]]
                nrm = np.linalg.norm(col)
                if nrm > 0:
                    D[:, j] = col / nrm * atom_scale
                    reseeded += 1
        if abs(prev - obj) / max(abs(prev), 1e-300) < tol:
            break
        prev = obj
    atoms = D.T.reshape(k, 3, p)
    # the projection can land a hair outside the ball
    norms = np.sqrt(np.einsum("kdp,kdp->k", atoms, atoms))
    atoms = atoms * np.minimum(1.0, atom_scale / np.maximum(norms, 1e-300))[:, None, None]
    mean_pose = train.poses.mean(axis=0).reshape(-1)
    code, *_ = np.linalg.lstsq(atoms.reshape(k, -1).T, mean_pose, rcond=None)
    fit = np.linalg.norm(X - D @ C, axis=0).mean()
    log.info("dictionary: k=%d rounds=%d objective=%.6g", k, len(history), history[-1])
    dictionary = PoseDictionary(train.skeleton, atoms, atom_scale, train.mean_limb_length,
                                code, alpha, seed)
    return dictionary, LearningReport(len(history), tuple(history), float(fit), reseeded)


__all__ = ["TrainingDataError", "TrainingPoses", "LearningReport", "limb_lengths",
           "preprocess", "sparse_code", "learn_dictionary"]
