"""Domain types, camera models, the data loss and the temporal prior.

Everything in here is a pure function of its arguments. Solvers build on the
array-level helpers (``shapes``, ``targets``, ``residuals``) so the loss they
optimize is, by construction, the loss reported by :func:`objective`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

ORTHOGRAPHIC = "orthographic"
PERSPECTIVE = "perspective"
CAMERA_MODES = (ORTHOGRAPHIC, PERSPECTIVE)

# side length of the normalized crop, in 2D units
CROP_SIZE = 256.0

_DEPTH_EPS = 1e-12


class GeometryError(ValueError):
    """Inconsistent shapes, invalid parameters or impossible projections."""


@dataclass(frozen=True)
class Skeleton:
    """Joint names, kinematic tree and the limbs used by PCP.

    ``limb_groups`` labels each entry of ``limb_pairs`` (e.g. ``"upper_arm"``)
    so PCP can be broken down per part group.
    """

    joint_names: tuple
    edges: tuple
    root_index: int = 0
    limb_pairs: tuple = ()
    limb_groups: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(str(n) for n in self.joint_names))
        object.__setattr__(self, "edges", tuple((int(a), int(b)) for a, b in self.edges))
        object.__setattr__(self, "limb_pairs", tuple((int(a), int(b)) for a, b in self.limb_pairs))
        groups = tuple(str(g) for g in self.limb_groups)
        if not groups:
            groups = ("all",) * len(self.limb_pairs)
        object.__setattr__(self, "limb_groups", groups)
        p = len(self.joint_names)
        if p < 2:
            raise GeometryError("a skeleton needs at least 2 joints")
        if not 0 <= self.root_index < p:
            raise GeometryError(f"root_index {self.root_index} out of range for {p} joints")
        if len(self.edges) != p - 1:
            raise GeometryError(f"a tree over {p} joints has {p - 1} edges, got {len(self.edges)}")
        parent = list(range(p))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for a, b in self.edges:
            if not (0 <= a < p and 0 <= b < p) or a == b:
                raise GeometryError(f"invalid edge ({a}, {b})")
            ra, rb = find(a), find(b)
            if ra == rb:
                raise GeometryError("edges contain a cycle")
            parent[ra] = rb
        for a, b in self.limb_pairs:
            if not (0 <= a < p and 0 <= b < p):
                raise GeometryError(f"invalid limb pair ({a}, {b})")
        if len(groups) != len(self.limb_pairs):
            raise GeometryError("limb_groups must label every limb pair")

    @property
    def p(self) -> int:
        return len(self.joint_names)

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "names": list(self.joint_names),
            "root_index": self.root_index,
            "edges": [list(e) for e in self.edges],
            "limb_pairs": [list(e) for e in self.limb_pairs],
            "limb_groups": list(self.limb_groups),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        sk = cls(
            joint_names=d["names"],
            edges=d["edges"],
            root_index=d.get("root_index", 0),
            limb_pairs=d.get("limb_pairs", ()),
            limb_groups=d.get("limb_groups", ()),
        )
        if "p" in d and int(d["p"]) != sk.p:
            raise GeometryError(f"skeleton declares p={d['p']} but lists {sk.p} names")
        return sk


def human15() -> Skeleton:
    """15-joint body model rooted at the pelvis."""
    names = (
        "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
        "thorax", "head", "l_shoulder", "l_elbow", "l_wrist",
        "r_shoulder", "r_elbow", "r_wrist",
    )
    edges = (
        (0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (5, 6), (0, 7), (7, 8),
        (7, 9), (9, 10), (10, 11), (7, 12), (12, 13), (13, 14),
    )
    limbs = ((9, 10), (12, 13), (10, 11), (13, 14), (1, 2), (4, 5), (2, 3), (5, 6))
    groups = ("upper_arms", "upper_arms", "lower_arms", "lower_arms",
              "upper_legs", "upper_legs", "lower_legs", "lower_legs")
    return Skeleton(names, edges, 0, limbs, groups)


def chain_skeleton(p: int) -> Skeleton:
    """Serial chain ``0-1-...-(p-1)``; handy for small test instances."""
    edges = tuple((i, i + 1) for i in range(p - 1))
    return Skeleton(tuple(f"j{i}" for i in range(p)), edges, 0, edges)


@dataclass(frozen=True)
class PoseSequence3D:
    coords: np.ndarray  # (n, 3, p)

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.ndim == 2:
            c = c[None]
        if c.ndim != 3 or c.shape[1] != 3 or c.shape[0] < 1:
            raise GeometryError(f"3D poses must be (n, 3, p), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise GeometryError("3D poses contain non-finite values")
        object.__setattr__(self, "coords", c)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def p(self) -> int:
        return self.coords.shape[2]


@dataclass(frozen=True)
class PoseSequence2D:
    """2D joint locations in normalized image coordinates.

    The normalized frame is the subject crop scaled to ``CROP_SIZE`` units
    (heat-map pixel centres of a 64 x 64 grid sit at ``4 * (i + 0.5)``).

    ``visibility`` is an optional ``(n, p)`` boolean mask; hidden joints may
    hold NaN and never enter the loss.
    """

    coords: np.ndarray  # (n, 2, p)
    visibility: Optional[np.ndarray] = None

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.ndim == 2:
            c = c[None]
        if c.ndim != 3 or c.shape[1] != 2 or c.shape[0] < 1:
            raise GeometryError(f"2D poses must be (n, 2, p), got {c.shape}")
        vis = self.visibility
        if vis is not None:
            vis = np.asarray(vis, dtype=bool).reshape(c.shape[0], c.shape[2])
            if vis.all():
                vis = None
        ok = np.isfinite(c).all(axis=1)
        if vis is not None:
            ok = ok | ~vis
        if not ok.all():
            raise GeometryError("visible 2D joints contain non-finite values")
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "visibility", vis)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def p(self) -> int:
        return self.coords.shape[2]

    def mask(self) -> np.ndarray:
        """``(n, p)`` float weights: 1 for visible joints, 0 otherwise."""
        if self.visibility is None:
            return np.ones((self.n, self.p))
        return self.visibility.astype(float)

    def homogeneous(self) -> np.ndarray:
        """``(n, 3, p)`` with a row of ones appended; hidden joints zeroed."""
        c = self.coords
        if self.visibility is not None:
            c = np.where(self.visibility[:, None, :], c, 0.0)
        return np.concatenate([c, np.ones((self.n, 1, self.p))], axis=1)


@dataclass(frozen=True)
class PoseDictionary:
    skeleton: Skeleton
    atoms: np.ndarray  # (k, 3, p)
    atom_scale: float = 1.0
    mean_limb_length: float = 1.0
    mean_pose_code: Optional[np.ndarray] = None
    alpha_used: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self):
        a = np.asarray(self.atoms, dtype=float)
        if a.ndim != 3 or a.shape[1] != 3 or a.shape[0] < 1:
            raise GeometryError(f"atoms must be (k, 3, p), got {a.shape}")
        if a.shape[2] != self.skeleton.p:
            raise GeometryError(f"atoms have {a.shape[2]} joints, skeleton has {self.skeleton.p}")
        if not np.all(np.isfinite(a)):
            raise GeometryError("atoms contain non-finite values")
        if self.atom_scale <= 0 or self.mean_limb_length <= 0:
            raise GeometryError("atom_scale and mean_limb_length must be positive")
        norms = np.sqrt(np.einsum("kdp,kdp->k", a, a))
        if np.any(norms > self.atom_scale + 1e-9):
            worst = int(np.argmax(norms))
            raise GeometryError(
                f"atom {worst} has norm {norms[worst]:.12g} > atom_scale {self.atom_scale}")
        object.__setattr__(self, "atoms", a)
        if self.mean_pose_code is not None:
            code = np.asarray(self.mean_pose_code, dtype=float).reshape(-1)
            if code.shape[0] != a.shape[0]:
                raise GeometryError("mean_pose_code length differs from k")
            object.__setattr__(self, "mean_pose_code", code)

    @property
    def k(self) -> int:
        return self.atoms.shape[0]

    @property
    def p(self) -> int:
        return self.atoms.shape[2]


@dataclass(frozen=True)
class ModelParams:
    """Per-sequence pose parameters.

    ``R`` always stores full rotations ``(n, 3, 3)``; the orthographic camera
    uses their first two rows. ``T`` is ``(n, 2)`` or ``(n, 3)`` by camera
    mode and ``Z`` (perspective only) is ``(n, p)`` with the root fixed at 1.
    """

    C: np.ndarray
    R: np.ndarray
    T: np.ndarray
    Z: Optional[np.ndarray] = None
    camera: str = ORTHOGRAPHIC

    def __post_init__(self):
        C = np.asarray(self.C, dtype=float)
        if C.ndim == 1:
            C = C[:, None]
        R = np.asarray(self.R, dtype=float)
        if R.ndim == 2:
            R = R[None]
        T = np.asarray(self.T, dtype=float)
        if T.ndim == 1:
            T = T[None]
        n = C.shape[1]
        if self.camera not in CAMERA_MODES:
            raise GeometryError(f"unknown camera mode {self.camera!r}")
        if R.shape != (n, 3, 3):
            raise GeometryError(f"R must be ({n}, 3, 3), got {R.shape}")
        d = 2 if self.camera == ORTHOGRAPHIC else 3
        if T.shape != (n, d):
            raise GeometryError(f"T must be ({n}, {d}) for {self.camera}, got {T.shape}")
        Z = self.Z
        if self.camera == PERSPECTIVE:
            if Z is None:
                raise GeometryError("perspective parameters need depths Z")
            Z = np.asarray(Z, dtype=float)
            if Z.ndim == 1:
                Z = Z[None]
            if Z.shape[0] != n:
                raise GeometryError(f"Z must have {n} rows, got {Z.shape}")
        elif Z is not None:
            raise GeometryError("orthographic parameters carry no depths")
        for name, arr in (("C", C), ("R", R), ("T", T), ("Z", Z)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise GeometryError(f"{name} contains non-finite values")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "Z", Z)

    @property
    def n(self) -> int:
        return self.C.shape[1]

    @property
    def k(self) -> int:
        return self.C.shape[0]

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.C.copy(), self.R.copy(), self.T.copy(),
            None if self.Z is None else self.Z.copy(), self.camera)


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 0.5
    beta: float = 20.0
    gamma: float = 2.0
    nu: float = 1.0
    calibration: Optional[np.ndarray] = None
    bcd_tol: float = 1e-6
    bcd_max_iter: int = 200
    em_max_iter: int = 20
    apg_max_iter: int = 500
    apg_tol: float = 1e-8
    rot_max_iter: int = 50
    rot_tol: float = 1e-8

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise GeometryError("alpha, beta and gamma must be non-negative")
        if not self.nu > 0:
            raise GeometryError("nu must be positive")
        if self.calibration is not None:
            K = np.asarray(self.calibration, dtype=float)
            if K.shape != (3, 3) or np.any(np.tril(K, -1) != 0) or np.any(np.diag(K) <= 0):
                raise GeometryError("calibration must be 3x3 upper triangular with positive diagonal")
            object.__setattr__(self, "calibration", K)

    def replace(self, **changes) -> "Hyperparams":
        return replace(self, **changes)

    def K_inv(self) -> np.ndarray:
        if self.calibration is None:
            raise GeometryError("perspective camera requires a calibration matrix")
        return np.linalg.inv(self.calibration)


def calibration_matrix(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    """Zero-skew intrinsics, divided by the mean focal length ``sqrt(fx * fy)``.

    The projection is unchanged by the overall scale of K, but with this one
    ``K^-1 W`` is measured in image units, so the perspective residual and
    the orthographic residual share the 2D coordinate system the prior
    weights are tuned for. With the root depth pinned to 1 the root then sits
    ``sqrt(fx * fy)`` units in front of the camera.
    """
    f = np.sqrt(fx * fy)
    if not f > 0:
        raise GeometryError("focal lengths must be positive")
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]) / f


def is_rotation(R: np.ndarray, tol: float = 1e-8) -> bool:
    R = np.asarray(R)
    if R.ndim == 2:
        R = R[None]
    eye = np.eye(3)
    orth = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max()
    return bool(orth <= tol and np.abs(np.linalg.det(R) - 1).max() <= tol)


# ---------------------------------------------------------------------------
# array-level helpers


def shapes(C: np.ndarray, atoms: np.ndarray) -> np.ndarray:
    """``S_t = sum_i c_it B_i`` for every frame, as an ``(n, 3, p)`` array."""
    return np.einsum("kn,kdp->ndp", C, atoms)


def _check_compatible(params: ModelParams, dictionary: PoseDictionary, n: Optional[int] = None):
    if params.k != dictionary.k:
        raise GeometryError(f"C has {params.k} rows but the dictionary has {dictionary.k} atoms")
    if n is not None and params.n != n:
        raise GeometryError(f"parameters cover {params.n} frames, 2D input has {n}")
    if params.Z is not None and params.Z.shape[1] != dictionary.p:
        raise GeometryError("Z has the wrong number of joints")


def projection_rows(params: ModelParams) -> np.ndarray:
    """The rows of ``R_t`` that act in the loss: 2 (orthographic) or 3."""
    return params.R[:, :2, :] if params.camera == ORTHOGRAPHIC else params.R


def targets(params: ModelParams, W: PoseSequence2D, hyper: Hyperparams) -> np.ndarray:
    """Left-hand side of the camera equation for every frame.

    Orthographic: ``W_t``. Perspective: ``K^-1 W_t Z_t`` with homogeneous
    ``W_t``. Hidden joints are zero (they are masked anyway).
    """
    if params.camera == ORTHOGRAPHIC:
        A = W.coords
        if W.visibility is not None:
            A = np.where(W.visibility[:, None, :], A, 0.0)
        return A
    U = np.einsum("ij,njp->nip", hyper.K_inv(), W.homogeneous())
    return U * params.Z[:, None, :]


def residuals(params: ModelParams, W: PoseSequence2D, dictionary: PoseDictionary,
              hyper: Hyperparams) -> np.ndarray:
    """Masked per-frame residual ``target_t - R_t S_t - T_t 1^T``."""
    _check_compatible(params, dictionary, W.n)
    if W.p != dictionary.p:
        raise GeometryError(f"2D poses have {W.p} joints, dictionary has {dictionary.p}")
    S = shapes(params.C, dictionary.atoms)
    # subtract the model in one piece so W == project(params) gives an exact zero
    E = targets(params, W, hyper) - (projection_rows(params) @ S + params.T[:, :, None])
    return E * W.mask()[:, None, :]


def rotation_smoothness(R: np.ndarray) -> float:
    if R.shape[0] < 2:
        return 0.0
    return float(np.sum(np.diff(R, axis=0) ** 2))


def coefficient_smoothness(C: np.ndarray) -> float:
    if C.shape[1] < 2:
        return 0.0
    return float(np.sum(np.diff(C, axis=1) ** 2))


# ---------------------------------------------------------------------------
# public operations


def compose_pose(C: np.ndarray, dictionary: PoseDictionary, n: Optional[int] = None) -> PoseSequence3D:
    C = np.asarray(C, dtype=float)
    if C.ndim == 1:
        C = C[:, None]
    if C.shape[0] != dictionary.k:
        raise GeometryError(f"C has {C.shape[0]} rows but the dictionary has {dictionary.k} atoms")
    if n is not None and C.shape[1] != n:
        raise GeometryError(f"C has {C.shape[1]} columns, expected {n} frames")
    return PoseSequence3D(shapes(C, dictionary.atoms))


def camera_frame_pose(params: ModelParams, dictionary: PoseDictionary) -> PoseSequence3D:
    """Rotated 3D poses ``R_t S_t`` (root-relative, camera axes)."""
    _check_compatible(params, dictionary)
    return PoseSequence3D(params.R @ shapes(params.C, dictionary.atoms))


def project(params: ModelParams, dictionary: PoseDictionary, hyper: Hyperparams) -> PoseSequence2D:
    """Predicted image points of every joint."""
    _check_compatible(params, dictionary)
    S = shapes(params.C, dictionary.atoms)
    if params.camera == ORTHOGRAPHIC:
        out = params.R[:, :2, :] @ S + params.T[:, :, None]
    else:
        X = params.R @ S + params.T[:, :, None]
        depth = X[:, 2, :]
        bad = np.argwhere(depth <= _DEPTH_EPS)
        if bad.size:
            t, j = bad[0]
            raise GeometryError(
                f"joint {j} of frame {t} lies behind the camera (depth {depth[t, j]:.3g})")
        if hyper.calibration is None:
            raise GeometryError("perspective camera requires a calibration matrix")
        Y = np.einsum("ij,njp->nip", hyper.calibration, X)
        out = Y[:, :2, :] / Y[:, 2:3, :]
    if not np.all(np.isfinite(out)):
        raise GeometryError("projection produced non-finite coordinates")
    return PoseSequence2D(out)


def loss(params: ModelParams, W: PoseSequence2D, dictionary: PoseDictionary, hyper: Hyperparams) -> float:
    """``(nu/2) * sum_t ||residual_t||_F^2``; perspective uses the stored depths."""
    E = residuals(params, W, dictionary, hyper)
    return 0.5 * hyper.nu * float(np.sum(E * E))


def prior_penalty(params: ModelParams, hyper: Hyperparams) -> float:
    """L1 sparsity on C plus first-order temporal smoothness of C and R."""
    return (hyper.alpha * float(np.abs(params.C).sum())
            + 0.5 * hyper.beta * coefficient_smoothness(params.C)
            + 0.5 * hyper.gamma * rotation_smoothness(params.R))


def objective(params: ModelParams, W: PoseSequence2D, dictionary: PoseDictionary, hyper: Hyperparams) -> float:
    return loss(params, W, dictionary, hyper) + prior_penalty(params, hyper)


def validate_solution(params: ModelParams, dictionary: PoseDictionary) -> list:
    """Problems with a final solution that are tolerated mid-optimization."""
    issues = []
    if not is_rotation(params.R):
        issues.append("rotations left SO(3)")
    if params.camera == PERSPECTIVE:
        root = dictionary.skeleton.root_index
        if np.any(params.Z[:, root] != 1.0):
            issues.append("root depth is not 1")
        bad = np.argwhere(params.Z <= 0)
        for t, j in bad[:5]:
            issues.append(f"non-positive depth at frame {t}, joint {j}")
    return issues


__all__ = [
    "ORTHOGRAPHIC", "PERSPECTIVE", "CROP_SIZE", "GeometryError", "Skeleton", "human15", "chain_skeleton",
    "PoseSequence3D", "PoseSequence2D", "PoseDictionary", "ModelParams", "Hyperparams",
    "calibration_matrix", "is_rotation", "shapes", "targets", "residuals", "projection_rows",
    "compose_pose", "camera_frame_pose", "project", "loss", "prior_penalty", "objective",
    "validate_solution",
]
