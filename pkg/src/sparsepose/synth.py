"""Synthetic ground truth: MoCap-like training poses, sequences and heat maps."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .em import GridMap, HeatMapStack
from .geom import (
    CROP_SIZE, ORTHOGRAPHIC, PERSPECTIVE, GeometryError, Hyperparams, ModelParams, PoseDictionary,
    PoseSequence2D, PoseSequence3D, Skeleton, calibration_matrix, human15, project, shapes,
)
from .solvers import so3_exp, skew

# bone lengths in millimetres, keyed by child joint of human15()
_BONES = {1: 130.0, 2: 450.0, 3: 430.0, 4: 130.0, 5: 450.0, 6: 430.0, 7: 480.0,
          8: 260.0, 9: 180.0, 10: 290.0, 11: 260.0, 12: 180.0, 13: 290.0, 14: 260.0}


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def training_poses(m: int, seed: int = 0, skeleton: Optional[Skeleton] = None) -> np.ndarray:
    """``(m, 3, 15)`` body poses in millimetres (y up), drawn from a low-dimensional
    gait/reach/crouch model plus joint-level jitter."""
    skeleton = skeleton or human15()
    if skeleton.p != 15:
        raise ValueError("the built-in pose model covers the 15-joint skeleton only")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi, m)
    stride = rng.uniform(0.0, 0.6, m)
    crouch = rng.uniform(0.0, 1.0, m) ** 2
    reach_l = rng.uniform(-0.3, 1.4, m)
    reach_r = rng.uniform(-0.3, 1.4, m)
    lean = rng.normal(0.0, 0.15, m)

    down = np.array([0.0, -1.0, 0.0])
    fwd = np.array([0.0, 0.0, 1.0])
    up = -down

    def swing(angle):
        # direction in the sagittal plane, angle measured from straight down
        return np.stack([np.zeros_like(angle), -np.cos(angle), np.sin(angle)], axis=-1)

    dirs = np.zeros((m, 15, 3))
    dirs[:, 1] = [-1.0, 0.0, 0.0]
    dirs[:, 4] = [1.0, 0.0, 0.0]
    hip_r = stride * np.sin(phase) + 0.9 * crouch
    hip_l = -stride * np.sin(phase) + 0.9 * crouch
    dirs[:, 2] = swing(hip_r)
    dirs[:, 5] = swing(hip_l)
    dirs[:, 3] = swing(hip_r - 0.5 * stride * (1 + np.cos(phase)) - 1.4 * crouch)
    dirs[:, 6] = swing(hip_l - 0.5 * stride * (1 - np.cos(phase)) - 1.4 * crouch)
    dirs[:, 7] = _unit(up + np.outer(lean + 0.4 * crouch, fwd))
    dirs[:, 8] = _unit(up + np.outer(0.5 * lean, fwd))
    dirs[:, 9] = [1.0, 0.0, 0.0]
    dirs[:, 12] = [-1.0, 0.0, 0.0]
    arm_l = reach_l - 0.5 * stride * np.sin(phase)
    arm_r = reach_r + 0.5 * stride * np.sin(phase)
    dirs[:, 10] = swing(arm_l)
    dirs[:, 13] = swing(arm_r)
    dirs[:, 11] = swing(arm_l + rng.uniform(0.0, 1.5, m))
    dirs[:, 14] = swing(arm_r + rng.uniform(0.0, 1.5, m))
    dirs[:, 1:] = _unit(dirs[:, 1:] + rng.normal(0.0, 0.08, (m, 14, 3)))

    scale = rng.normal(1.0, 0.04, m)
    poses = np.zeros((m, 3, 15))
    for parent, child in skeleton.edges:
        poses[:, :, child] = poses[:, :, parent] + dirs[:, child] * (_BONES[child] * scale)[:, None]
    return poses


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    frames: int = 30
    active_atoms: int = 3
    coef_scale: float = 200.0
    coef_jitter: float = 0.05
    support_run: int = 0  # 0 keeps one support for the whole sequence
    rotation_step: float = 0.03
    translation_drift: float = 0.4
    noise: float = 0.0
    heatmap_sigma: float = 1.0
    grid: tuple = (64, 64)
    camera: str = ORTHOGRAPHIC
    focal: float = 400.0
    depth: float = 400.0
    distractors: int = 0
    distractor_mass: float = 1.5
    distractor_offset: tuple = (6.0, 14.0)

    def __post_init__(self):
        for name in ("coef_scale", "coef_jitter", "rotation_step", "translation_drift",
                     "noise", "heatmap_sigma", "distractor_mass"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.frames < 1 or self.active_atoms < 1:
            raise ValueError("frames and active_atoms must be positive")
        if self.camera not in (ORTHOGRAPHIC, PERSPECTIVE):
            raise ValueError(f"unknown camera {self.camera!r}")

    def calibration(self) -> Optional[np.ndarray]:
        if self.camera != PERSPECTIVE:
            return None
        return calibration_matrix(self.focal, self.focal, 0.5 * CROP_SIZE, 0.5 * CROP_SIZE)


@dataclass(frozen=True)
class SynthSequence:
    poses3d: PoseSequence3D  # S_t in the model frame
    camera_poses: PoseSequence3D  # R_t S_t
    params: ModelParams
    clean: PoseSequence2D
    noisy: PoseSequence2D
    calibration: Optional[np.ndarray]

    def __iter__(self):
        return iter((self.poses3d, self.params, self.clean, self.noisy))


def _moving_average3(X: np.ndarray) -> np.ndarray:
    if X.shape[1] < 3:
        return X
    padded = np.concatenate([X[:, :1], X, X[:, -1:]], axis=1)
    return (padded[:, :-2] + padded[:, 1:-1] + padded[:, 2:]) / 3.0


def _sample_coefficients(rng, k, config):
    n, a = config.frames, config.active_atoms
    if a > k:
        raise ValueError(f"{a} active atoms requested from a dictionary of {k}")
    run = config.support_run if config.support_run > 0 else n
    C = np.zeros((k, n))
    for start in range(0, n, run):
        stop = min(n, start + run)
        support = rng.choice(k, size=a, replace=False)
        base = rng.uniform(0.5, 1.0, a)
        base = base / base.sum() * config.coef_scale
        walk = np.cumsum(rng.normal(0.0, config.coef_jitter * config.coef_scale / a,
                                    (a, stop - start)), axis=1)
        C[support, start:stop] = base[:, None] + walk
    return _moving_average3(C)


def _body_to_camera(yaw: float) -> np.ndarray:
    """Model frame (y up, z forward) seen by a camera with y down, z into the scene."""
    c, s = np.cos(yaw), np.sin(yaw)
    Ry = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    flip = np.diag([1.0, -1.0, -1.0])
    return flip @ Ry


def generate_sequence(dictionary: PoseDictionary, config: SynthConfig = SynthConfig()) -> SynthSequence:
    """Sample a sparse, smooth pose sequence and its 2D observations."""
    rng = np.random.default_rng(config.seed)
    n = config.frames
    hyper = Hyperparams(calibration=config.calibration())
    for _attempt in range(10):
        C = _sample_coefficients(rng, dictionary.k, config)
        R = np.empty((n, 3, 3))
        R[0] = _body_to_camera(rng.uniform(-np.pi, np.pi)) @ so3_exp(
            skew(rng.normal(0.0, 0.1, (3, 3))))
        for t in range(1, n):
            axis = rng.standard_normal(3)
            axis /= np.linalg.norm(axis)
            w = axis * config.rotation_step
            Om = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
            R[t] = R[t - 1] @ so3_exp(Om)
        S = shapes(C, dictionary.atoms)
        if config.camera == ORTHOGRAPHIC:
            T = 0.5 * CROP_SIZE + np.cumsum(rng.normal(0.0, config.translation_drift, (n, 2)), axis=0)
            params = ModelParams(C, R, T, None, ORTHOGRAPHIC)
        else:
            xy = np.cumsum(rng.normal(0.0, config.translation_drift, (n, 2)), axis=0)
            T = np.column_stack([xy, np.full(n, config.depth)])
            X = R @ S + T[:, :, None]
            depth = X[:, 2, :]
            if np.any(depth <= 0.05 * config.depth):
                continue
            # per-frame rescale into the unit root-depth gauge; K^-1 [w; 1] has
            # third component 1 / K_33, so a point at depth z has Z = K_33 z / s
            root_depth = depth[:, dictionary.skeleton.root_index]
            s = root_depth * config.calibration()[2, 2]
            Z = depth / root_depth[:, None]
            C = C / s[None, :]
            params = ModelParams(C, R, T / s[:, None], Z, PERSPECTIVE)
            S = shapes(C, dictionary.atoms)
        break
    else:
        raise GeometryError("could not place the sequence in front of the camera in 10 attempts")
    clean = project(params, dictionary, hyper)
    noisy = clean
    if config.noise > 0:
        noisy = PoseSequence2D(clean.coords + rng.normal(0.0, config.noise, clean.coords.shape))
    return SynthSequence(PoseSequence3D(S), PoseSequence3D(R @ S), params, clean, noisy,
                         config.calibration())


def render_heatmaps(W: PoseSequence2D, config: SynthConfig = SynthConfig(),
                    grid_map: Optional[GridMap] = None) -> HeatMapStack:
    """Gaussian blobs (peak 1) at every joint, plus optional distractors.

    With ``heatmap_sigma == 0`` each channel is a single unit pixel at the
    nearest pixel centre. Distractors are extra blobs of peak
    ``distractor_mass`` placed ``distractor_offset`` pixels away on
    ``distractors`` randomly chosen joints per frame.
    """
    H, Wpx = config.grid
    gm = grid_map or GridMap.crop(H, Wpx)
    n, p = W.n, W.p
    col, row = gm.to_pixel(W.coords[:, 0, :], W.coords[:, 1, :])
    outside = (col < -0.5) | (col > Wpx - 0.5) | (row < -0.5) | (row > H - 0.5)
    if np.any(outside):
        warnings.warn(f"{int(outside.sum())} joints fall outside the heat-map grid; clipping",
                      stacklevel=2)
        col = np.clip(col, -0.5, Wpx - 0.5)
        row = np.clip(row, -0.5, H - 0.5)
    rr = np.arange(H, dtype=float)[:, None]
    cc = np.arange(Wpx, dtype=float)[None, :]
    values = np.zeros((n, p, H, Wpx))
    sigma = config.heatmap_sigma

    def blob(r0, c0, peak):
        if sigma == 0:
            out = np.zeros((H, Wpx))
            ri = int(np.clip(np.floor(r0 + 0.5), 0, H - 1))
            ci = int(np.clip(np.floor(c0 + 0.5), 0, Wpx - 1))
            out[ri, ci] = peak
            return out
        return peak * np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2.0 * sigma ** 2))

    for t in range(n):
        for j in range(p):
            values[t, j] = blob(row[t, j], col[t, j], 1.0)
    if config.distractors > 0:
        rng = np.random.default_rng([config.seed, 0x4D43])
        lo, hi = config.distractor_offset
        for t in range(n):
            joints = rng.choice(p, size=min(config.distractors, p), replace=False)
            for j in joints:
                ang = rng.uniform(0, 2 * np.pi)
                dist = rng.uniform(lo, hi)
                r0 = np.clip(row[t, j] + dist * np.sin(ang), 0, H - 1)
                c0 = np.clip(col[t, j] + dist * np.cos(ang), 0, Wpx - 1)
                values[t, j] = values[t, j] + blob(r0, c0, config.distractor_mass)
    return HeatMapStack(values, gm)


__all__ = ["training_poses", "SynthConfig", "SynthSequence", "generate_sequence",
           "render_heatmaps"]
