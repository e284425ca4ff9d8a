"""Monocular 3D pose sequences from 2D joints or heat maps via a sparse pose dictionary."""

from .geom import (
    CROP_SIZE, ORTHOGRAPHIC, PERSPECTIVE, GeometryError, Hyperparams, ModelParams, PoseDictionary,
    PoseSequence2D, PoseSequence3D, Skeleton, calibration_matrix, camera_frame_pose,
    compose_pose, human15, loss, objective, prior_penalty, project,
)
from .bcd import InitStrategy, InvariantViolation, initialize, run_bcd
from .em import GridMap, HeatMapStack, check_expectation_identity, expected_W, run_em

__version__ = "0.1.0"

__all__ = [
    "CROP_SIZE", "ORTHOGRAPHIC", "PERSPECTIVE", "GeometryError", "Hyperparams", "ModelParams",
    "PoseDictionary", "PoseSequence2D", "PoseSequence3D", "Skeleton", "calibration_matrix",
    "camera_frame_pose", "compose_pose", "human15", "loss", "objective", "prior_penalty",
    "project", "InitStrategy", "InvariantViolation", "initialize", "run_bcd", "GridMap",
    "HeatMapStack", "check_expectation_identity", "expected_W", "run_em",
]
