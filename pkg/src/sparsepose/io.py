"""On-disk formats: JSON pose, dictionary and parameter files, binary heat maps."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geom import (
    ModelParams, PoseDictionary, PoseSequence2D, PoseSequence3D, Skeleton,
)
from .em import HeatMapStack

FORMAT_VERSION = 1
HEATMAP_MAGIC = b"MCHM"
_HEADER = struct.Struct("<4s5I")
_TRAILER = struct.Struct("<Q")


class FormatError(ValueError):
    """A file is malformed, truncated or of an unknown version."""


def _dump(obj, path):
    text = json.dumps(obj, indent=1, allow_nan=False)
    Path(path).write_text(text + "\n")


def _load(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def _check_header(doc, kinds):
    try:
        header = doc["header"]
    except (KeyError, TypeError):
        raise FormatError("missing header") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {header.get('format_version')!r}")
    if header.get("kind") not in kinds:
        raise FormatError(f"expected kind in {kinds}, got {header.get('kind')!r}")
    return header


def _array(x, what, ndim=None):
    try:
        a = np.array(x, dtype=float)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{what}: {exc}") from None
    if ndim is not None and a.ndim != ndim:
        raise FormatError(f"{what} must be {ndim}-dimensional, got shape {a.shape}")
    return a


# -- poses --------------------------------------------------------------------


def write_poses(path, poses, skeleton: Skeleton, units: str = "grid"):
    """Write a :class:`PoseSequence3D` or :class:`PoseSequence2D`."""
    is3d = isinstance(poses, PoseSequence3D)
    coords = np.swapaxes(poses.coords, 1, 2)  # (n, p, d)
    frames = coords.tolist()
    doc = {
        "header": {"format_version": FORMAT_VERSION, "kind": "pose3d" if is3d else "pose2d",
                   "skeleton": skeleton.to_dict(), "units": units},
        "frames": frames,
    }
    vis = getattr(poses, "visibility", None)
    if vis is not None:
        doc["visibility"] = vis.tolist()
        for t, j in np.argwhere(~vis):
            frames[t][j] = [None, None]
    _dump(doc, path)


def read_poses(path, kind=None):
    """Returns ``(poses, skeleton, units)``."""
    doc = _load(path)
    header = _check_header(doc, (kind,) if kind else ("pose3d", "pose2d"))
    try:
        skeleton = Skeleton.from_dict(header["skeleton"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad skeleton: {exc}") from None
    d = 3 if header["kind"] == "pose3d" else 2
    vis = doc.get("visibility")
    frames = doc.get("frames")
    if not isinstance(frames, list) or not frames:
        raise FormatError("no frames")
    rows = []
    for t, frame in enumerate(frames):
        if len(frame) != skeleton.p:
            raise FormatError(f"frame {t} has {len(frame)} joints, skeleton has {skeleton.p}")
        rows.append([[np.nan if v is None else v for v in joint] for joint in frame])
    coords = _array(rows, "frames", 3)
    if coords.shape[2] != d:
        raise FormatError(f"{header['kind']} joints need {d} coordinates")
    coords = np.swapaxes(coords, 1, 2)
    try:
        if d == 3:
            poses = PoseSequence3D(coords)
        else:
            poses = PoseSequence2D(coords, None if vis is None else np.array(vis, dtype=bool))
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    return poses, skeleton, header.get("units", "")


# -- dictionaries -------------------------------------------------------------


def write_dictionary(path, dictionary: PoseDictionary):
    doc = {
        "header": {
            "format_version": FORMAT_VERSION, "kind": "dictionary",
            "k": dictionary.k, "p": dictionary.p, "atom_scale": dictionary.atom_scale,
            "mean_limb_length": dictionary.mean_limb_length,
            "alpha_used": dictionary.alpha_used, "seed": dictionary.seed,
            "skeleton": dictionary.skeleton.to_dict(),
        },
        "atoms": dictionary.atoms.tolist(),
        "mean_pose_code": None if dictionary.mean_pose_code is None
        else dictionary.mean_pose_code.tolist(),
    }
    _dump(doc, path)


def read_dictionary(path) -> PoseDictionary:
    doc = _load(path)
    h = _check_header(doc, ("dictionary",))
    atoms = _array(doc.get("atoms"), "atoms", 3)
    if atoms.shape[0] != h.get("k") or atoms.shape[2] != h.get("p"):
        raise FormatError(f"atoms have shape {atoms.shape}, header says k={h.get('k')} p={h.get('p')}")
    code = doc.get("mean_pose_code")
    try:
        return PoseDictionary(
            Skeleton.from_dict(h["skeleton"]), atoms, float(h["atom_scale"]),
            float(h["mean_limb_length"]), None if code is None else _array(code, "mean_pose_code", 1),
            h.get("alpha_used"), h.get("seed"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid dictionary: {exc}") from None


# -- model parameters ---------------------------------------------------------


def params_to_dict(params: ModelParams) -> dict:
    return {
        "header": {"format_version": FORMAT_VERSION, "kind": "params", "camera": params.camera},
        "C": params.C.tolist(), "R": params.R.tolist(), "T": params.T.tolist(),
        "Z": None if params.Z is None else params.Z.tolist(),
    }


def write_params(path, params: ModelParams):
    _dump(params_to_dict(params), path)


def read_params(path) -> ModelParams:
    doc = _load(path)
    h = _check_header(doc, ("params",))
    try:
        Z = doc.get("Z")
        return ModelParams(_array(doc["C"], "C", 2), _array(doc["R"], "R", 3),
                           _array(doc["T"], "T", 2), None if Z is None else _array(Z, "Z", 2),
                           h["camera"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"invalid parameters: {exc}") from None


def write_json(path, obj):
    _dump(obj, path)


# -- heat maps ----------------------------------------------------------------


def write_heatmaps(path, stack: HeatMapStack):
    """``MCHM`` magic, five little-endian u32 (version, n, p, H, W), float32
    values in (frame, joint, row, col) order, then the payload length as u64."""
    n, p, H, W = stack.values.shape
    payload = np.ascontiguousarray(stack.values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(HEATMAP_MAGIC, FORMAT_VERSION, n, p, H, W))
        fh.write(payload)
        fh.write(_TRAILER.pack(len(payload)))


def read_heatmaps(path, grid_map=None) -> HeatMapStack:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(blob) < _HEADER.size + _TRAILER.size:
        raise FormatError("heat-map file is truncated")
    magic, version, n, p, H, W = _HEADER.unpack_from(blob, 0)
    if magic != HEATMAP_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported heat-map version {version}")
    size = n * p * H * W * 4
    if len(blob) != _HEADER.size + size + _TRAILER.size:
        raise FormatError(f"payload is {len(blob) - _HEADER.size - _TRAILER.size} bytes, "
                          f"header implies {size}")
    (declared,) = _TRAILER.unpack_from(blob, _HEADER.size + size)
    if declared != size:
        raise FormatError(f"trailer length {declared} does not match payload {size}")
    values = np.frombuffer(blob, dtype="<f4", count=n * p * H * W, offset=_HEADER.size)
    try:
        return HeatMapStack(values.reshape(n, p, H, W).astype(float), grid_map)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


__all__ = ["FormatError", "FORMAT_VERSION", "write_poses", "read_poses", "write_dictionary",
           "read_dictionary", "write_params", "read_params", "params_to_dict", "write_json",
           "write_heatmaps", "read_heatmaps"]
