import json
import struct

import numpy as np
import pytest

from sparsepose.em import HeatMapStack
from sparsepose.geom import (
    PERSPECTIVE, PoseSequence2D, PoseSequence3D, chain_skeleton, human15,
)
from sparsepose.io import (
    FormatError, read_dictionary, read_heatmaps, read_params, read_poses, write_dictionary,
    write_heatmaps, write_params, write_poses,
)

from conftest import random_params, small_dictionary


def test_pose_files_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    sk = human15()
    p3 = PoseSequence3D(rng.standard_normal((4, 3, 15)) * 100)
    write_poses(tmp_path / "a.json", p3, sk, "mm")
    back, sk2, units = read_poses(tmp_path / "a.json", "pose3d")
    assert np.array_equal(back.coords, p3.coords) and sk2 == sk and units == "mm"

    vis = np.ones((4, 15), bool)
    vis[1, 3] = False
    p2 = PoseSequence2D(rng.standard_normal((4, 2, 15)), vis)
    write_poses(tmp_path / "b.json", p2, sk)
    back, _, _ = read_poses(tmp_path / "b.json")
    assert np.array_equal(back.visibility, vis)
    assert np.array_equal(back.coords[vis.nonzero()[0], :, vis.nonzero()[1]],
                          p2.coords[vis.nonzero()[0], :, vis.nonzero()[1]])
    assert json.loads((tmp_path / "b.json").read_text())["frames"][1][3] == [None, None]
    write_poses(tmp_path / "c.json", back, sk)
    assert (tmp_path / "b.json").read_bytes() == (tmp_path / "c.json").read_bytes()


def test_pose_file_errors(tmp_path):
    sk = chain_skeleton(3)
    write_poses(tmp_path / "a.json", PoseSequence3D(np.zeros((1, 3, 3))), sk)
    doc = json.loads((tmp_path / "a.json").read_text())
    with pytest.raises(FormatError, match="kind"):
        read_poses(tmp_path / "a.json", "pose2d")
    bad = dict(doc, header=dict(doc["header"], format_version=7))
    (tmp_path / "v.json").write_text(json.dumps(bad))
    with pytest.raises(FormatError, match="format_version"):
        read_poses(tmp_path / "v.json")
    short = dict(doc, frames=[doc["frames"][0][:2]])
    (tmp_path / "s.json").write_text(json.dumps(short))
    with pytest.raises(FormatError, match="frame 0 has 2 joints"):
        read_poses(tmp_path / "s.json")
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(FormatError):
        read_poses(tmp_path / "x.json")
    with pytest.raises(FormatError):
        read_poses(tmp_path / "missing.json")


def test_dictionary_round_trip_is_bitwise(tmp_path, dict16):
    write_dictionary(tmp_path / "d.json", dict16)
    back = read_dictionary(tmp_path / "d.json")
    assert np.array_equal(back.atoms, dict16.atoms)
    assert np.array_equal(back.mean_pose_code, dict16.mean_pose_code)
    assert back.mean_limb_length == dict16.mean_limb_length
    write_dictionary(tmp_path / "e.json", back)
    assert (tmp_path / "d.json").read_bytes() == (tmp_path / "e.json").read_bytes()


def test_dictionary_load_checks_the_atom_scale(tmp_path, dict16):
    write_dictionary(tmp_path / "d.json", dict16)
    doc = json.loads((tmp_path / "d.json").read_text())
    doc["header"]["atom_scale"] = 0.5
    (tmp_path / "d.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="norm"):
        read_dictionary(tmp_path / "d.json")
    doc["header"]["atom_scale"] = 1.0
    doc["header"]["k"] = 3
    (tmp_path / "d.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="k=3"):
        read_dictionary(tmp_path / "d.json")


@pytest.mark.parametrize("camera", ["orthographic", PERSPECTIVE])
def test_params_round_trip(tmp_path, rng, camera):
    d = small_dictionary(rng)
    params = random_params(rng, d, 3, camera)
    write_params(tmp_path / "p.json", params)
    back = read_params(tmp_path / "p.json")
    assert back.camera == camera
    for name in "CRTZ":
        a, b = getattr(params, name), getattr(back, name)
        assert (a is None and b is None) or np.array_equal(a, b)


def _stack():
    v = (np.random.default_rng(1).random((2, 3, 5, 4)) + 0.01).astype(np.float32).astype(float)
    return HeatMapStack(v)


def test_heatmap_round_trip_is_bitwise(tmp_path):
    stack = _stack()
    write_heatmaps(tmp_path / "h.mchm", stack)
    back = read_heatmaps(tmp_path / "h.mchm")
    assert np.array_equal(back.values, stack.values)
    write_heatmaps(tmp_path / "g.mchm", back)
    assert (tmp_path / "h.mchm").read_bytes() == (tmp_path / "g.mchm").read_bytes()
    blob = (tmp_path / "h.mchm").read_bytes()
    assert blob[:4] == b"MCHM"
    assert struct.unpack_from("<5I", blob, 4) == (1, 2, 3, 5, 4)
    assert len(blob) == 24 + 2 * 3 * 5 * 4 * 4 + 8


@pytest.mark.parametrize("corrupt, message", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
    (lambda b: b[:-12] + b[-8:], "payload"),
    (lambda b: b[:-8] + struct.pack("<Q", 3), "trailer"),
    (lambda b: b[:10], "truncated"),
])
def test_heatmap_corruption_is_detected(tmp_path, corrupt, message):
    write_heatmaps(tmp_path / "h.mchm", _stack())
    (tmp_path / "h.mchm").write_bytes(corrupt((tmp_path / "h.mchm").read_bytes()))
    with pytest.raises(FormatError, match=message):
        read_heatmaps(tmp_path / "h.mchm")


def test_heatmap_with_an_empty_channel_is_rejected(tmp_path):
    write_heatmaps(tmp_path / "h.mchm", _stack())
    blob = bytearray((tmp_path / "h.mchm").read_bytes())
    blob[24:24 + 5 * 4 * 4] = bytes(5 * 4 * 4)
    (tmp_path / "h.mchm").write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="frame 0, joint 0"):
        read_heatmaps(tmp_path / "h.mchm")
