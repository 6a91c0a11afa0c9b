import filecmp

import numpy as np
import pytest

from oracles import ray_box_naive, ray_plane_naive
from sfgmask import io as fio
from sfgmask.core import PoseSE3, validate
from sfgmask.geometry import project, rigid_flow, so3_exp
from sfgmask.scenes import (DEFAULT_K, SceneFileError, bundled_scenes, load_scene, parse_scene,
                            random_dynamic_scene, random_static_scene)
from sfgmask.synth import (Element, SceneSpec, camera_rays, export_sequence, load_sequence, render_frame,
                           render_last)


def test_static_scene_flow_equals_rigid_flow(rng):
    for _ in range(5):
        spec = random_static_scene(rng, n_frames=3)
        for t in range(2):
            f = render_frame(spec, t)
            rig = rigid_flow(f.depth, spec.relative_pose(t), spec.intrinsics)
            v = f.flow.valid & rig.valid
            assert v.sum() > 0.9 * v.size
            assert np.abs(f.flow.values - rig.values)[v].max() < 1e-9
            assert not f.motion_mask.values.any()


def test_depth_matches_naive_intersection(rng):
    K = DEFAULT_K
    box_pose = PoseSE3(so3_exp([0.1, 0.5, -0.2]), [0.3, -0.2, 6.0])
    plane_pose = PoseSE3(so3_exp([0.2, -0.1, 0.0]), [0.0, 0.0, 12.0])
    size = (2.0, 1.5, 3.0)
    spec = SceneSpec(K, [PoseSE3.identity()] * 2,
                     static=[Element("plane", None, "wall", [plane_pose]),
                             Element("box", size, "car", [box_pose])])
    f = render_frame(spec, 0)
    rays = camera_rays(K)
    inv = box_pose.inverse()
    half = np.array(size) / 2
    for y in range(0, K.height, 3):
        for x in range(0, K.width, 3):
            d = rays[y, x]
            tb = ray_box_naive(inv.translation, inv.rotation @ d, -half, half)
            tp = ray_plane_naive(np.zeros(3), d, plane_pose.translation, plane_pose.rotation[:, 2])
            hits = [t for t in (tb, tp) if t is not None]
            expected = min(hits) if hits else 0.0
            assert abs(f.depth.values[y, x] - expected) < 1e-9


def test_translating_box_seen_by_static_camera():
    K = DEFAULT_K
    n = 3
    start = PoseSE3(np.eye(3), [0.0, 0.0, 8.0])
    step = PoseSE3(np.eye(3), [0.4, 0.1, 0.0])
    poses = [start, step.compose(start), step.compose(step.compose(start))]
    spec = SceneSpec(K, [PoseSE3.identity()] * n,
                     static=[Element("plane", None, "wall", [PoseSE3(np.eye(3), [0, 0, 30.0])])],
                     objects=[Element("box", (2, 2, 2), "car", poses)])
    f = render_frame(spec, 0)
    on_box = f.instance_mask.values == 1
    assert on_box.any() and (~on_box).any()
    assert np.abs(f.flow.values[~on_box]).max() < 1e-12
    assert (f.motion_mask.values == on_box).all()
    ys, xs = np.nonzero(on_box)
    for y, x in list(zip(ys, xs))[::17]:
        z = f.depth.values[y, x]
        point = np.array([(x - K.cx) / K.fx * z, (y - K.cy) / K.fy * z, z])
        expected = project(point + [0.4, 0.1, 0.0], K) - (x, y)
        np.testing.assert_allclose(f.flow.values[y, x], expected, atol=1e-9)


def test_parked_car_not_in_motion_mask():
    spec = load_scene("parked_and_moving_car")
    for t in (0, 10, 28):
        f = render_frame(spec, t)
        assert not f.motion_mask.values[f.instance_mask.values == 1].any()
        assert f.motion_mask.values[f.instance_mask.values == 2].all()
        assert ((f.motion_mask.values == 1) <= (f.instance_mask.values > 0)).all()
        assert (f.depth.valid == (f.hit_element >= 0)).all()


def test_frame_bounds():
    spec = load_scene("parked_and_moving_car")
    with pytest.raises(IndexError):
        render_frame(spec, spec.n_frames - 1)
    assert render_last(spec).flow is None


def test_scene_invariants():
    K = DEFAULT_K
    with pytest.raises(ValueError):
        SceneSpec(K, [PoseSE3.identity()])
    with pytest.raises(ValueError):
        SceneSpec(K, [PoseSE3.identity()] * 3, objects=[Element("box", (1, 1, 1), "car",
                                                               [PoseSE3.identity()] * 2)])
    with pytest.raises(ValueError):
        Element("sphere", (1,), "car", [PoseSE3.identity()])
    with pytest.raises(ValueError):
        Element("box", (1, 1, 1), "dragon", [PoseSE3.identity()])


def test_sky_pixels_have_invalid_depth():
    spec = SceneSpec(DEFAULT_K, [PoseSE3.identity()] * 2,
                     objects=[Element("box", (1, 1, 1), "car", [PoseSE3(np.eye(3), [0, 0, 5.0])])])
    f = render_frame(spec, 0)
    assert (f.depth.values[0, 0] == 0) and not f.flow.valid[0, 0]
    assert f.class_mask.values[0, 0] == 0 and f.instance_mask.values[0, 0] == 0


def test_noise_knob_is_seeded(rng):
    spec = random_dynamic_scene(np.random.default_rng(3), flow_noise=0.2)
    a, b = render_frame(spec, 0), render_frame(spec, 0)
    assert (a.flow.values == b.flow.values).all()
    clean = render_frame(random_dynamic_scene(np.random.default_rng(3)), 0)
    diff = (a.flow.values - clean.flow.values)[a.flow.valid]
    assert 0.15 < diff.std() < 0.25


def test_export_roundtrip(tmp_path):
    spec = random_dynamic_scene(np.random.default_rng(5), n_frames=4)
    manifest = export_sequence(spec, tmp_path / "seq")
    seq = load_sequence(manifest)
    assert len(seq) == spec.n_frames
    lines = [ln for ln in manifest.read_text().splitlines() if not ln.startswith("#")]
    assert len(lines) == spec.n_frames
    assert lines[0] == "0, depth/000000.pfm, flow/000000.flo, class/000000.pgm, instance/000000.pgm, gtmask/000000.pgm"
    for t in range(spec.n_frames - 1):
        a, b = render_frame(spec, t), seq.frame(t)
        assert b.depth.values.tobytes() == a.depth.values.astype(np.float32).astype(np.float64).tobytes()
        assert b.flow.values.tobytes() == a.flow.values.astype(np.float32).astype(np.float64).tobytes()
        for m1, m2 in ((a.class_mask, b.class_mask), (a.instance_mask, b.instance_mask),
                       (a.motion_mask, b.motion_mask)):
            assert (m1.values == m2.values).all()
    kitti = (tmp_path / "seq" / "poses_kitti.txt").read_text().splitlines()
    for row, pose in zip(kitti, spec.camera):
        assert np.array([float(v) for v in row.split()]).tolist() == pose.as_matrix()[:3].ravel().tolist()
    assert fio.read_intrinsics(tmp_path / "seq" / "intrinsics.txt") == spec.intrinsics
    assert validate(seq.trajectory) is None


def test_export_is_deterministic(tmp_path):
    spec = load_scene("parked_and_moving_car")
    export_sequence(spec, tmp_path / "a")
    export_sequence(spec, tmp_path / "b", jobs=4)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in cmp.subdirs.values():
        assert not sub.diff_files and not sub.left_only and not sub.right_only
        assert not filecmp.cmpfiles(sub.left, sub.right, sub.common_files, shallow=False)[1]


def test_bundled_scene_listing():
    assert "parked_and_moving_car" in bundled_scenes()
    spec = load_scene("parked_and_moving_car")
    assert spec.n_frames == 30 and len(spec.objects) == 2


def test_scene_file_errors_carry_line_numbers():
    with pytest.raises(SceneFileError) as e:
        parse_scene("frames: 3\nintrinsics: {fx: 1, fy: 1, cx: 0, cy: 0, width: 4, height: 4}\n"
                    "objects:\n  - shape: box\n    size: [1, 1, 1]\n    class: car\n"
                    "    start: {translation: [0, 0]}\n")
    assert e.value.line == 7
    with pytest.raises(SceneFileError) as e:
        parse_scene("frames: 3\nintrinsics: [1, 2\n")
    assert e.value.line is not None
    with pytest.raises(SceneFileError, match="frames"):
        parse_scene("frames: 1\n")


def test_scene_file_explicit_poses():
    text = """
frames: 2
intrinsics: {fx: 60, fy: 60, cx: 32, cy: 24, width: 64, height: 48}
camera:
  poses:
    - {translation: [0, 0, 0]}
    - {translation: [0.1, 0, 0]}
static:
  - {shape: plane, class: wall, translation: [0, 0, 10]}
"""
    spec = parse_scene(text)
    f = render_frame(spec, 0)
    np.testing.assert_allclose(f.flow.values[..., 0], -0.6, atol=1e-12)
