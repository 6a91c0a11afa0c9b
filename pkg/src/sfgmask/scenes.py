"""Scene description files and seeded scene generators.

Scene files are YAML.  Poses are given as ``{translation: [x, y, z],
rotation: [rx, ry, rz]}`` with the rotation as a rotation vector in radians.
Moving things use ``start`` plus a per-frame body-frame ``velocity`` of the
same form, or an explicit ``poses`` list.  Camera axes: x right, y down,
z forward; the world frame shares those axes.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .core import CameraIntrinsics, PoseSE3
from .geometry import so3_exp
from .synth import Element, SceneSpec


class SceneFileError(ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        where = f"{path or '<scene>'}" + (f":{line}" if line is not None else "")
        super().__init__(f"{where}: {message}")


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    mapping = loader.construct_mapping(node, deep=True)
    mapping["__line__"] = node.start_mark.line + 1
    return mapping


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def bundled_scenes() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("sfgmask.data").iterdir() if p.name.endswith(".yaml"))


def bundled_scene_path(name: str):
    return resources.files("sfgmask.data") / f"{name}.yaml"


def _line(node):
    return node.get("__line__") if isinstance(node, dict) else None


def _vec(node, key, n, parent, default=None):
    if key not in parent:
        if default is not None:
            return np.asarray(default, dtype=np.float64)
        raise SceneFileError(f"missing key {key!r}", _line(parent))
    v = parent[key]
    try:
        arr = np.asarray(v, dtype=np.float64).reshape(-1)
    except (TypeError, ValueError):
        raise SceneFileError(f"{key!r} must be a list of {n} numbers", _line(parent)) from None
    if arr.size != n or not np.isfinite(arr).all():
        raise SceneFileError(f"{key!r} must be a list of {n} numbers", _line(parent))
    return arr


def _pose(node) -> PoseSE3:
    if not isinstance(node, dict):
        raise SceneFileError("pose must be a mapping with translation/rotation")
    return PoseSE3(so3_exp(_vec(node, "rotation", 3, node, [0, 0, 0])),
                   _vec(node, "translation", 3, node, [0, 0, 0]))


def _trajectory(node, n_frames: int, what: str):
    """Per-frame poses from ``poses`` or ``start`` + ``velocity``; None if static."""
    if "poses" in node:
        poses = [_pose(p) for p in node["poses"]]
        if len(poses) != n_frames:
            raise SceneFileError(f"{what}: {len(poses)} poses for {n_frames} frames", _line(node))
        return poses
    start = _pose(node.get("start", node))
    if "velocity" not in node:
        return None
    step = _pose(node["velocity"])
    poses = [start]
    for _ in range(n_frames - 1):
        poses.append(poses[-1].compose(step))
    return poses


def parse_scene(text: str, path=None) -> SceneSpec:
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark or e.context_mark
        raise SceneFileError(e.problem or str(e), mark.line + 1 if mark else None, path) from None
    if not isinstance(doc, dict):
        raise SceneFileError("scene file must be a mapping", 1, path)
    try:
        return _build(doc)
    except SceneFileError as e:
        raise SceneFileError(str(e).split(": ", 1)[1], e.line, path) from None
    except (ValueError, TypeError) as e:
        raise SceneFileError(str(e), None, path) from None


def _build(doc) -> SceneSpec:
    n = doc.get("frames")
    if not isinstance(n, int) or n < 2:
        raise SceneFileError("'frames' must be an integer >= 2", _line(doc))
    kn = doc.get("intrinsics")
    if not isinstance(kn, dict):
        raise SceneFileError("missing 'intrinsics' mapping", _line(doc))
    try:
        K = CameraIntrinsics(float(kn["fx"]), float(kn["fy"]), float(kn["cx"]), float(kn["cy"]),
                             int(kn["width"]), int(kn["height"]))
    except KeyError as e:
        raise SceneFileError(f"intrinsics: missing {e.args[0]!r}", _line(kn)) from None
    cam_node = doc.get("camera", {})
    camera = _trajectory(cam_node, n, "camera") or [_pose(cam_node.get("start", cam_node))] * n

    def element(node, moving_ok):
        if not isinstance(node, dict):
            raise SceneFileError("element must be a mapping", _line(doc))
        shape = node.get("shape")
        size = node.get("size")
        try:
            poses = _trajectory(node, n, f"{shape} element") if moving_ok else None
            poses = poses or [_pose(node.get("start", node))]
            return Element(shape, tuple(float(s) for s in size) if size is not None else None,
                           node.get("class", "unlabeled"), poses)
        except SceneFileError:
            raise
        except (ValueError, TypeError) as e:
            raise SceneFileError(str(e), _line(node)) from None

    static = [element(s, False) for s in doc.get("static", []) or []]
    objects = [element(o, True) for o in doc.get("objects", []) or []]
    noise = doc.get("noise", {}) or {}
    return SceneSpec(K, camera, static, objects, seed=int(doc.get("seed", 0)),
                     depth_noise=float(noise.get("depth", 0.0)), flow_noise=float(noise.get("flow", 0.0)),
                     frame_rate=float(doc.get("frame_rate", 10.0)), name=str(doc.get("name", "scene")))


def load_scene(path_or_name) -> SceneSpec:
    """Load a scene file, or a bundled scene by name."""
    p = Path(str(path_or_name))
    if not p.exists() and str(path_or_name) in bundled_scenes():
        return parse_scene(bundled_scene_path(str(path_or_name)).read_text(), str(path_or_name))
    return parse_scene(p.read_text(), p)


# --- generators -------------------------------------------------------------------

DEFAULT_K = CameraIntrinsics(60.0, 60.0, 32.0, 24.0, 64, 48)

_GROUND = PoseSE3(so3_exp([np.pi / 2, 0, 0]), [0, 1.5, 0])  # road plane, 1.5 m below the camera


def _constant_motion(start: PoseSE3, step: PoseSE3, n: int):
    poses = [start]
    for _ in range(n - 1):
        poses.append(poses[-1].compose(step))
    return poses


def _random_camera(rng, n, max_step=0.3, max_rot=0.02):
    start = PoseSE3(so3_exp(rng.uniform(-0.05, 0.05, 3)), rng.uniform(-0.5, 0.5, 3))
    step = PoseSE3(so3_exp(rng.uniform(-max_rot, max_rot, 3)),
                   rng.uniform([-max_step, -max_step / 3, 0], [max_step, max_step / 3, max_step]))
    return _constant_motion(start, step, n)


def _backdrop(rng):
    """Road, two building rows and a far wall; covers every ray of a forward-looking camera."""
    return [
        Element("plane", None, "road", [_GROUND]),
        Element("box", (4.0, 12.0, 80.0), "building", [PoseSE3(np.eye(3), [-9.0 - rng.uniform(0, 2), -4.5, 30.0])]),
        Element("box", (4.0, 12.0, 80.0), "building", [PoseSE3(np.eye(3), [9.0 + rng.uniform(0, 2), -4.5, 30.0])]),
        Element("plane", None, "wall", [PoseSE3(np.eye(3), [0.0, 0.0, 70.0])]),
    ]


def random_static_scene(rng: np.random.Generator, n_frames: int = 2, K: CameraIntrinsics = DEFAULT_K,
                        n_boxes: int = 4) -> SceneSpec:
    """Random static geometry seen from a moving camera (no object motion)."""
    static = _backdrop(rng)
    objects = []
    for _ in range(n_boxes):
        r = PoseSE3(so3_exp(rng.uniform(-0.6, 0.6, 3)), [rng.uniform(-4, 4), rng.uniform(-1.5, 1.0),
                                                          rng.uniform(6, 25)])
        cls = str(rng.choice(["car", "tree", "pole", "building", "person"]))
        objects.append(Element("box", tuple(rng.uniform(0.4, 3.0, 3)), cls, [r]))
    return SceneSpec(K, _random_camera(rng, n_frames), static, objects, seed=int(rng.integers(1 << 31)))


def _car_box(rng):
    return (float(rng.uniform(1.6, 2.0)), float(rng.uniform(1.3, 1.7)), float(rng.uniform(3.8, 4.6)))


def random_dynamic_scene(rng: np.random.Generator, n_frames: int = 2, K: CameraIntrinsics = DEFAULT_K,
                         flow_noise: float = 0.0, n_moving: int = 1, n_parked: int = 1) -> SceneSpec:
    """Backdrop plus moving and parked movable-class objects.

    Moving objects get a lateral velocity large enough to stand clear of
    ~0.2 px flow noise.
    """
    static = _backdrop(rng)
    objects = []
    lanes = rng.permutation([-5.0, -2.5, 0.0, 2.5, 5.0])
    for i in range(n_moving + n_parked):
        moving = i < n_moving
        z = rng.uniform(8, 14) if moving else rng.uniform(10, 22)
        cls = str(rng.choice(["car", "truck", "bus", "person"])) if moving else str(rng.choice(["car", "truck"]))
        size = _car_box(rng) if cls != "person" else (0.6, 1.8, 0.6)
        start = PoseSE3(so3_exp([0, rng.uniform(-0.3, 0.3), 0]), [lanes[i], 1.5 - size[1] / 2, z])
        if moving:
            speed = rng.uniform(0.6, 1.0) * rng.choice([-1, 1])
            step = PoseSE3(so3_exp([0, rng.uniform(-0.02, 0.02), 0]), [speed, 0.0, rng.uniform(-0.3, 0.3)])
            poses = _constant_motion(start, step, n_frames)
        else:
            poses = [start]
        objects.append(Element("box", size, cls, poses))
    return SceneSpec(K, _random_camera(rng, n_frames, max_step=0.2), static, objects,
                     seed=int(rng.integers(1 << 31)), flow_noise=flow_noise)


def dominant_mover_scene(rng: np.random.Generator, n_frames: int = 4, K: CameraIntrinsics = DEFAULT_K,
                         flow_noise: float = 0.0) -> SceneSpec:
    """A large nearby vehicle in motion that covers at least 30% of the image."""
    static = _backdrop(rng)
    size = (float(rng.uniform(2.4, 2.8)), float(rng.uniform(2.8, 3.2)), float(rng.uniform(8, 10)))
    start = PoseSE3(so3_exp([0, rng.uniform(-0.1, 0.1), 0]),
                    [rng.uniform(-0.8, 0.8), 1.5 - size[1] / 2, rng.uniform(3.8, 4.5) + size[2] / 2])
    step = PoseSE3(so3_exp([0, rng.uniform(-0.03, 0.03), 0]),
                   [rng.uniform(0.15, 0.3) * rng.choice([-1, 1]), 0.0, rng.uniform(-0.1, 0.1)])
    objects = [Element("box", size, str(rng.choice(["truck", "bus"])), _constant_motion(start, step, n_frames))]
    return SceneSpec(K, _random_camera(rng, n_frames, max_step=0.2, max_rot=0.01), static, objects,
                     seed=int(rng.integers(1 << 31)), flow_noise=flow_noise)
