"""Ray-cast ground-truth oracle for piecewise-rigid scenes.

A scene is a camera trajectory plus planes and boxes, each carrying a class
name and a pose (element-to-world) per frame.  Static geometry has no
instance id; every entry of ``SceneSpec.objects`` is an instance, numbered
1..n in list order, whether it moves or not.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io as fio
from .core import (CLASS, INSTANCE, MOTION, CameraIntrinsics, DepthMap, FlowField, LabelMask,
                   PoseSE3, Trajectory, ValidationError, check)
from .fusion import CLASS_IDS
from .geometry import pixel_grid, project_points

NEAR = 1e-6
IDENTITY_TOL = 1e-12

MANIFEST = "manifest.txt"
INTRINSICS = "intrinsics.txt"
POSES_TUM = "poses_tum.txt"
POSES_KITTI = "poses_kitti.txt"


@dataclass(frozen=True, eq=False)
class Element:
    """A plane or box.

    Planes lie in their local z = 0 plane; ``size`` is ``(sx, sy)`` or None
    for an unbounded plane.  Boxes are centered at the local origin with full
    extents ``size = (sx, sy, sz)``.  ``poses`` holds either one pose (static)
    or one per frame.
    """

    shape: str
    size: Optional[tuple]
    class_name: str
    poses: tuple

    def __post_init__(self):
        if self.shape not in ("plane", "box"):
            raise ValidationError(f"unknown shape {self.shape!r}")
        if self.shape == "box" and (self.size is None or len(self.size) != 3):
            raise ValidationError("box needs size (sx, sy, sz)")
        if self.shape == "plane" and self.size is not None and len(self.size) != 2:
            raise ValidationError("plane size must be (sx, sy) or None")
        if self.size is not None and min(self.size) <= 0:
            raise ValidationError("element size must be positive")
        if self.class_name not in CLASS_IDS:
            raise ValidationError(f"unknown class name {self.class_name!r}")
        object.__setattr__(self, "poses", tuple(self.poses))
        if not self.poses:
            raise ValidationError("element needs at least one pose")
        for p in self.poses:
            check(p)

    def pose(self, t: int) -> PoseSE3:
        return self.poses[0] if len(self.poses) == 1 else self.poses[t]

    def moves_between(self, t: int, t1: int) -> bool:
        if len(self.poses) == 1:
            return False
        rel = self.pose(t1).compose(self.pose(t).inverse())
        return not (np.abs(rel.rotation - np.eye(3)).max() <= IDENTITY_TOL
                    and np.abs(rel.translation).max() <= IDENTITY_TOL)


@dataclass(frozen=True, eq=False)
class SceneSpec:
    intrinsics: CameraIntrinsics
    camera: tuple  # world-from-camera per frame
    static: tuple = ()
    objects: tuple = ()
    seed: int = 0
    depth_noise: float = 0.0  # meters
    flow_noise: float = 0.0  # pixels
    frame_rate: float = 10.0
    name: str = "scene"

    def __post_init__(self):
        object.__setattr__(self, "camera", tuple(self.camera))
        object.__setattr__(self, "static", tuple(self.static))
        object.__setattr__(self, "objects", tuple(self.objects))
        check(self.intrinsics)
        if len(self.camera) < 2:
            raise ValidationError("a scene needs at least 2 frames")
        for p in self.camera:
            check(p)
        for e in self.static:
            if len(e.poses) != 1:
                raise ValidationError("static geometry takes a single pose")
        for i, e in enumerate(self.objects, start=1):
            if len(e.poses) not in (1, self.n_frames):
                raise ValidationError(f"object {i}: needs a pose for each of {self.n_frames} frames")
        if self.depth_noise < 0 or self.flow_noise < 0:
            raise ValidationError("noise levels must be non-negative")

    @property
    def n_frames(self) -> int:
        return len(self.camera)

    def elements(self):
        """(element, instance id) pairs; static geometry has id 0."""
        return [(e, 0) for e in self.static] + [(e, i) for i, e in enumerate(self.objects, start=1)]

    def relative_pose(self, t: int) -> PoseSE3:
        """Camera t+1 from camera t."""
        return self.camera[t + 1].inverse().compose(self.camera[t])

    def trajectory(self) -> Trajectory:
        return Trajectory.from_poses(self.camera, 1.0 / self.frame_rate)


@dataclass(frozen=True, eq=False)
class FramePackage:
    index: int
    depth: DepthMap
    class_mask: LabelMask
    instance_mask: LabelMask
    flow: Optional[FlowField]
    pose: PoseSE3
    motion_mask: Optional[LabelMask]
    hit_element: np.ndarray = field(repr=False, default=None)  # -1 where no surface


def camera_rays(K: CameraIntrinsics) -> np.ndarray:
    """Ray direction per pixel with unit z component, shape (H, W, 3)."""
    g = pixel_grid(K)
    return np.stack([(g[..., 0] - K.cx) / K.fx, (g[..., 1] - K.cy) / K.fy,
                     np.ones(K.shape)], axis=-1)


def intersect(element: Element, local_to_cam: PoseSE3, rays: np.ndarray) -> np.ndarray:
    """Ray parameter of the first hit for rays from the camera origin, inf on miss.

    ``local_to_cam`` maps element coordinates into the camera frame.  Since
    rays have unit z, the parameter equals the z-depth of the hit.
    """
    to_local = local_to_cam.inverse()
    o = to_local.translation
    d = rays @ to_local.rotation.T
    with np.errstate(divide="ignore", invalid="ignore"):
        if element.shape == "plane":
            lam = -o[2] / d[..., 2]
            ok = np.isfinite(lam) & (lam > NEAR)
            if element.size is not None:
                hit = o + lam[..., None] * d
                ok &= (np.abs(hit[..., 0]) <= element.size[0] / 2) & (np.abs(hit[..., 1]) <= element.size[1] / 2)
            return np.where(ok, lam, np.inf)
        half = np.asarray(element.size, dtype=np.float64) / 2
        t1 = (-half - o) / d
        t2 = (half - o) / d
        lo = np.fmax.reduce(np.fmin(t1, t2), axis=-1)
        hi = np.fmin.reduce(np.fmax(t1, t2), axis=-1)
        lam = np.where(lo > NEAR, lo, hi)
        ok = (hi >= lo) & (lam > NEAR) & np.isfinite(lam)
        return np.where(ok, lam, np.inf)


def _raycast(spec: SceneSpec, t: int):
    K = spec.intrinsics
    rays = camera_rays(K)
    cam = spec.camera[t]
    best = np.full(K.shape, np.inf)
    which = np.full(K.shape, -1, dtype=np.int64)
    for idx, (e, _) in enumerate(spec.elements()):
        lam = intersect(e, cam.inverse().compose(e.pose(t)), rays)
        closer = lam < best
        best = np.where(closer, lam, best)
        which = np.where(closer, idx, which)
    return rays, best, which


def render_geometry(spec: SceneSpec, t: int):
    """Noise-free depth, class and instance rasters for frame ``t``."""
    if not 0 <= t < spec.n_frames:
        raise IndexError(f"frame {t} outside 0..{spec.n_frames - 1}")
    rays, lam, which = _raycast(spec, t)
    hit = which >= 0
    elements = spec.elements()
    cls_lut = np.array([CLASS_IDS[e.class_name] for e, _ in elements] + [0], dtype=np.int64)
    inst_lut = np.array([i for _, i in elements] + [0], dtype=np.int64)
    depth = np.where(hit, lam, 0.0)
    return rays, depth, cls_lut[which], inst_lut[which], which


def render_frame(spec: SceneSpec, t: int) -> FramePackage:
    """Render frame ``t`` with full flow to frame t+1.

    Each visible surface point is moved with its element's world motion from
    t to t+1, expressed in camera t+1 and projected.  Flow is invalid where
    there is no surface or the moved point is behind camera t+1.
    """
    if not 0 <= t < spec.n_frames - 1:
        raise IndexError(f"frame {t} has no successor (scene has {spec.n_frames} frames)")
    K = spec.intrinsics
    rays, depth, cls, inst, which = render_geometry(spec, t)
    hit = which >= 0
    points = np.where(hit[..., None], depth[..., None] * rays, np.nan)

    cam_t, cam_t1 = spec.camera[t], spec.camera[t + 1]
    moved = np.full(points.shape, np.nan)
    motion = np.zeros(K.shape, dtype=np.int64)
    static_motion = cam_t1.inverse().compose(cam_t)
    for idx, (e, _) in enumerate(spec.elements()):
        sel = which == idx
        if not sel.any():
            continue
        if e.moves_between(t, t + 1):
            chain = cam_t1.inverse().compose(e.pose(t + 1)).compose(e.pose(t).inverse()).compose(cam_t)
            motion[sel] = 1
        else:
            chain = static_motion
        moved[sel] = chain.apply(points[sel])
    uv, ok = project_points(moved, K)
    flow = np.where(ok[..., None], uv - pixel_grid(K), 0.0)

    rng = np.random.default_rng([spec.seed, t])
    if spec.flow_noise > 0:
        noise = rng.normal(0.0, spec.flow_noise, flow.shape)
        flow = np.where(ok[..., None], flow + noise, 0.0)
    if spec.depth_noise > 0:
        noise = rng.normal(0.0, spec.depth_noise, depth.shape)
        depth = np.where(hit, np.maximum(depth + noise, NEAR), 0.0)

    return FramePackage(t, DepthMap(depth), LabelMask(cls, CLASS), LabelMask(inst, INSTANCE),
                        FlowField(flow, ok), cam_t, LabelMask(motion, MOTION), which)


def render_last(spec: SceneSpec) -> FramePackage:
    """Final frame: geometry only, no flow or motion mask."""
    t = spec.n_frames - 1
    _, depth, cls, inst, which = render_geometry(spec, t)
    return FramePackage(t, DepthMap(depth), LabelMask(cls, CLASS), LabelMask(inst, INSTANCE),
                        None, spec.camera[t], None, which)


# --- export -------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    index: int
    depth: Optional[str]
    flow: Optional[str]
    class_mask: Optional[str]
    instance: Optional[str]
    gtmask: Optional[str]


MANIFEST_HEADER = "# index, depth_path, flow_path, class_path, instance_path, gtmask_path\n"


def format_manifest(entries: Sequence[ManifestEntry]) -> str:
    lines = [MANIFEST_HEADER]
    for e in entries:
        fields = [str(e.index)] + [p or "-" for p in (e.depth, e.flow, e.class_mask, e.instance, e.gtmask)]
        lines.append(", ".join(fields) + "\n")
    return "".join(lines)


def parse_manifest(text: str, path=None) -> list[ManifestEntry]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        fields = [f.strip() for f in s.split(",")]
        if len(fields) != 6:
            raise fio.FormatError(f"expected 6 fields, got {len(fields)}", lineno, path)
        try:
            index = int(fields[0])
        except ValueError:
            raise fio.FormatError(f"bad frame index {fields[0]!r}", lineno, path) from None
        if out and index <= out[-1].index:
            raise fio.FormatError("frame indices must increase", lineno, path)
        out.append(ManifestEntry(index, *[None if f == "-" else f for f in fields[1:]]))
    return out


def export_sequence(spec: SceneSpec, out_dir, jobs: int = 1) -> Path:
    """Render every frame and write the sequence; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = spec.n_frames

    def one(t):
        pkg = render_frame(spec, t) if t < n - 1 else render_last(spec)
        stem = f"{t:06d}"
        entry = ManifestEntry(t, f"depth/{stem}.pfm",
                              f"flow/{stem}.flo" if pkg.flow is not None else None,
                              f"class/{stem}.pgm", f"instance/{stem}.pgm",
                              f"gtmask/{stem}.pgm" if pkg.motion_mask is not None else None)
        try:
            fio.write_pfm(out / entry.depth, pkg.depth)
            fio.write_pgm(out / entry.class_mask, pkg.class_mask)
            fio.write_pgm(out / entry.instance, pkg.instance_mask)
            if pkg.flow is not None:
                fio.write_flo(out / entry.flow, pkg.flow)
                fio.write_pgm(out / entry.gtmask, pkg.motion_mask)
        except OSError as e:
            raise OSError(f"writing frame {t} under {out}: {e}") from e
        return entry

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(jobs) as pool:
            entries = list(pool.map(one, range(n)))
    else:
        entries = [one(t) for t in range(n)]

    traj = spec.trajectory()
    fio.write_tum(out / POSES_TUM, traj)
    fio.write_kitti(out / POSES_KITTI, traj)
    fio.write_intrinsics(out / INTRINSICS, spec.intrinsics)
    fio.write_atomic(out / MANIFEST, format_manifest(entries))
    return out / MANIFEST


@dataclass
class LoadedSequence:
    """A sequence loaded back from disk."""

    root: Path
    intrinsics: CameraIntrinsics
    trajectory: Trajectory
    entries: list

    def frame(self, i: int) -> FramePackage:
        e = self.entries[i]
        r = self.root

        def opt(rel, reader, *a):
            return reader(r / rel, *a) if rel else None

        return FramePackage(e.index, opt(e.depth, fio.read_pfm), opt(e.class_mask, fio.read_pgm, CLASS),
                            opt(e.instance, fio.read_pgm, INSTANCE), opt(e.flow, fio.read_flo),
                            self.trajectory.poses[i], opt(e.gtmask, fio.read_pgm, MOTION))

    def relative_pose(self, i: int) -> PoseSE3:
        p = self.trajectory.poses
        return p[i + 1].inverse().compose(p[i])

    def __len__(self):
        return len(self.entries)


def load_sequence(manifest) -> LoadedSequence:
    manifest = Path(manifest)
    root = manifest.parent
    entries = parse_manifest(manifest.read_text(), manifest)
    traj = fio.read_tum(root / POSES_TUM)
    if len(traj) != len(entries):
        raise fio.FormatError(f"{len(traj)} poses for {len(entries)} manifest frames", None, manifest)
    return LoadedSequence(root, fio.read_intrinsics(root / INTRINSICS), traj, entries)
