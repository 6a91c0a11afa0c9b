"""Shared domain types for the motion-removal toolkit.

Every per-pixel field lives on the frame-t pixel grid, row-major with the
origin at the top-left pixel.  Arrays are indexed ``[row, col]`` i.e.
``[y, x]``; flow components are ``(u, v)`` with ``u`` pointing right and ``v``
pointing down.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

ROTATION_TOL = 1e-9

INSTANCE = "instance"
CLASS = "class"
MOTION = "motion"
MASK_KINDS = (INSTANCE, CLASS, MOTION)


class ValidationError(ValueError):
    """Raised when a core value violates one of its invariants."""


def _frozen(a, dtype=None) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform ``x -> R x + t``.

    Used both for camera poses (world-from-camera) and relative motions
    (camera t+1 from camera t).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", _frozen(self.translation, np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self * other``: apply ``other`` first, then ``self``."""
        return PoseSE3(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -(rt @ self.translation))

    def apply(self, points) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    __matmul__ = compose

    def __repr__(self):
        return f"PoseSE3(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel z-depth in meters.  Values <= 0 or non-finite are holes."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, np.float64))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def valid(self) -> np.ndarray:
        v = self.values
        return np.isfinite(v) & (v > 0)


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement ``(u, v)`` in pixels, shape (H, W, 2).

    ``valid`` marks pixels carrying a meaningful flow; invalid pixels hold 0.
    """

    values: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if self.valid is None:
            valid = np.isfinite(vals).all(axis=-1) if vals.ndim == 3 else np.zeros(vals.shape[:2], bool)
        else:
            valid = np.array(self.valid, dtype=bool)
        object.__setattr__(self, "values", _frozen(vals))
        object.__setattr__(self, "valid", _frozen(valid))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]


@dataclass(frozen=True, eq=False)
class ResidualField:
    """Non-negative per-pixel flow residual magnitude.

    When ``normalized`` is set the values were divided by the maximum over
    valid pixels; ``degenerate`` marks a field whose maximum was ~0, returned
    as all zeros.
    """

    values: np.ndarray
    valid: np.ndarray
    normalized: bool = False
    degenerate: bool = False
    scale: float = 1.0  # divisor applied by normalization

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, np.float64))
        object.__setattr__(self, "valid", _frozen(self.valid, bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Integer label raster; ``kind`` is one of instance, class, motion."""

    values: np.ndarray
    kind: str = INSTANCE

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, np.int64))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def instance_ids(self) -> list[int]:
        return [int(i) for i in np.unique(self.values) if i != 0]


@dataclass(frozen=True, eq=False)
class Trajectory:
    timestamps: np.ndarray
    poses: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "timestamps", _frozen(self.timestamps, np.float64).reshape(-1))
        object.__setattr__(self, "poses", tuple(self.poses))

    @classmethod
    def from_poses(cls, poses: Sequence[PoseSE3], dt: float = 1.0, t0: float = 0.0) -> "Trajectory":
        return cls(t0 + dt * np.arange(len(poses)), poses)

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.translation for p in self.poses])


def _validate_intrinsics(k: CameraIntrinsics) -> Optional[str]:
    if not (k.fx > 0 and k.fy > 0):
        return "focal lengths must be positive"
    if int(k.width) != k.width or int(k.height) != k.height or k.width < 1 or k.height < 1:
        return "image size must be positive integers"
    if not (0 <= k.cx < k.width and 0 <= k.cy < k.height):
        return "principal point outside image"
    return None


def _validate_pose(p: PoseSE3) -> Optional[str]:
    r, t = p.rotation, p.translation
    if not (np.isfinite(r).all() and np.isfinite(t).all()):
        return "non-finite pose"
    if np.abs(r.T @ r - np.eye(3)).max() > ROTATION_TOL:
        return "non-orthonormal rotation"
    if np.linalg.det(r) < 0:
        return "improper rotation"
    return None


def _shape_error(shape, intrinsics) -> Optional[str]:
    if intrinsics is not None and tuple(shape) != intrinsics.shape:
        return f"dimension mismatch: {tuple(shape)} vs intrinsics {intrinsics.shape}"
    return None


def validate(obj, intrinsics: Optional[CameraIntrinsics] = None) -> Optional[str]:
    """Return a description of the first violated invariant, or None if ok.

    ``intrinsics``, when given, is used to check raster dimensions.
    """
    if isinstance(obj, CameraIntrinsics):
        return _validate_intrinsics(obj)
    if isinstance(obj, PoseSE3):
        return _validate_pose(obj)
    if isinstance(obj, DepthMap):
        if obj.values.ndim != 2:
            return "depth map must be 2-D"
        return _shape_error(obj.shape, intrinsics)
    if isinstance(obj, FlowField):
        if obj.values.ndim != 3 or obj.values.shape[2] != 2:
            return "flow field must have shape (H, W, 2)"
        if obj.valid.shape != obj.shape:
            return "dimension mismatch: flow validity mask"
        if not np.isfinite(obj.values[obj.valid]).all():
            return "non-finite flow at valid pixel"
        return _shape_error(obj.shape, intrinsics)
    if isinstance(obj, ResidualField):
        if obj.valid.shape != obj.values.shape:
            return "dimension mismatch: residual validity mask"
        v = obj.values[obj.valid]
        if not np.isfinite(v).all() or (v < 0).any():
            return "negative or non-finite residual"
        if obj.normalized and v.size and v.max() != 0 and abs(v.max() - 1.0) > 1e-12:
            return "normalized residual maximum is not 1"
        return _shape_error(obj.shape, intrinsics)
    if isinstance(obj, LabelMask):
        if obj.values.ndim != 2:
            return "label mask must be 2-D"
        if obj.kind not in MASK_KINDS:
            return f"unknown mask kind {obj.kind!r}"
        if (obj.values < 0).any():
            return "negative label"
        if obj.kind == MOTION and (obj.values > 1).any():
            return "non-binary motion mask"
        return _shape_error(obj.shape, intrinsics)
    if isinstance(obj, Trajectory):
        if len(obj.timestamps) != len(obj.poses):
            return "timestamp count does not match pose count"
        if len(obj.timestamps) > 1 and not (np.diff(obj.timestamps) > 0).all():
            return "non-monotone timestamps"
        for i, p in enumerate(obj.poses):
            err = _validate_pose(p)
            if err:
                return f"pose {i}: {err}"
        return None
    raise TypeError(f"not a core type: {type(obj).__name__}")


def check(obj, intrinsics: Optional[CameraIntrinsics] = None):
    """Like :func:`validate` but raises :class:`ValidationError`; returns obj."""
    err = validate(obj, intrinsics)
    if err is not None:
        raise ValidationError(err)
    return obj
