"""Pinhole projection and rigid-flow synthesis."""

from __future__ import annotations

import numpy as np

from .core import CameraIntrinsics, DepthMap, FlowField, PoseSE3, ValidationError


class InvalidDepthError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


def compose(t1: PoseSE3, t2: PoseSE3) -> PoseSE3:
    """Return ``t1 * t2`` (``t2`` applied first)."""
    return t1.compose(t2)


def invert(t: PoseSE3) -> PoseSE3:
    return t.inverse()


def hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def so3_exp(w) -> np.ndarray:
    """Rotation matrix for the rotation vector ``w`` (Rodrigues)."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < 1e-8:
        # second-order Taylor expansion keeps orthonormality to ~1e-16
        return np.eye(3) + W + 0.5 * (W @ W)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * (W @ W)


def rotation_angle(r) -> float:
    """Angle (radians) of a rotation matrix.

    atan2 of the sine (from the antisymmetric part) and cosine (from the
    trace) stays accurate near 0, where arccos of the trace loses half the
    digits.
    """
    r = np.asarray(r, dtype=np.float64)
    c = (np.trace(r) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.arctan2(s, c))


def so3_log(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    theta = rotation_angle(r)
    v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-8:
        return 0.5 * v
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; use the symmetric part
        m = (r + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(m)))
        axis = m[:, i] / np.sqrt(m[i, i])
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * v


def pose_from_rotvec(rotvec, translation) -> PoseSE3:
    return PoseSE3(so3_exp(rotvec), translation)


def backproject(pixel, depth: float, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixel ``(x, y)`` at z-depth ``depth`` to a camera-frame point."""
    x, y = float(pixel[0]), float(pixel[1])
    if not np.isfinite(depth) or depth <= 0:
        raise InvalidDepthError(f"invalid depth {depth!r} at pixel ({x}, {y})")
    if not (0 <= x <= K.width - 1 and 0 <= y <= K.height - 1):
        raise ValueError(f"pixel ({x}, {y}) outside {K.width}x{K.height} image")
    return np.array([depth * (x - K.cx) / K.fx, depth * (y - K.cy) / K.fy, depth])


def project(point, K: CameraIntrinsics) -> np.ndarray:
    """Project a camera-frame point; the result may lie outside the image."""
    x, y, z = (float(c) for c in point)
    if not z > 0:
        raise BehindCameraError(f"point with z={z} is behind the camera")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def pixel_grid(K: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates ``(x, y)`` for every pixel, shape (H, W, 2)."""
    ys, xs = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
    return np.stack([xs, ys], axis=-1)


def backproject_depth(depth: DepthMap, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points for every pixel, shape (H, W, 3); holes give NaN rows."""
    if depth.shape != K.shape:
        raise ValidationError(f"dimension mismatch: depth {depth.shape} vs intrinsics {K.shape}")
    grid = pixel_grid(K)
    d = np.where(depth.valid, depth.values, np.nan)
    return np.stack([d * (grid[..., 0] - K.cx) / K.fx,
                     d * (grid[..., 1] - K.cy) / K.fy,
                     d], axis=-1)


def project_points(points, K: CameraIntrinsics):
    """Vectorized projection.

    Returns ``(pixels, ok)`` where ``ok`` is False for points with z <= 0 or
    non-finite coordinates; those pixels are set to 0.
    """
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    ok = np.isfinite(p).all(axis=-1) & (z > 0)
    zs = np.where(ok, z, 1.0)
    uv = np.stack([K.fx * p[..., 0] / zs + K.cx, K.fy * p[..., 1] / zs + K.cy], axis=-1)
    return np.where(ok[..., None], uv, 0.0), ok


def rigid_flow(depth: DepthMap, T: PoseSE3, K: CameraIntrinsics) -> FlowField:
    """Flow induced by camera motion ``T`` (camera t+1 from camera t) over a static scene.

    Pixels with invalid depth, or whose transformed point falls behind the
    camera, get zero flow and are marked invalid.  Pixels that land outside
    the frame keep their computed flow.
    """
    pts = backproject_depth(depth, K)
    moved = T.apply(pts)
    uv, ok = project_points(moved, K)
    flow = np.where(ok[..., None], uv - pixel_grid(K), 0.0)
    return FlowField(flow, ok)
