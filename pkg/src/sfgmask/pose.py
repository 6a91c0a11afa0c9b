"""Two-frame camera pose from depth + flow correspondences.

Pixels flagged by a motion mask are dropped before solving, which is the
two-frame analogue of removing masked keypoints and map points from bundle
adjustment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import CameraIntrinsics, DepthMap, FlowField, LabelMask, PoseSE3, ValidationError
from .geometry import backproject_depth, hat, pixel_grid, rotation_angle, so3_exp

log = logging.getLogger(__name__)

HUBER_DELTA = 2.0
MIN_CORRESPONDENCES = 6
MAX_HALVINGS = 20
COST_SLACK = 1e-12


class EmptyCorrespondenceError(ValueError):
    pass


class UnderdeterminedError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Correspondences:
    points: np.ndarray  # (N, 3) camera-t points
    pixels: np.ndarray  # (N, 2) observed pixels in frame t+1

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    pose: PoseSE3  # camera t+1 from camera t
    inliers: int
    rmse: float
    iterations: int
    converged: bool


def sample_correspondences(depth: DepthMap, flow: FlowField, mask: LabelMask | None,
                           K: CameraIntrinsics, stride: int = 1) -> Correspondences:
    """Take every ``stride``-th pixel (both axes) with valid depth and flow, outside ``mask``."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if depth.shape != flow.shape or depth.shape != K.shape or (mask is not None and mask.shape != depth.shape):
        raise ValidationError("dimension mismatch between depth, flow, mask and intrinsics")
    keep = depth.valid & flow.valid
    if mask is not None:
        keep &= mask.values == 0
    sub = np.zeros(K.shape, dtype=bool)
    sub[::stride, ::stride] = True
    keep &= sub
    if not keep.any():
        raise EmptyCorrespondenceError("no correspondences left after masking")
    pts = backproject_depth(depth, K)[keep]
    pix = (pixel_grid(K) + flow.values)[keep]
    return Correspondences(pts, pix)


def residuals(pose: PoseSE3, corr: Correspondences, K: CameraIntrinsics) -> np.ndarray:
    """Reprojection residuals, shape (N, 2)."""
    p = pose.apply(corr.points)
    return np.stack([K.fx * p[:, 0] / p[:, 2] + K.cx, K.fy * p[:, 1] / p[:, 2] + K.cy], axis=1) - corr.pixels


def perturb(pose: PoseSE3, delta) -> PoseSE3:
    """Left update ``(exp(w), v) * pose`` with ``delta = (w, v)``."""
    delta = np.asarray(delta, dtype=np.float64)
    return PoseSE3(so3_exp(delta[:3]), delta[3:]).compose(pose)


def jacobian(pose: PoseSE3, corr: Correspondences, K: CameraIntrinsics) -> np.ndarray:
    """d residual / d delta at delta = 0, shape (N, 2, 6)."""
    p = pose.apply(corr.points)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    n = len(p)
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = K.fx / z
    dproj[:, 0, 2] = -K.fx * x / z**2
    dproj[:, 1, 1] = K.fy / z
    dproj[:, 1, 2] = -K.fy * y / z**2
    dp = np.zeros((n, 3, 6))
    dp[:, :, :3] = -np.stack([hat(pi) for pi in p])  # d(exp(w) p)/dw = -[p]x
    dp[:, :, 3:] = np.eye(3)
    return dproj @ dp


def _weights(r_norm, robust):
    if not robust:
        return np.ones_like(r_norm)
    return np.where(r_norm <= HUBER_DELTA, 1.0, HUBER_DELTA / np.maximum(r_norm, 1e-300))


def _cost(r_norm, robust):
    if not robust:
        return float((r_norm**2).sum())
    big = r_norm > HUBER_DELTA
    return float(np.where(big, 2 * HUBER_DELTA * r_norm - HUBER_DELTA**2, r_norm**2).sum())


def estimate_pose(corr: Correspondences, K: CameraIntrinsics, robust: bool = True,
                  max_iter: int = 50, step_tol: float = 1e-10, init: PoseSE3 | None = None) -> PoseEstimate:
    """Gauss-Newton over SE(3) from identity, Huber-weighted (IRLS) when ``robust``.

    Each step is halved until the cost drops.  Stops when the full update
    norm drops below ``step_tol`` or after ``max_iter`` iterations.  Five
    consecutive iterations without a cost decrease mark the result as not
    converged; it is still returned.
    """
    n = len(corr)
    if n < MIN_CORRESPONDENCES:
        raise UnderdeterminedError(f"need >= {MIN_CORRESPONDENCES} correspondences, got {n}")
    pose = init or PoseSE3.identity()
    r = residuals(pose, corr, K)
    rn = np.linalg.norm(r, axis=1)
    cost = _cost(rn, robust)
    stalled, converged, it = 0, False, 0
    for it in range(1, max_iter + 1):
        J = jacobian(pose, corr, K).reshape(-1, 6)
        w = np.repeat(_weights(rn, robust), 2)
        H = J.T @ (w[:, None] * J)
        g = J.T @ (w * r.reshape(-1))
        try:
            delta = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            delta = -np.linalg.lstsq(H, g, rcond=None)[0]
        if np.linalg.norm(delta) < step_tol:
            pose = perturb(pose, delta)
            r = residuals(pose, corr, K)
            rn = np.linalg.norm(r, axis=1)
            converged = True
            break
        # step halving keeps large initial motions from overshooting; the
        # slack admits roundoff-level changes close to the optimum
        accept = cost + COST_SLACK * abs(cost)
        for _ in range(MAX_HALVINGS):
            cand = perturb(pose, delta)
            r_c = residuals(cand, corr, K)
            rn_c = np.linalg.norm(r_c, axis=1)
            new_cost = _cost(rn_c, robust) if (cand.apply(corr.points)[:, 2] > 0).all() else np.inf
            if new_cost <= accept:
                break
            delta = delta / 2
        stalled = stalled + 1 if not new_cost < cost else 0
        if new_cost <= accept:
            pose, r, rn, cost = cand, r_c, rn_c, new_cost
        if stalled >= 5:
            break
    if stalled >= 5:
        converged = False
        log.warning("pose solver stalled after %d iterations", it)
    inliers = int((rn <= HUBER_DELTA).sum())
    rmse = float(np.sqrt(np.mean(rn**2)))
    return PoseEstimate(pose, inliers, rmse, it, converged)


def pose_error(est: PoseSE3, gt: PoseSE3) -> tuple[float, float]:
    """Translation (m) and rotation (rad) parts of ``gt^-1 * est``."""
    e = gt.inverse().compose(est)
    return float(np.linalg.norm(e.translation)), rotation_angle(e.rotation)


def ransac_filter(corr: Correspondences, K: CameraIntrinsics, seed: int = 0, iterations: int = 64,
                  threshold: float = 2 * HUBER_DELTA) -> Correspondences:
    """Keep the largest consensus set of 6-point least-squares fits (fixed seed)."""
    n = len(corr)
    if n <= MIN_CORRESPONDENCES:
        return corr
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(iterations):
        pick = rng.choice(n, MIN_CORRESPONDENCES, replace=False)
        sample = Correspondences(corr.points[pick], corr.pixels[pick])
        try:
            est = estimate_pose(sample, K, robust=False, max_iter=20)
        except UnderdeterminedError:
            continue
        inl = np.linalg.norm(residuals(est.pose, corr, K), axis=1) < threshold
        if best is None or inl.sum() > best.sum():
            best = inl
    if best is None or best.sum() < MIN_CORRESPONDENCES:
        return corr
    return Correspondences(corr.points[best], corr.pixels[best])
