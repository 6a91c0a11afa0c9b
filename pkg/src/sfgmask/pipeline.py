"""End-to-end motion removal for a frame pair and the masking-benefit experiment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .core import MOTION, CameraIntrinsics, DepthMap, FlowField, LabelMask, PoseSE3, Trajectory
from .fusion import MovableClassSet, fuse
from .geometry import rigid_flow
from .motionseg import flow_guided_mask
from .pose import EmptyCorrespondenceError, estimate_pose, pose_error, ransac_filter, sample_correspondences
from .synth import LoadedSequence, SceneSpec, render_frame

MASK_SOURCES = ("none", "gt", "pipeline")


@dataclass(frozen=True, eq=False)
class MaskResult:
    mask: LabelMask  # instance labels of dynamic instances, 0 elsewhere
    motion: LabelMask  # flow-guided binary mask before fusion
    reports: list
    clusters: object

    @property
    def binary(self) -> LabelMask:
        return LabelMask((self.mask.values > 0).astype(np.int64), MOTION)


def motion_removal_mask(depth: DepthMap, flow: FlowField, class_mask: LabelMask, instance_mask: LabelMask,
                        relative_pose: PoseSE3, K: CameraIntrinsics,
                        cfg: PipelineConfig = PipelineConfig()) -> MaskResult:
    """Rigid flow -> flow-guided mask -> semantic filtering -> per-instance decision."""
    rigid = rigid_flow(depth, relative_pose, K)
    motion, clusters = flow_guided_mask(flow, rigid, s_min=cfg.s_min, min_residual=cfg.min_residual,
                                        tol=cfg.kmeans_tol, max_iter=cfg.kmeans_max_iter)
    sfg, reports = fuse(class_mask, instance_mask, motion, MovableClassSet.from_names(cfg.movable), cfg.r_th)
    return MaskResult(sfg, motion, reports, clusters)


@dataclass(frozen=True)
class FrameError:
    frame: int
    trans_err: float  # m
    rot_err: float  # rad
    correspondences: int
    masked_pixels: int
    rmse: float
    iterations: int
    converged: bool


@dataclass(frozen=True, eq=False)
class MaskingBenefit:
    source: str
    errors: list
    estimated: Trajectory
    groundtruth: Trajectory

    @property
    def mean_trans_err(self) -> float:
        return float(np.mean([e.trans_err for e in self.errors]))

    @property
    def converged(self) -> bool:
        return all(e.converged for e in self.errors)


def _pairs(scene):
    """Yield (index, depth, flow, class, instance, gt motion mask, relative pose) per frame pair."""
    if isinstance(scene, SceneSpec):
        for t in range(scene.n_frames - 1):
            f = render_frame(scene, t)
            yield t, f.depth, f.flow, f.class_mask, f.instance_mask, f.motion_mask, scene.relative_pose(t)
    else:
        for i in range(len(scene) - 1):
            f = scene.frame(i)
            yield f.index, f.depth, f.flow, f.class_mask, f.instance_mask, f.motion_mask, scene.relative_pose(i)


def _intrinsics(scene):
    return scene.intrinsics


def _trajectory(scene) -> Trajectory:
    return scene.trajectory() if isinstance(scene, SceneSpec) else scene.trajectory


def frame_pose(t, depth, flow, cls, inst, gtmask, rel, K, source, cfg):
    if source == "none":
        mask = None
    elif source == "gt":
        mask = gtmask
    elif source == "pipeline":
        mask = motion_removal_mask(depth, flow, cls, inst, rel, K, cfg).binary
    else:
        raise ValueError(f"unknown mask source {source!r}")
    if mask is not None and not mask.values.any():
        mask = None  # empty mask: all correspondences
    try:
        corr = sample_correspondences(depth, flow, mask, K, cfg.stride)
    except EmptyCorrespondenceError:
        corr = sample_correspondences(depth, flow, None, K, cfg.stride)
    if cfg.ransac:
        corr = ransac_filter(corr, K, seed=cfg.seed + t)
    est = estimate_pose(corr, K, robust=cfg.robust)
    te, re = pose_error(est.pose, rel)
    masked = int(mask.values.sum()) if mask is not None else 0
    return est.pose, FrameError(t, te, re, len(corr), masked, est.rmse, est.iterations, est.converged)


def evaluate_masking_benefit(scene, source: str = "pipeline", cfg: PipelineConfig = PipelineConfig(),
                             jobs: int = 1) -> MaskingBenefit:
    """Estimate every relative pose with the given mask source and chain them.

    ``scene`` is a :class:`SceneSpec` (rendered on the fly) or a sequence
    loaded from a manifest.  The chained trajectory starts at the ground-truth
    first pose.
    """
    if source not in MASK_SOURCES:
        raise ValueError(f"unknown mask source {source!r}")
    K = _intrinsics(scene)
    gt = _trajectory(scene)
    if len(gt) < 2:
        raise ValueError("need at least 2 frames")
    work = list(_pairs(scene))

    def one(args):
        return frame_pose(*args, K, source, cfg)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, work))
    else:
        results = [one(w) for w in work]

    poses = [gt.poses[0]]
    for rel, _ in results:
        poses.append(poses[-1].compose(rel.inverse()))
    est = Trajectory(gt.timestamps, poses)
    return MaskingBenefit(source, [e for _, e in results], est, gt)
