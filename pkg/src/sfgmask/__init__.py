"""Semantic flow-guided motion removal.

Rigid flow is synthesized from depth and camera motion, compared against the
observed optical flow, and the residual is clustered into static and moving
pixels.  Instance masks of movable classes then turn that pixel mask into an
all-or-nothing decision per object.
"""

from .core import (CameraIntrinsics, DepthMap, FlowField, LabelMask, PoseSE3, ResidualField,
                   Trajectory, ValidationError, check, validate)
from .fusion import MovableClassSet, semantic_flow_guided_mask, semantic_guided_mask
from .geometry import backproject, compose, invert, project, rigid_flow
from .motionseg import flow_guided_mask, kmeans2
from .pipeline import evaluate_masking_benefit, motion_removal_mask
from .pose import estimate_pose, sample_correspondences

__version__ = "0.1.0"
