"""Flow-guided motion segmentation.

The residual between the observed (full) flow and the camera-induced rigid
flow is normalized per frame and split into a static and a moving cluster by
1-D two-center K-means.  Label 0 is static, 1 is dynamic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import MOTION, FlowField, LabelMask, ResidualField, ValidationError

DEGENERATE_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class ClusterResult:
    c_s: float
    c_m: float
    assignments: LabelMask
    iterations: int
    converged: bool
    degenerate: bool = False
    reseeded: bool = False  # Lloyd's fixed point was not optimal, restarted from the best split


def residual_field(full: FlowField, rigid: FlowField) -> ResidualField:
    """Per-pixel Euclidean norm of ``full - rigid``; invalid where either input is."""
    if full.shape != rigid.shape:
        raise ValidationError(f"dimension mismatch: {full.shape} vs {rigid.shape}")
    valid = full.valid & rigid.valid
    diff = full.values - rigid.values
    r = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)
    return ResidualField(np.where(valid, r, 0.0), valid)


def normalize(residual: ResidualField) -> ResidualField:
    """Divide by the maximum over valid pixels.

    A field whose maximum is below 1e-12 comes back all-zero with the
    ``degenerate`` flag set.
    """
    if residual.normalized:
        raise ValueError("residual field is already normalized")
    vals = np.where(residual.valid, residual.values, 0.0)
    peak = float(vals.max()) if residual.valid.any() else 0.0
    if peak < DEGENERATE_EPS:
        return ResidualField(np.zeros_like(vals), residual.valid, normalized=True,
                             degenerate=True, scale=peak)
    return ResidualField(vals / peak, residual.valid, normalized=True, scale=peak)


def _sse_of_split(s: np.ndarray, k: int) -> float:
    a, b = s[:k], s[k:]
    return float(((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum())


def best_split(sorted_values: np.ndarray) -> int:
    """Index ``k`` minimizing the 2-means SSE of ``s[:k] | s[k:]``.

    Only splits between distinct values are considered.
    """
    s = sorted_values - sorted_values.mean()  # centering keeps the prefix sums well conditioned
    n = s.size
    c1 = np.cumsum(s)[:-1]
    c2 = np.cumsum(s * s)[:-1]
    k = np.arange(1, n, dtype=np.float64)
    tot1 = c1[-1] + s[-1] if n > 1 else 0.0
    tot2 = float((s * s).sum())
    sse = (c2 - c1 ** 2 / k) + ((tot2 - c2) - (tot1 - c1) ** 2 / (n - k))
    distinct = sorted_values[1:] > sorted_values[:-1]
    sse = np.where(distinct, sse, np.inf)
    return int(np.argmin(sse)) + 1


def _lloyd(x: np.ndarray, c_s: float, c_m: float, tol: float, max_iter: int):
    it, converged = 0, False
    for it in range(1, max_iter + 1):
        moving = np.abs(x - c_m) < np.abs(x - c_s)
        n_m = int(moving.sum())
        if n_m == 0 or n_m == x.size:
            break
        new_s = float(x[~moving].mean())
        new_m = float(x[moving].mean())
        shift = max(abs(new_s - c_s), abs(new_m - c_m))
        c_s, c_m = new_s, new_m
        if shift < tol:
            converged = True
            break
    return c_s, c_m, it, converged


def kmeans2(values: ResidualField, tol: float = 1e-6, max_iter: int = 100) -> ClusterResult:
    """Two-center K-means over the valid pixels of a normalized residual field.

    Lloyd's iterations start from ``c_s = min`` and ``c_m = max``.  In 1-D the
    optimal 2-partition is a contiguous split of the sorted values, so the
    fixed point Lloyd's reaches is compared against the best split; when the
    split is strictly better, Lloyd's is restarted from its centers (a fixed
    point, so this settles in one step).  Pixels are labeled by nearest
    center, ties going to static.
    """
    valid = values.valid
    x = values.values[valid]
    labels = np.zeros(values.shape, dtype=np.int64)
    if values.degenerate or x.size < 2 or x.min() == x.max():
        c = float(x[0]) if x.size else 0.0
        return ClusterResult(c, c, LabelMask(labels, MOTION), 0, True, degenerate=True)

    c_s, c_m, iters, converged = _lloyd(x, float(x.min()), float(x.max()), tol, max_iter)
    s = np.sort(x)
    k = best_split(s)
    moving = np.abs(x - c_m) < np.abs(x - c_s)
    lloyd_sse = float(((x[~moving] - x[~moving].mean()) ** 2).sum()
                      + ((x[moving] - x[moving].mean()) ** 2).sum()) if 0 < moving.sum() < x.size else np.inf
    reseeded = False
    if _sse_of_split(s, k) < lloyd_sse:
        reseeded = True
        c_s, c_m, more, converged = _lloyd(x, float(s[:k].mean()), float(s[k:].mean()), tol, max_iter)
        iters += more

    if c_s > c_m:
        c_s, c_m = c_m, c_s
    moving = np.abs(x - c_m) < np.abs(x - c_s)
    labels[valid] = moving.astype(np.int64)
    return ClusterResult(c_s, c_m, LabelMask(labels, MOTION), iters, converged, reseeded=reseeded)


def threshold_mask(values: ResidualField, m_th: float) -> LabelMask:
    """Fixed-threshold variant: dynamic where the normalized residual is >= ``m_th``."""
    out = values.valid & (values.values >= m_th)
    if values.degenerate:
        out[:] = False
    return LabelMask(out.astype(np.int64), MOTION)


def flow_guided_mask(full: FlowField, rigid: FlowField, s_min: float = 0.05,
                     min_residual: float = 0.0, tol: float = 1e-6, max_iter: int = 100,
                     m_th: float | None = None):
    """Binary motion mask from full vs rigid flow.

    Args:
        full: observed optical flow.
        rigid: flow synthesized from depth and camera motion.
        s_min: when the two cluster centers are closer than this on the
            normalized scale the whole frame is declared static.
        min_residual: frames whose largest residual (pixels) is below this are
            declared static before clustering.
        m_th: if given, threshold the normalized residual instead of
            clustering (debugging aid).

    Returns:
        (LabelMask, ClusterResult)
    """
    raw = residual_field(full, rigid)
    norm = normalize(raw)
    if not norm.degenerate and norm.scale < min_residual:
        norm = ResidualField(np.zeros(norm.shape), norm.valid, normalized=True,
                             degenerate=True, scale=norm.scale)
    result = kmeans2(norm, tol=tol, max_iter=max_iter)
    if m_th is not None:
        return threshold_mask(norm, m_th), result
    mask = result.assignments
    if result.c_m - result.c_s < s_min:
        mask = LabelMask(np.zeros(norm.shape, dtype=np.int64), MOTION)
    return mask, result
