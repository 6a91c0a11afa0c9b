"""Trajectory error metrics.

Units follow the usual dataset conventions, with positions assumed in meters:

    =====  ==========  ===============  ===============
           APE trans   RPE trans        RPE rot
    =====  ==========  ===============  ===============
    TUM    cm          cm/frame         deg/frame
    KITTI  m           percent          deg/100m
    =====  ==========  ===============  ===============
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .core import PoseSE3, Trajectory
from .geometry import rotation_angle

ASSOC_WINDOW = 0.02
KITTI_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)

UNITS = {
    "tum": {"ape": "cm", "rpe_trans": "cm/frame", "rpe_rot": "deg/frame"},
    "kitti": {"ape": "m", "rpe_trans": "percent", "rpe_rot": "deg/100m"},
}


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Alignment:
    pose: PoseSE3  # maps estimated positions onto ground truth
    scale: float = 1.0
    degenerate: bool = False


def associate(est: Trajectory, gt: Trajectory, window: float = ASSOC_WINDOW) -> list[tuple[int, int]]:
    """Greedy one-to-one nearest-timestamp matching within ``window`` seconds.

    Candidate pairs are taken in order of increasing time difference (ties
    broken by index) so the result does not depend on input order.
    """
    te, tg = est.timestamps, gt.timestamps
    cands = []
    for i, t in enumerate(te):
        lo = np.searchsorted(tg, t - window, side="left")
        hi = np.searchsorted(tg, t + window, side="right")
        for j in range(lo, hi):
            d = abs(tg[j] - t)
            if d <= window:
                cands.append((d, i, j))
    cands.sort()
    used_e, used_g, pairs = set(), set(), []
    for _, i, j in cands:
        if i not in used_e and j not in used_g:
            used_e.add(i)
            used_g.add(j)
            pairs.append((i, j))
    return sorted(pairs)


def _associated(est, gt, window):
    pairs = associate(est, gt, window)
    return [est.poses[i] for i, _ in pairs], [gt.poses[j] for _, j in pairs]


def align(est: Trajectory, gt: Trajectory, window: float = ASSOC_WINDOW) -> Alignment:
    """Closed-form least-squares rigid alignment of associated positions (scale 1).

    Cross-covariance rank below 2 (collinear or coincident positions) still
    yields a transform but sets ``degenerate``.
    """
    pe, pg = _associated(est, gt, window)
    if len(pe) < 3:
        raise InsufficientDataError(f"alignment needs >= 3 associated poses, got {len(pe)}")
    a = np.stack([p.translation for p in pe])
    b = np.stack([p.translation for p in pg])
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    cov = (b - mb).T @ (a - ma) / len(a)
    u, s, vt = np.linalg.svd(cov)
    d = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2, 2] = -1
    r = u @ d @ vt
    t = mb - r @ ma
    degenerate = bool(s[1] <= 1e-12 * max(s[0], 1e-300))
    return Alignment(PoseSE3(r, t), 1.0, degenerate)


def apply_alignment(traj: Trajectory, alignment: Alignment) -> Trajectory:
    return Trajectory(traj.timestamps, [alignment.pose.compose(p) for p in traj.poses])


def ape_translation(est: Trajectory, gt: Trajectory, convention: str = "tum", aligned: bool = True,
                    window: float = ASSOC_WINDOW) -> float:
    """RMSE of position differences over associated poses, after optional alignment."""
    if aligned:
        est = apply_alignment(est, align(est, gt, window))
    pe, pg = _associated(est, gt, window)
    if not pe:
        raise InsufficientDataError("no associated poses")
    err = np.array([np.linalg.norm(a.translation - b.translation) for a, b in zip(pe, pg)])
    rmse = float(np.sqrt(np.mean(err**2)))
    return rmse * 100.0 if convention == "tum" else rmse


def relative_errors(est_poses, gt_poses, delta: int = 1):
    """Per-index ``(gt_i^-1 gt_{i+d})^-1 (est_i^-1 est_{i+d})``: (translation norms, angles in rad)."""
    trans, rot = [], []
    for i in range(len(gt_poses) - delta):
        dg = gt_poses[i].inverse().compose(gt_poses[i + delta])
        de = est_poses[i].inverse().compose(est_poses[i + delta])
        e = dg.inverse().compose(de)
        trans.append(np.linalg.norm(e.translation))
        rot.append(rotation_angle(e.rotation))
    return np.array(trans), np.array(rot)


def rpe_tum(est: Trajectory, gt: Trajectory, delta: int = 1, window: float = ASSOC_WINDOW):
    """Relative pose error RMSE over ``delta``-frame steps: (cm, deg) per step."""
    pe, pg = _associated(est, gt, window)
    if len(pe) < delta + 1:
        raise InsufficientDataError(f"RPE needs >= {delta + 1} associated poses, got {len(pe)}")
    t, r = relative_errors(pe, pg, delta)
    return float(np.sqrt(np.mean(t**2))) * 100.0, float(np.degrees(np.sqrt(np.mean(r**2))))


@dataclass(frozen=True)
class KittiResult:
    t_rel: float  # percent, averaged over all subsequences
    r_rel: float  # deg per 100 m
    per_length: dict = field(default_factory=dict)  # length -> (t_rel, r_rel, count)
    samples: int = 0

    @property
    def empty(self) -> bool:
        return self.samples == 0


def path_lengths(poses) -> np.ndarray:
    p = np.stack([x.translation for x in poses])
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])


def rpe_kitti(est: Trajectory, gt: Trajectory, lengths=KITTI_LENGTHS, step: int = 1,
              window: float = ASSOC_WINDOW) -> KittiResult:
    """Subsequence drift: every ``step``-th start frame and every length.

    The subsequence ends at the first frame whose accumulated ground-truth
    path length from the start is >= L.  Translation error is a percentage
    of L, rotation error is degrees per 100 m.  Lengths longer than the
    trajectory contribute nothing; if none fits, the result is empty.
    """
    pe, pg = _associated(est, gt, window)
    if len(pg) < 2:
        return KittiResult(0.0, 0.0, {}, 0)
    dist = path_lengths(pg)
    all_t, all_r, per = [], [], {}
    for length in lengths:
        ts, rs = [], []
        for first in range(0, len(pg), step):
            last = int(np.searchsorted(dist, dist[first] + length, side="left"))
            if last >= len(pg):
                break
            dg = pg[first].inverse().compose(pg[last])
            de = pe[first].inverse().compose(pe[last])
            e = de.inverse().compose(dg)
            ts.append(np.linalg.norm(e.translation) / length * 100.0)
            rs.append(np.degrees(rotation_angle(e.rotation)) / length * 100.0)
        if ts:
            per[float(length)] = (float(np.mean(ts)), float(np.mean(rs)), len(ts))
            all_t += ts
            all_r += rs
    if not all_t:
        return KittiResult(0.0, 0.0, {}, 0)
    return KittiResult(float(np.mean(all_t)), float(np.mean(all_r)), per, len(all_t))


@dataclass(frozen=True)
class MetricReport:
    convention: str
    ape_trans: float
    rpe_trans: float
    rpe_rot: float
    pairs: int
    rpe_samples: int
    per_length: dict = field(default_factory=dict)
    aligned: bool = True
    degenerate_alignment: bool = False

    @property
    def empty(self) -> bool:
        return self.rpe_samples == 0


def evaluate(est: Trajectory, gt: Trajectory, convention: str = "tum", lengths=KITTI_LENGTHS,
             delta: int = 1, aligned: bool = True, window: float = ASSOC_WINDOW) -> MetricReport:
    convention = convention.lower()
    if convention not in UNITS:
        raise ValueError(f"unknown convention {convention!r}")
    pairs = associate(est, gt, window)
    if not pairs:
        raise InsufficientDataError(f"no timestamps associate within {window} s "
                                    f"({len(est)} estimated, {len(gt)} ground-truth poses)")
    degenerate = False
    est_eval = est
    if aligned:
        al = align(est, gt, window)
        degenerate = al.degenerate
        est_eval = apply_alignment(est, al)
    ape = ape_translation(est_eval, gt, convention, aligned=False, window=window)
    if convention == "tum":
        rt, rr = rpe_tum(est, gt, delta, window)
        return MetricReport("tum", ape, rt, rr, len(pairs), len(pairs) - delta, {}, aligned, degenerate)
    k = rpe_kitti(est, gt, lengths, window=window)
    return MetricReport("kitti", ape, k.t_rel, k.r_rel, len(pairs), k.samples, k.per_length, aligned, degenerate)


def _num(x: float) -> str:
    return f"{x:.6f}"


def report_table(rep: MetricReport) -> str:
    u = UNITS[rep.convention]
    rows = [("metric", "value", "unit"),
            ("APE translation RMSE", _num(rep.ape_trans), u["ape"]),
            ("RPE translation", _num(rep.rpe_trans), u["rpe_trans"]),
            ("RPE rotation", _num(rep.rpe_rot), u["rpe_rot"]),
            ("associated poses", str(rep.pairs), "-"),
            ("RPE samples", str(rep.rpe_samples), "-")]
    for length, (t, r, n) in sorted(rep.per_length.items()):
        rows.append((f"t_rel @ {length:g} m", _num(t), "percent"))
        rows.append((f"r_rel @ {length:g} m", _num(r), "deg/100m"))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    if rep.empty:
        lines.append("note: trajectory shorter than every subsequence length; RPE not computed")
    return "\n".join(lines) + "\n"


def report_csv(rep: MetricReport) -> str:
    u = UNITS[rep.convention]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["convention", f"ape_trans_{u['ape']}", f"rpe_trans_{u['rpe_trans']}",
                f"rpe_rot_{u['rpe_rot']}", "pairs", "rpe_samples"])
    w.writerow([rep.convention, repr(rep.ape_trans), repr(rep.rpe_trans), repr(rep.rpe_rot),
                rep.pairs, rep.rpe_samples])
    return buf.getvalue()
