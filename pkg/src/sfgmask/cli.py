"""Command-line driver.

Exit codes: 0 success, 1 usage error, 2 data error, 3 pose solver did not
converge on some frame.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import io as fio
from .config import PipelineConfig, format_config, load_config
from .core import ValidationError
from .fusion import reports_to_csv
from .metrics import InsufficientDataError, evaluate, report_csv, report_table
from .pipeline import MASK_SOURCES, evaluate_masking_benefit, motion_removal_mask
from .scenes import SceneFileError, bundled_scenes, load_scene
from .synth import export_sequence, load_sequence

log = logging.getLogger("sfgmask")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NONCONVERGED = 0, 1, 2, 3


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p):
    g = p.add_argument_group("pipeline configuration (override --config)")
    g.add_argument("--config", help="key = value configuration file")
    g.add_argument("--r-th", dest="r_th", type=float,
                   help="instance is dynamic when its moving-pixel ratio is >= this (default 0.5)")
    g.add_argument("--s-min", dest="s_min", type=float,
                   help="frame is static when K-means centers differ by less (normalized units, default 0.05)")
    g.add_argument("--min-residual", dest="min_residual", type=float,
                   help="frame is static when the largest flow residual is below this (pixels, default 0.1)")
    g.add_argument("--movable", type=lambda s: tuple(x for x in s.split(",") if x),
                   help="comma-separated movable class names")
    g.add_argument("--kmeans-max-iter", dest="kmeans_max_iter", type=int)
    g.add_argument("--kmeans-tol", dest="kmeans_tol", type=float, help="center movement tolerance")
    g.add_argument("--stride", type=int, help="pixel stride for pose correspondences (pixels)")
    g.add_argument("--robust", dest="robust", action="store_true", default=None, help="Huber loss (default)")
    g.add_argument("--no-robust", dest="robust", action="store_false", help="plain least squares")
    g.add_argument("--ransac", dest="ransac", action="store_true", default=None,
                   help="fixed-seed RANSAC pre-filter before pose refinement")
    g.add_argument("--convention", choices=("tum", "kitti"),
                   help="tum: cm, cm/frame, deg/frame; kitti: m, percent, deg/100m")
    g.add_argument("--lengths", type=lambda s: tuple(float(x) for x in s.split(",") if x),
                   help="KITTI subsequence lengths in meters, comma-separated")
    g.add_argument("--delta", type=int, help="TUM RPE frame step")
    g.add_argument("--no-align", dest="align", action="store_false", default=None,
                   help="skip rigid alignment before APE")
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int, help="worker threads for frame-level parallelism")


_CFG_KEYS = {f.name for f in fields(PipelineConfig)}


def _config(args) -> PipelineConfig:
    over = {k: v for k, v in vars(args).items() if k in _CFG_KEYS and k not in ("manifest", "out_dir")}
    return load_config(args.config, over)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sfgmask", description="Semantic flow-guided motion removal toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic scene to disk")
    s.add_argument("scene", help=f"scene YAML file or bundled name ({', '.join(bundled_scenes())})")
    s.add_argument("out", help="output directory (created if missing)")
    s.add_argument("--jobs", type=int, default=1)

    m = sub.add_parser("mask", help="semantic flow-guided masks for every frame pair")
    m.add_argument("manifest")
    m.add_argument("out")
    _add_config_flags(m)

    q = sub.add_parser("pose", help="two-frame pose estimation with masking")
    q.add_argument("manifest")
    q.add_argument("out")
    q.add_argument("--source", choices=MASK_SOURCES, default="pipeline", help="which mask excludes pixels")
    _add_config_flags(q)

    e = sub.add_parser("eval", help="APE / RPE of an estimated trajectory")
    e.add_argument("estimate")
    e.add_argument("groundtruth")
    e.add_argument("--format", choices=("auto", "tum", "kitti"), default="auto",
                   help="trajectory file format (auto: by field count)")
    e.add_argument("--csv", help="write the report as CSV here")
    _add_config_flags(e)

    a = sub.add_parser("pipeline", help="synth -> mask -> pose -> eval in one run")
    a.add_argument("scene")
    a.add_argument("out")
    _add_config_flags(a)
    return p


# --- commands -------------------------------------------------------------------

def cmd_synth(scene, out, jobs: int = 1) -> Path:
    spec = load_scene(scene)
    manifest = export_sequence(spec, out, jobs=jobs)
    print(manifest)
    return manifest


def _mask_frame(seq, i, cfg):
    f = seq.frame(i)
    missing = [n for n, v in (("depth", f.depth), ("flow", f.flow), ("class", f.class_mask),
                              ("instance", f.instance_mask)) if v is None]
    if missing:
        raise DataError(f"frame {f.index}: missing {', '.join(missing)}")
    return f.index, motion_removal_mask(f.depth, f.flow, f.class_mask, f.instance_mask,
                                        seq.relative_pose(i), seq.intrinsics, cfg)


def cmd_mask(manifest, out, cfg: PipelineConfig) -> int:
    seq = load_sequence(manifest)
    out = Path(out)

    def one(i):
        try:
            return _mask_frame(seq, i, cfg)
        except (DataError, OSError, ValueError) as e:
            return e

    idx = range(len(seq) - 1)
    if cfg.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(one, idx))
    else:
        results = [one(i) for i in idx]

    rows, failures = [], 0
    for r in results:
        if isinstance(r, Exception):
            failures += 1
            print(f"error: {r}", file=sys.stderr)
            continue
        frame, res = r
        fio.write_pgm(out / "sfg" / f"{frame:06d}.pgm", res.mask)
        fio.write_pgm(out / "flowmask" / f"{frame:06d}.pgm", res.motion)
        rows += [(frame, rep) for rep in res.reports]
    fio.write_atomic(out / "instances.csv", reports_to_csv(rows))
    if results and failures == len(results):
        return EXIT_DATA
    return EXIT_OK


def _errors_csv(errors) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "trans_err_m", "rot_err_deg", "correspondences", "masked_pixels",
                "rmse_px", "iterations", "converged"])
    for e in errors:
        w.writerow([e.frame, repr(e.trans_err), repr(float(np.degrees(e.rot_err))), e.correspondences,
                    e.masked_pixels, repr(e.rmse), e.iterations, int(e.converged)])
    return buf.getvalue()


def cmd_pose(manifest, out, cfg: PipelineConfig, source: str = "pipeline") -> int:
    seq = load_sequence(manifest)
    res = evaluate_masking_benefit(seq, source, cfg, jobs=cfg.jobs)
    out = Path(out)
    fio.write_tum(out / f"traj_{source}_tum.txt", res.estimated)
    fio.write_kitti(out / f"traj_{source}_kitti.txt", res.estimated)
    fio.write_atomic(out / f"errors_{source}.csv", _errors_csv(res.errors))
    print(f"{source}: mean relative translation error {res.mean_trans_err:.6g} m over {len(res.errors)} pairs")
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def _read_traj(path, fmt):
    if fmt == "auto":
        text = Path(path).read_text()
        first = next((ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")), "")
        fmt = "kitti" if len(first.split()) == 12 else "tum"
    return fio.read_kitti(path) if fmt == "kitti" else fio.read_tum(path)


def cmd_eval(estimate, groundtruth, cfg: PipelineConfig, fmt: str = "auto", csv_path=None):
    est = _read_traj(estimate, fmt)
    gt = _read_traj(groundtruth, fmt)
    rep = evaluate(est, gt, cfg.convention, cfg.lengths, cfg.delta, cfg.align)
    print(report_table(rep), end="")
    if csv_path:
        fio.write_atomic(csv_path, report_csv(rep))
    return rep


def cmd_pipeline(scene, out, cfg: PipelineConfig) -> int:
    out = Path(out)
    spec = load_scene(scene)
    manifest = export_sequence(spec, out / "sequence", jobs=cfg.jobs)
    status = cmd_mask(manifest, out / "masks", cfg)
    if status != EXIT_OK:
        return status
    worst = EXIT_OK
    for source in MASK_SOURCES:
        status = cmd_pose(manifest, out / "pose", cfg, source)
        worst = max(worst, status)
        est = out / "pose" / f"traj_{source}_tum.txt"
        print(f"== {source}")
        cmd_eval(est, out / "sequence" / "poses_tum.txt", cfg, "tum", out / "eval" / f"{source}.csv")
    # the echoed config omits paths so reruns into other directories stay identical
    echo = replace(cfg, manifest="", out_dir="")
    fio.write_atomic(out / "config.txt", format_config(echo))
    return worst


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = None
    if args.command != "synth":
        try:
            cfg = _config(args)
        except (ValueError, OSError) as e:
            print(f"error: configuration: {e}", file=sys.stderr)
            return EXIT_USAGE
    try:
        if args.command == "synth":
            cmd_synth(args.scene, args.out, args.jobs)
            return EXIT_OK
        if args.command == "mask":
            return cmd_mask(args.manifest, args.out, cfg)
        if args.command == "pose":
            return cmd_pose(args.manifest, args.out, cfg, args.source)
        if args.command == "eval":
            cmd_eval(args.estimate, args.groundtruth, cfg, args.format, args.csv)
            return EXIT_OK
        if args.command == "pipeline":
            return cmd_pipeline(args.scene, args.out, cfg)
    except InsufficientDataError as e:
        print(f"error: insufficient data: {e}", file=sys.stderr)
        return EXIT_DATA
    except (SceneFileError, ValidationError, fio.FormatError, DataError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    parser.error(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
