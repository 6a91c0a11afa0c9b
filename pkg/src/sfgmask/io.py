"""Readers and writers for the interchange formats.

Rasters: Middlebury ``.flo`` (flow), grayscale PFM (depth), binary PGM
(label masks).  Trajectories: TUM and KITTI text files.  Every reader rejects
malformed input with a :class:`FormatError` that carries the byte offset or
line number of the problem.
"""

from __future__ import annotations

import os
import re
import tempfile
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .core import CameraIntrinsics, DepthMap, FlowField, LabelMask, PoseSE3, Trajectory, check

FLO_MAGIC = 202021.25
MAX_DIM = 1 << 16
QUAT_NORM_TOL = 1e-3


class FormatError(ValueError):
    """Malformed input.  ``position`` is a byte offset (binary) or line number (text)."""

    def __init__(self, message: str, position: int | None = None, path=None):
        self.position = position
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if position is not None:
            where.append(f"@{position}")
        super().__init__(f"{':'.join(where)}: {message}" if where else message)


def write_atomic(path, data: bytes | str):
    """Write via a temp file in the same directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"{path}: {e.strerror or e}") from e


# --- .flo ---------------------------------------------------------------------

def encode_flo(flow: FlowField) -> bytes:
    v = flow.values
    if not np.isfinite(v).all():
        raise ValueError("cannot write non-finite flow to .flo")
    h, w = flow.shape
    header = np.array([FLO_MAGIC], "<f4").tobytes() + np.array([w, h], "<i4").tobytes()
    return header + v.astype("<f4").tobytes()


def decode_flo(buf: bytes, path=None) -> FlowField:
    if len(buf) < 12:
        raise FormatError("truncated header", len(buf), path)
    magic = np.frombuffer(buf, "<f4", 1, 0)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"bad magic {magic!r}", 0, path)
    w, h = (int(x) for x in np.frombuffer(buf, "<i4", 2, 4))
    if w < 1 or h < 1 or w > MAX_DIM or h > MAX_DIM:
        raise FormatError(f"bad dimensions {w}x{h}", 4, path)
    need = 12 + 8 * w * h
    if len(buf) != need:
        raise FormatError(f"payload size {len(buf) - 12} != {8 * w * h}", min(len(buf), need), path)
    vals = np.frombuffer(buf, "<f4", 2 * w * h, 12).reshape(h, w, 2)
    return FlowField(vals.astype(np.float64), np.ones((h, w), bool))


def write_flo(path, flow: FlowField):
    write_atomic(path, encode_flo(flow))


def read_flo(path) -> FlowField:
    return decode_flo(_read_bytes(path), path)


# --- PNM header parsing ------------------------------------------------------

_WS = b" \t\r\n"


def _header_tokens(buf: bytes, count: int, path=None):
    """Read ``count`` whitespace-separated header tokens after the magic.

    ``#`` comments run to end of line.  Returns (tokens, payload offset).
    """
    pos = 2
    tokens = []
    while len(tokens) < count:
        if pos >= len(buf):
            raise FormatError("truncated header", pos, path)
        c = buf[pos:pos + 1]
        if c in (b" ", b"\t", b"\r", b"\n"):
            pos += 1
        elif c == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated comment", pos, path)
            pos = end + 1
        else:
            start = pos
            while pos < len(buf) and buf[pos:pos + 1] not in (b" ", b"\t", b"\r", b"\n", b"#"):
                pos += 1
            tokens.append((buf[start:pos], start))
    if pos >= len(buf) or buf[pos:pos + 1] not in (b" ", b"\t", b"\r", b"\n"):
        raise FormatError("header must end with a single whitespace byte", pos, path)
    return tokens, pos + 1


def _int_token(tok, path, name):
    raw, pos = tok
    if not re.fullmatch(rb"[0-9]+", raw):
        raise FormatError(f"bad {name} {raw!r}", pos, path)
    return int(raw)


# --- PFM ------------------------------------------------------------------------

def encode_pfm(depth: DepthMap) -> bytes:
    v = np.where(depth.valid, depth.values, 0.0).astype("<f4")
    h, w = depth.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(v[::-1]).tobytes()


def decode_pfm(buf: bytes, path=None) -> DepthMap:
    if buf[:2] == b"PF":
        raise FormatError("color PFM is not supported", 0, path)
    if buf[:2] != b"Pf":
        raise FormatError("not a grayscale PFM file", 0, path)
    tokens, offset = _header_tokens(buf, 3, path)
    w = _int_token(tokens[0], path, "width")
    h = _int_token(tokens[1], path, "height")
    if w < 1 or h < 1 or w > MAX_DIM or h > MAX_DIM:
        raise FormatError(f"bad dimensions {w}x{h}", tokens[0][1], path)
    raw, pos = tokens[2]
    try:
        scale = float(raw)
    except ValueError:
        raise FormatError(f"bad scale {raw!r}", pos, path) from None
    if scale == 0 or not np.isfinite(scale):
        raise FormatError(f"bad scale {raw!r}", pos, path)
    need = offset + 4 * w * h
    if len(buf) != need:
        raise FormatError(f"payload size {len(buf) - offset} != {4 * w * h}", min(len(buf), need), path)
    dt = "<f4" if scale < 0 else ">f4"
    vals = np.frombuffer(buf, dt, w * h, offset).reshape(h, w)[::-1]
    return DepthMap(vals.astype(np.float64))


def write_pfm(path, depth: DepthMap):
    write_atomic(path, encode_pfm(depth))


def read_pfm(path) -> DepthMap:
    return decode_pfm(_read_bytes(path), path)


# --- PGM ------------------------------------------------------------------------

def encode_pgm(mask: LabelMask) -> bytes:
    v = mask.values
    if (v < 0).any() or (v > 65535).any():
        raise ValueError("labels must lie in [0, 65535] for PGM")
    h, w = mask.shape
    if v.size and v.max() > 255:
        return f"P5\n{w} {h}\n65535\n".encode("ascii") + v.astype(">u2").tobytes()
    return f"P5\n{w} {h}\n255\n".encode("ascii") + v.astype("u1").tobytes()


def decode_pgm(buf: bytes, path=None, kind: str = "instance") -> LabelMask:
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM (P5) file", 0, path)
    tokens, offset = _header_tokens(buf, 3, path)
    w = _int_token(tokens[0], path, "width")
    h = _int_token(tokens[1], path, "height")
    maxval = _int_token(tokens[2], path, "maxval")
    if w < 1 or h < 1 or w > MAX_DIM or h > MAX_DIM:
        raise FormatError(f"bad dimensions {w}x{h}", tokens[0][1], path)
    if not 1 <= maxval <= 65535:
        raise FormatError(f"bad maxval {maxval}", tokens[2][1], path)
    nbytes = 1 if maxval < 256 else 2
    need = offset + nbytes * w * h
    if len(buf) != need:
        raise FormatError(f"payload size {len(buf) - offset} != {nbytes * w * h}", min(len(buf), need), path)
    vals = np.frombuffer(buf, "u1" if nbytes == 1 else ">u2", w * h, offset).reshape(h, w)
    if vals.size and vals.max() > maxval:
        bad = int(np.argmax(vals.ravel() > maxval))
        raise FormatError(f"sample exceeds maxval {maxval}", offset + nbytes * bad, path)
    return LabelMask(vals.astype(np.int64), kind)


def write_pgm(path, mask: LabelMask):
    write_atomic(path, encode_pgm(mask))


def read_pgm(path, kind: str = "instance") -> LabelMask:
    return decode_pgm(_read_bytes(path), path, kind)


# --- trajectories -----------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{float(x) + 0.0:.17g}"


def _quat(rotation) -> np.ndarray:
    q = Rotation.from_matrix(rotation).as_quat()  # x, y, z, w
    if q[3] < 0:
        q = -q
    return q


def format_tum(traj: Trajectory) -> str:
    lines = []
    for t, p in zip(traj.timestamps, traj.poses):
        lines.append(" ".join(_fmt(x) for x in (t, *p.translation, *_quat(p.rotation))))
    return "".join(line + "\n" for line in lines)


def _floats(fields, lineno, path):
    try:
        vals = [float(f) for f in fields]
    except ValueError:
        raise FormatError("non-numeric field", lineno, path) from None
    if not all(np.isfinite(vals)):
        raise FormatError("non-finite field", lineno, path)
    return vals


def parse_tum(text: str, path=None) -> Trajectory:
    stamps, poses = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        fields = s.replace(",", " ").split()
        if len(fields) != 8:
            raise FormatError(f"expected 8 fields, got {len(fields)}", lineno, path)
        t, tx, ty, tz, qx, qy, qz, qw = _floats(fields, lineno, path)
        q = np.array([qx, qy, qz, qw])
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > QUAT_NORM_TOL:
            raise FormatError(f"quaternion norm {norm:.6g} is not 1", lineno, path)
        if stamps and t <= stamps[-1]:
            raise FormatError("timestamps must be strictly increasing", lineno, path)
        stamps.append(t)
        poses.append(PoseSE3(Rotation.from_quat(q / norm).as_matrix(), [tx, ty, tz]))
    return Trajectory(np.array(stamps), poses)


def format_kitti(traj: Trajectory) -> str:
    return "".join(" ".join(_fmt(x) for x in p.as_matrix()[:3].ravel()) + "\n" for p in traj.poses)


def parse_kitti(text: str, path=None, dt: float = 1.0) -> Trajectory:
    """Parse 3x4 row-major poses; timestamps are the frame index times ``dt``."""
    poses = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        fields = s.split()
        if len(fields) != 12:
            raise FormatError(f"expected 12 fields, got {len(fields)}", lineno, path)
        m = np.array(_floats(fields, lineno, path)).reshape(3, 4)
        pose = PoseSE3(m[:, :3], m[:, 3])
        try:
            check(pose)
        except ValueError as e:
            raise FormatError(str(e), lineno, path) from None
        poses.append(pose)
    return Trajectory.from_poses(poses, dt)


def write_tum(path, traj: Trajectory):
    write_atomic(path, format_tum(traj))


def read_tum(path) -> Trajectory:
    return parse_tum(_read_bytes(path).decode("utf-8", errors="replace"), path)


def write_kitti(path, traj: Trajectory):
    write_atomic(path, format_kitti(traj))


def read_kitti(path, dt: float = 1.0) -> Trajectory:
    return parse_kitti(_read_bytes(path).decode("utf-8", errors="replace"), path, dt)


# --- intrinsics -------------------------------------------------------------------

def format_intrinsics(K: CameraIntrinsics) -> str:
    return " ".join([_fmt(K.fx), _fmt(K.fy), _fmt(K.cx), _fmt(K.cy), str(K.width), str(K.height)]) + "\n"


def parse_intrinsics(text: str, path=None) -> CameraIntrinsics:
    lines = [(i, s.strip()) for i, s in enumerate(text.splitlines(), start=1)
             if s.strip() and not s.strip().startswith("#")]
    if len(lines) != 1:
        raise FormatError("expected exactly one intrinsics line", lines[1][0] if lines else 1, path)
    lineno, s = lines[0]
    fields = s.split()
    if len(fields) != 6:
        raise FormatError(f"expected 6 fields, got {len(fields)}", lineno, path)
    fx, fy, cx, cy = _floats(fields[:4], lineno, path)
    try:
        w, h = int(fields[4]), int(fields[5])
    except ValueError:
        raise FormatError("image size must be integers", lineno, path) from None
    K = CameraIntrinsics(fx, fy, cx, cy, w, h)
    try:
        check(K)
    except ValueError as e:
        raise FormatError(str(e), lineno, path) from None
    return K


def write_intrinsics(path, K: CameraIntrinsics):
    write_atomic(path, format_intrinsics(K))


def read_intrinsics(path) -> CameraIntrinsics:
    return parse_intrinsics(_read_bytes(path).decode("utf-8", errors="replace"), path)
