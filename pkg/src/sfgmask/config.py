"""Pipeline configuration: ``key = value`` text files plus command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .core import ValidationError
from .fusion import DEFAULT_MOVABLE

KITTI_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


@dataclass(frozen=True)
class PipelineConfig:
    manifest: str = ""
    out_dir: str = "out"
    r_th: float = 0.5
    s_min: float = 0.05
    min_residual: float = 0.1  # px; frames whose largest residual is smaller are static
    movable: tuple = DEFAULT_MOVABLE
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-6
    stride: int = 2
    robust: bool = True
    ransac: bool = False
    convention: str = "tum"
    lengths: tuple = KITTI_LENGTHS
    delta: int = 1
    align: bool = True
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if not 0 < self.r_th <= 1:
            raise ValidationError(f"r_th must lie in (0, 1], got {self.r_th}")
        if self.s_min < 0:
            raise ValidationError("s_min must be >= 0")
        if self.min_residual < 0:
            raise ValidationError("min_residual must be >= 0")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")
        if self.kmeans_max_iter < 1 or self.kmeans_tol <= 0:
            raise ValidationError("bad K-means limits")
        if self.convention not in ("tum", "kitti"):
            raise ValidationError(f"unknown metric convention {self.convention!r}")
        if not self.lengths or min(self.lengths) <= 0:
            raise ValidationError("subsequence lengths must be positive")
        if self.delta < 1 or self.jobs < 1:
            raise ValidationError("delta and jobs must be >= 1")
        if not self.movable:
            raise ValidationError("movable class list is empty")


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "tuple":
        items = [s.strip() for s in raw.replace(",", " ").split()]
        return tuple(float(s) for s in items) if key == "lengths" else tuple(items)
    return raw


def parse_config_text(text: str, path=None) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ValueError(f"{path or '<config>'}:{lineno}: expected key = value")
        key, value = (p.strip() for p in s.split("=", 1))
        if key not in _TYPES:
            raise ValueError(f"{path or '<config>'}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ValueError as e:
            raise ValueError(f"{path or '<config>'}:{lineno}: {e}") from None
    return out


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the file (if any), then non-None ``overrides``."""
    values = {}
    if path:
        values.update(parse_config_text(Path(path).read_text(), path))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    return replace(PipelineConfig(), **values)


def format_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}\n")
    return "".join(lines)
