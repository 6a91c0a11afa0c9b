"""Fusion of instance segmentation with the flow-guided motion mask.

Instances of a priori movable classes become candidates; a candidate is
declared dynamic as a whole when the fraction of its pixels flagged by the
flow-guided mask reaches ``r_th``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .core import CLASS, INSTANCE, LabelMask, ValidationError

# Class vocabulary shared by the synthetic renderer and the default movable set.
CLASS_NAMES = {
    0: "unlabeled",
    1: "road",
    2: "sidewalk",
    3: "building",
    4: "wall",
    5: "vegetation",
    6: "tree",
    7: "sky",
    8: "pole",
    11: "person",
    12: "rider",
    13: "car",
    14: "truck",
    15: "bus",
    17: "motorcycle",
    18: "bicycle",
}
CLASS_IDS = {name: cid for cid, name in CLASS_NAMES.items()}

DEFAULT_MOVABLE = ("car", "bus", "motorcycle", "bicycle", "truck", "person", "rider")

STATIC = "static"
DYNAMIC = "dynamic"


class UnknownInstanceError(KeyError):
    pass


@dataclass(frozen=True)
class MovableClassSet:
    classes: Mapping[int, str]

    def __post_init__(self):
        if not self.classes:
            raise ValidationError("movable class set is empty")
        if len(set(self.classes.values())) != len(self.classes):
            raise ValidationError("duplicate class names in movable set")

    @classmethod
    def from_names(cls, names: Iterable[str], vocabulary: Mapping[str, int] = CLASS_IDS):
        out = {}
        for name in names:
            if name not in vocabulary:
                raise ValidationError(f"unknown class name {name!r}")
            out[vocabulary[name]] = name
        return cls(out)

    @classmethod
    def default(cls):
        return cls.from_names(DEFAULT_MOVABLE)

    def __contains__(self, class_id) -> bool:
        return int(class_id) in self.classes

    @property
    def ids(self) -> np.ndarray:
        return np.array(sorted(self.classes), dtype=np.int64)


@dataclass(frozen=True)
class InstanceReport:
    instance: int
    class_id: int
    pixels: int
    flagged: int
    ratio: float
    decision: str


def _check_shapes(*masks):
    shapes = {m.shape for m in masks}
    if len(shapes) != 1:
        raise ValidationError(f"dimension mismatch: {sorted(shapes)}")


def instance_classes(class_mask: LabelMask, instance_mask: LabelMask) -> dict[int, int]:
    """Majority class id of every instance; ties go to the smaller class id."""
    _check_shapes(class_mask, instance_mask)
    inst = instance_mask.values.ravel()
    cls = class_mask.values.ravel()
    out = {}
    for q in instance_mask.instance_ids():
        ids, counts = np.unique(cls[inst == q], return_counts=True)
        out[q] = int(ids[np.argmax(counts)])
    return out


def semantic_guided_mask(class_mask: LabelMask, instance_mask: LabelMask,
                         movable: MovableClassSet | None = None) -> LabelMask:
    """Keep instances whose class is movable, renumbered densely 1..n.

    An instance's class is the majority class of its pixels, so a few pixels
    where the two rasters disagree do not split an instance.
    """
    movable = movable or MovableClassSet.default()
    classes = instance_classes(class_mask, instance_mask)
    lut = np.zeros(int(instance_mask.values.max(initial=0)) + 1, dtype=np.int64)
    n = 0
    for q in sorted(classes):
        if classes[q] in movable:
            n += 1
            lut[q] = n
    return LabelMask(lut[instance_mask.values], INSTANCE)


def instance_ratio(q: int, candidates: LabelMask, motion: LabelMask) -> float:
    """Fraction of instance ``q``'s pixels flagged as moving."""
    _check_shapes(candidates, motion)
    inside = candidates.values == q
    total = int(inside.sum())
    if q == 0 or total == 0:
        raise UnknownInstanceError(q)
    return int((motion.values[inside] == 1).sum()) / total


def semantic_flow_guided_mask(candidates: LabelMask, motion: LabelMask, r_th: float = 0.5,
                              class_of: Mapping[int, int] | None = None):
    """Per-instance all-or-nothing motion decision.

    Returns:
        (LabelMask, list[InstanceReport]): the mask keeps the label ``q`` on
        every pixel of a dynamic instance and 0 elsewhere.
    """
    if not 0 < r_th <= 1:
        raise ValueError(f"r_th must lie in (0, 1], got {r_th}")
    _check_shapes(candidates, motion)
    labels = candidates.values
    ids = candidates.instance_ids()
    size = int(labels.max(initial=0)) + 1
    pixels = np.bincount(labels.ravel(), minlength=size)
    flagged = np.bincount(labels.ravel(), weights=(motion.values.ravel() == 1), minlength=size)
    keep = np.zeros(size, dtype=bool)
    reports = []
    for q in ids:
        ratio = int(flagged[q]) / int(pixels[q])
        dynamic = ratio >= r_th
        keep[q] = dynamic
        reports.append(InstanceReport(q, int((class_of or {}).get(q, -1)), int(pixels[q]),
                                      int(flagged[q]), ratio, DYNAMIC if dynamic else STATIC))
    out = np.where(keep[labels], labels, 0)
    return LabelMask(out, INSTANCE), reports


def fuse(class_mask: LabelMask, instance_mask: LabelMask, motion: LabelMask,
         movable: MovableClassSet | None = None, r_th: float = 0.5):
    """Semantic filtering followed by the per-instance decision.

    Report ids refer to the renumbered candidates; ``class_id`` is filled in.
    """
    movable = movable or MovableClassSet.default()
    candidates = semantic_guided_mask(class_mask, instance_mask, movable)
    cand_class = instance_classes(class_mask, candidates) if candidates.instance_ids() else {}
    return semantic_flow_guided_mask(candidates, motion, r_th, class_of=cand_class)


REPORT_HEADER = ("frame", "instance", "class", "pixels", "flagged", "ratio", "decision")


def reports_to_csv(rows: Iterable[tuple[int, InstanceReport]]) -> str:
    """Serialize ``(frame, report)`` pairs as CSV text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for frame, r in rows:
        w.writerow([frame, r.instance, CLASS_NAMES.get(r.class_id, r.class_id), r.pixels,
                    r.flagged, repr(r.ratio), r.decision])
    return buf.getvalue()


def reports_from_csv(text: str) -> list[tuple[int, InstanceReport]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != REPORT_HEADER:
        raise ValueError("instance report CSV: bad header")
    out = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(REPORT_HEADER):
            raise ValueError(f"instance report CSV line {line}: expected 7 fields")
        cls = CLASS_IDS.get(row[2])
        cls = int(row[2]) if cls is None else cls
        out.append((int(row[0]), InstanceReport(int(row[1]), cls, int(row[3]), int(row[4]),
                                                float(row[5]), row[6])))
    return out
