"""Axis-aligned box arithmetic.

Boxes use the half-open pixel convention: a pixel ``(px, py)`` belongs to the
box iff ``x_min <= px < x_max`` and ``y_min <= py < y_max``, so
``width = x_max - x_min`` with no ``+1`` term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True, slots=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate box (need x_max > x_min and y_max > y_min): {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def scaled(self, s: float) -> "BoundingBox":
        return BoundingBox(self.x_min * s, self.y_min * s, self.x_max * s, self.y_max * s)


def area(b: BoundingBox) -> float:
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def intersection(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 for disjoint or edge-touching boxes."""
    return iou_tuple(a.as_tuple(), b.as_tuple())


def iou_tuple(a: Sequence[float], b: Sequence[float]) -> float:
    # Plain-tuple variant used on the hot path of matching.
    iw = min(a[2], b[2]) - max(a[0], b[0])
    if iw <= 0.0:
        return 0.0
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if inter >= union:
        return 1.0
    return inter / union


def score_order_key(box: BoundingBox, score: float):
    """Descending score, ties broken by lexicographic box coordinates."""
    return (-score, box.x_min, box.y_min, box.x_max, box.y_max)


def nms(
    detections: Iterable[tuple[BoundingBox, float]], iou_threshold: float
) -> list[tuple[BoundingBox, float]]:
    """Greedy non-maximum suppression.

    The highest-scoring remaining box is kept and every remaining box with
    ``iou >= iou_threshold`` against it is dropped. Output is in descending
    score order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    items = list(detections)
    for _, s in items:
        if not math.isfinite(s):
            raise ValueError(f"non-finite score: {s}")
    items.sort(key=lambda d: score_order_key(d[0], d[1]))

    kept: list[tuple[BoundingBox, float]] = []
    suppressed = [False] * len(items)
    for i, (box, score) in enumerate(items):
        if suppressed[i]:
            continue
        kept.append((box, score))
        t = box.as_tuple()
        for j in range(i + 1, len(items)):
            if not suppressed[j] and iou_tuple(t, items[j][0].as_tuple()) >= iou_threshold:
                suppressed[j] = True
    return kept
