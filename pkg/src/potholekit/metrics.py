"""Detection matching, precision-recall curves and 11-point average precision.

Detections are matched greedily: visited in descending score (ties broken by
lexicographic box coordinates), each one takes the still-unmatched ground
truth box it overlaps most (ties go to the earlier annotation) and counts as
a true positive iff that overlap is at least the IoU threshold.

Curves are built over the whole dataset: detections from every image are
pooled and sorted before precision and recall are accumulated. AP is the
mean of the max-interpolated precision at the recall samples 0, 0.1, ..., 1.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .dataset import Annotation, Dataset, Detection
from .geometry import iou_tuple, score_order_key

RECALL_SAMPLES = tuple(k / 10 for k in range(11))
COCO_THRESHOLDS = tuple(round(0.50 + 0.05 * k, 2) for k in range(10))

PASCAL_50 = "PASCAL@0.5"
PASCAL_40 = "PASCAL@0.4"
COCO = "COCO"


@dataclass(frozen=True)
class MatchResult:
    """Verdicts for one image; ``matched_annotation`` follows detection input order."""

    iou_threshold: float
    matched_annotation: tuple  # annotation index or None per detection
    matched_iou: tuple  # IoU of the matched pair, or None
    annotation_matched: tuple  # bool per annotation

    @property
    def tp(self) -> int:
        return sum(m is not None for m in self.matched_annotation)

    @property
    def fp(self) -> int:
        return len(self.matched_annotation) - self.tp

    @property
    def fn(self) -> int:
        return len(self.annotation_matched) - sum(self.annotation_matched)

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        """``(detection_index, annotation_index, iou)`` for every true positive."""
        return [
            (d, a, v)
            for d, (a, v) in enumerate(zip(self.matched_annotation, self.matched_iou))
            if a is not None
        ]


@dataclass(frozen=True)
class PRCurve:
    iou_threshold: float
    n_gt: int
    scores: np.ndarray
    tp_cum: np.ndarray
    fp_cum: np.ndarray
    interpolated: tuple  # precision at each of RECALL_SAMPLES
    interpolated_exact: tuple = field(default=(), repr=False)  # same, as Fractions

    @property
    def precision(self) -> np.ndarray:
        return self.tp_cum / np.maximum(self.tp_cum + self.fp_cum, 1)

    @property
    def recall(self) -> np.ndarray:
        return self.tp_cum / self.n_gt

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))

    def __len__(self):
        return int(self.scores.size)


@dataclass(frozen=True)
class APResult:
    ap: float
    iou_threshold: float | None
    protocol: str
    exact: Fraction | None = None
    per_threshold: tuple = ()  # (threshold, ap) pairs for COCO

    def __post_init__(self):
        if not 0.0 <= self.ap <= 1.0:
            raise ValueError(f"AP out of range: {self.ap}")


def _check_threshold(t: float):
    if not 0.0 < t <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {t}")


def _iou_rows(det_boxes, gt_boxes) -> list[list[float]]:
    return [[iou_tuple(d, g) for g in gt_boxes] for d in det_boxes]


def _greedy(order: Sequence[int], ious: list[list[float]], n_gt: int, thr: float) -> list:
    taken = [False] * n_gt
    matched = [None] * len(ious)
    for d in order:
        row = ious[d]
        best, bj = -1.0, -1
        for j in range(n_gt):
            if not taken[j] and row[j] > best:
                best, bj = row[j], j
        if bj >= 0 and best >= thr:
            taken[bj] = True
            matched[d] = bj
    return matched


def match_image(
    annotations: Sequence[Annotation], detections: Sequence[Detection], iou_threshold: float
) -> MatchResult:
    """Greedy one-to-one matching of detections to ground truth in one image."""
    _check_threshold(iou_threshold)
    ids = {a.image_id for a in annotations} | {d.image_id for d in detections}
    if len(ids) > 1:
        raise ValueError(f"match_image needs records from one image, got {sorted(ids)}")
    gt = [a.box.as_tuple() for a in annotations]
    ious = _iou_rows([d.box.as_tuple() for d in detections], gt)
    order = sorted(range(len(detections)), key=lambda i: score_order_key(detections[i].box, detections[i].score))
    matched = _greedy(order, ious, len(gt), iou_threshold)
    flags = [False] * len(gt)
    for m in matched:
        if m is not None:
            flags[m] = True
    return MatchResult(
        iou_threshold=iou_threshold,
        matched_annotation=tuple(matched),
        matched_iou=tuple(None if m is None else ious[d][m] for d, m in enumerate(matched)),
        annotation_matched=tuple(flags),
    )


class _PooledMatcher:
    """Per-image IoU tables computed once, reusable across thresholds."""

    def __init__(self, dataset: Dataset, detections: Sequence[Detection]):
        gt_by_image: dict[str, list] = {}
        for a in dataset.annotations:
            gt_by_image.setdefault(a.image_id, []).append(a.box.as_tuple())
        self.n_gt = len(dataset.annotations)

        keyed = []
        for i, d in enumerate(detections):
            if d.image_id not in dataset:
                raise ValueError(f"detection {i} references unknown image_id {d.image_id!r}")
            b = d.box
            keyed.append((-d.score, b.x_min, b.y_min, b.x_max, b.y_max, d.image_id, i))
        keyed.sort()
        self.order = [k[-1] for k in keyed]
        self.scores = np.array([-k[0] for k in keyed], dtype=float)

        # position of each detection inside its image, in global rank order
        self.images: list[tuple[list[int], list[list[float]], int]] = []
        per_image: dict[str, list[int]] = {}
        for rank, i in enumerate(self.order):
            per_image.setdefault(detections[i].image_id, []).append(rank)
        for image_id, ranks in per_image.items():
            gt = gt_by_image.get(image_id, [])
            boxes = [detections[self.order[r]].box.as_tuple() for r in ranks]
            self.images.append((ranks, _iou_rows(boxes, gt), len(gt)))

    def tp_flags(self, thr: float) -> np.ndarray:
        flags = np.zeros(len(self.order), dtype=bool)
        for ranks, ious, n_gt in self.images:
            if n_gt == 0:
                continue
            matched = _greedy(range(len(ranks)), ious, n_gt, thr)
            for local, m in enumerate(matched):
                if m is not None:
                    flags[ranks[local]] = True
        return flags

    def curve(self, thr: float) -> "PRCurve":
        flags = self.tp_flags(thr)
        tp_cum = np.cumsum(flags, dtype=np.int64)
        fp_cum = np.cumsum(~flags, dtype=np.int64)
        return _build_curve(thr, self.n_gt, self.scores, tp_cum, fp_cum)


def _build_curve(thr, n_gt, scores, tp_cum, fp_cum) -> PRCurve:
    n = tp_cum.size
    interp, exact = [], []
    if n:
        precision = tp_cum / (tp_cum + fp_cum)
        suffix_max = np.maximum.accumulate(precision[::-1])[::-1]
        # recall >= k/10  <=>  10 * tp >= k * n_gt, done in integers
        scaled = tp_cum * 10
        for k in range(11):
            start = int(np.searchsorted(scaled, k * n_gt, side="left"))
            if start >= n:
                interp.append(0.0)
                exact.append(Fraction(0))
                continue
            interp.append(float(suffix_max[start]))
            j = start + int(np.argmax(precision[start:]))
            exact.append(Fraction(int(tp_cum[j]), j + 1))
    else:
        interp = [0.0] * 11
        exact = [Fraction(0)] * 11
    return PRCurve(thr, n_gt, scores, tp_cum, fp_cum, tuple(interp), tuple(exact))


def pr_curve(dataset: Dataset, detections: Sequence[Detection], iou_threshold: float) -> PRCurve:
    _check_threshold(iou_threshold)
    if not dataset.annotations:
        raise ValueError("dataset has no annotations; recall is undefined")
    return _PooledMatcher(dataset, detections).curve(iou_threshold)


def average_precision(curve: PRCurve, protocol: str | None = None) -> APResult:
    """11-point interpolated AP of a curve."""
    ap = sum(curve.interpolated) / 11
    exact = sum(curve.interpolated_exact, Fraction(0)) / 11 if curve.interpolated_exact else None
    if protocol is None:
        protocol = {0.5: PASCAL_50, 0.4: PASCAL_40}.get(curve.iou_threshold, f"PASCAL@{curve.iou_threshold:g}")
    return APResult(min(max(ap, 0.0), 1.0), curve.iou_threshold, protocol, exact)


def pascal_map(dataset: Dataset, detections: Sequence[Detection], iou_threshold: float = 0.5) -> APResult:
    """Single-class PASCAL mAP, i.e. the AP at one IoU threshold."""
    return average_precision(pr_curve(dataset, detections, iou_threshold))


def coco_map(dataset: Dataset, detections: Sequence[Detection], thresholds=COCO_THRESHOLDS) -> APResult:
    """Mean of the 11-point AP over IoU 0.50, 0.55, ..., 0.95.

    Unlike the official COCO tool this keeps the 11-point interpolation at
    every threshold; there is no 101-point variant here.
    """
    if not dataset.annotations:
        raise ValueError("dataset has no annotations; recall is undefined")
    matcher = _PooledMatcher(dataset, detections)
    results = [average_precision(matcher.curve(t)) for t in thresholds]
    ap = sum(r.ap for r in results) / len(results)
    exact = sum((r.exact for r in results), Fraction(0)) / len(results)
    return APResult(
        min(max(ap, 0.0), 1.0), None, COCO, exact, tuple((t, r.ap) for t, r in zip(thresholds, results))
    )


def operating_point(curve: PRCurve) -> dict | None:
    """The prefix with the highest F1; earliest (highest score) wins ties."""
    if not len(curve):
        return None
    p, r = curve.precision, curve.recall
    denom = p + r
    f1 = np.divide(2 * p * r, denom, out=np.zeros_like(denom), where=denom > 0)
    j = int(np.argmax(f1))
    return {
        "score": float(curve.scores[j]),
        "precision": float(p[j]),
        "recall": float(r[j]),
        "f1": float(f1[j]),
        "tp": int(curve.tp_cum[j]),
        "fp": int(curve.fp_cum[j]),
        "fn": curve.n_gt - int(curve.tp_cum[j]),
    }


def evaluate(dataset: Dataset, detections: Sequence[Detection], thresholds: Sequence[float]) -> list[dict]:
    """AP and full-list counts for each threshold, sharing one IoU table."""
    for t in thresholds:
        _check_threshold(t)
    if not dataset.annotations:
        raise ValueError("dataset has no annotations; recall is undefined")
    matcher = _PooledMatcher(dataset, detections)
    out = []
    for t in thresholds:
        curve = matcher.curve(t)
        res = average_precision(curve)
        tp = int(curve.tp_cum[-1]) if len(curve) else 0
        fp = int(curve.fp_cum[-1]) if len(curve) else 0
        out.append(
            {
                "iou": t,
                "protocol": res.protocol,
                "ap": res.ap,
                "ap_exact": res.exact,
                "tp": tp,
                "fp": fp,
                "fn": curve.n_gt - tp,
                "operating_point": operating_point(curve),
                "curve": curve,
            }
        )
    return out


CURVE_HEADER = ["section", "score", "tp_cum", "fp_cum", "precision", "recall"]


def export_curve(curve: PRCurve, path) -> None:
    """Write the raw curve and its 11 interpolated samples as CSV.

    Reals are written with ``repr`` so reading them back is bit-exact. An
    empty curve produces only the header.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        if not len(curve):
            return
        prec, rec = curve.precision, curve.recall
        for j in range(len(curve)):
            w.writerow(
                ["raw", repr(float(curve.scores[j])), int(curve.tp_cum[j]), int(curve.fp_cum[j]),
                 repr(float(prec[j])), repr(float(rec[j]))]
            )
        for r, p in zip(RECALL_SAMPLES, curve.interpolated):
            w.writerow(["interpolated", "", "", "", repr(float(p)), repr(r)])


def read_curve(path) -> dict:
    """Parse a file written by :func:`export_curve`."""
    raw, interp = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != CURVE_HEADER:
            raise ValueError(f"unexpected curve header {header}")
        for row in rows:
            if row[0] == "raw":
                raw.append((float(row[1]), int(row[2]), int(row[3]), float(row[4]), float(row[5])))
            elif row[0] == "interpolated":
                interp.append((float(row[5]), float(row[4])))
            else:
                raise ValueError(f"unknown curve section {row[0]!r}")
    return {"raw": raw, "interpolated": interp}
