"""Annotated images, detections and their JSON Lines formats.

Annotation files hold one image per line::

    {"image_id": "a", "width": 1024, "height": 800, "source": "cam1",
     "boxes": [{"x_min": 100, "y_min": 200, "x_max": 150, "y_max": 240}]}

Detection files hold one scored box per line::

    {"image_id": "a", "x_min": 98, "y_min": 201, "x_max": 152, "y_max": 238, "score": 0.91}

Coordinates are half-open pixel bounds (see :mod:`potholekit.geometry`).
There is a single class, pothole, so neither format carries a label. Unknown
keys are ignored.

Annotators are expected to box only potholes larger than about 175 cm^2
(roughly 15 cm across); smaller surface defects stay unlabelled. Nothing here
can check that from pixel boxes alone.

Label Img writes Pascal VOC XML with inclusive integer corners. To ingest it,
read ``xmin/ymin/xmax/ymax`` from each ``<object>``, emit one annotation line
per image, and run ``potholekit convert --mode inclusive-to-half-open``.
"""
from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .geometry import BoundingBox

log = logging.getLogger(__name__)

INCLUSIVE_TO_HALF_OPEN = "inclusive-to-half-open"
HALF_OPEN_TO_INCLUSIVE = "half-open-to-inclusive"


class ParseError(ValueError):
    """A line that is not a well-formed record."""


class ValidationError(ValueError):
    """One or more records violate a dataset invariant.

    ``issues`` holds ``(line_number, message)`` pairs; line numbers are
    1-based and ``0`` means the problem is not tied to a single line.
    """

    def __init__(self, issues: Sequence[tuple[int, str]]):
        self.issues = list(issues)
        lines = [f"line {n}: {msg}" if n else msg for n, msg in self.issues]
        super().__init__("; ".join(lines))


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    source_tag: str = ""

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.image_id!r}: width and height must be positive")


@dataclass(frozen=True)
class Annotation:
    image_id: str
    box: BoundingBox


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: BoundingBox
    score: float


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageRecord, ...] = ()
    annotations: tuple[Annotation, ...] = ()
    split_tag: str = "test"
    _by_id: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        by_id = {}
        for img in self.images:
            if img.image_id in by_id:
                raise ValueError(f"duplicate image_id {img.image_id!r}")
            by_id[img.image_id] = img
        for ann in self.annotations:
            if ann.image_id not in by_id:
                raise ValueError(f"annotation references unknown image_id {ann.image_id!r}")
        object.__setattr__(self, "_by_id", by_id)

    def image(self, image_id: str) -> ImageRecord:
        return self._by_id[image_id]

    def __contains__(self, image_id) -> bool:
        return image_id in self._by_id

    def annotations_by_image(self) -> dict[str, list[Annotation]]:
        """Annotations grouped per image, keeping file order within each image."""
        grouped: dict[str, list[Annotation]] = {img.image_id: [] for img in self.images}
        for ann in self.annotations:
            grouped[ann.image_id].append(ann)
        return grouped


def _box_from(obj, where: str) -> tuple[float, float, float, float]:
    try:
        coords = [obj[k] for k in ("x_min", "y_min", "x_max", "y_max")]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{where}: missing box coordinate {exc}") from None
    for c in coords:
        if isinstance(c, bool) or not isinstance(c, (int, float)):
            raise ParseError(f"{where}: box coordinates must be numbers, got {c!r}")
    return tuple(float(c) for c in coords)


def _read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ParseError(f"line {lineno}: expected a JSON object")
            yield lineno, obj


def _positive_int(obj, key, lineno) -> int:
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) or v != int(v):
        raise ParseError(f"line {lineno}: {key} must be an integer, got {v!r}")
    return int(v)


def _inside(box: BoundingBox, img: ImageRecord) -> bool:
    return box.x_min >= 0 and box.y_min >= 0 and box.x_max <= img.width and box.y_max <= img.height


def load_annotations(path, split_tag: str = "test") -> Dataset:
    """Read an annotation JSON Lines file.

    Parse failures raise :class:`ParseError` at the first bad line. Invariant
    violations (duplicate ids, non-positive sizes, boxes outside their image)
    are collected over the whole file and raised together as a
    :class:`ValidationError`.
    """
    images: list[ImageRecord] = []
    annotations: list[Annotation] = []
    issues: list[tuple[int, str]] = []
    seen: dict[str, int] = {}

    for lineno, obj in _read_jsonl(path):
        image_id = obj.get("image_id")
        if not isinstance(image_id, str):
            raise ParseError(f"line {lineno}: image_id must be a string")
        width = _positive_int(obj, "width", lineno)
        height = _positive_int(obj, "height", lineno)
        boxes = obj.get("boxes", [])
        if not isinstance(boxes, list):
            raise ParseError(f"line {lineno}: boxes must be a list")
        raw_boxes = [_box_from(b, f"line {lineno}, box {k}") for k, b in enumerate(boxes)]

        if image_id in seen:
            issues.append((lineno, f"duplicate image_id {image_id!r} (first on line {seen[image_id]})"))
            continue
        seen[image_id] = lineno
        if width <= 0 or height <= 0:
            issues.append((lineno, f"image {image_id!r}: width and height must be positive"))
            continue
        img = ImageRecord(image_id, width, height, str(obj.get("source", "")))
        images.append(img)
        for k, coords in enumerate(raw_boxes):
            try:
                box = BoundingBox(*coords)
            except ValueError as exc:
                issues.append((lineno, f"image {image_id!r}: box {k}: {exc}"))
                continue
            if not _inside(box, img):
                issues.append(
                    (lineno, f"image {image_id!r}: box {k} {box.as_tuple()} lies outside {width}x{height}")
                )
            else:
                annotations.append(Annotation(image_id, box))

    if issues:
        raise ValidationError(issues)
    return Dataset(tuple(images), tuple(annotations), split_tag)


def save_annotations(dataset: Dataset, path) -> None:
    grouped = dataset.annotations_by_image()
    with open(path, "w", encoding="utf-8") as fh:
        for img in dataset.images:
            boxes = [
                {"x_min": a.box.x_min, "y_min": a.box.y_min, "x_max": a.box.x_max, "y_max": a.box.y_max}
                for a in grouped[img.image_id]
            ]
            rec = {
                "image_id": img.image_id,
                "width": img.width,
                "height": img.height,
                "source": img.source_tag,
                "boxes": boxes,
            }
            fh.write(json.dumps(rec) + "\n")


def clamp_to_image(box: BoundingBox, img: ImageRecord) -> BoundingBox:
    return BoundingBox(
        min(max(box.x_min, 0.0), img.width),
        min(max(box.y_min, 0.0), img.height),
        min(max(box.x_max, 0.0), img.width),
        min(max(box.y_max, 0.0), img.height),
    )


def load_detections(path, dataset: Dataset | None) -> list[Detection]:
    """Read a detection JSON Lines file and check it against ``dataset``.

    Boxes poking out of their image are clamped to the image with a logged
    warning. A box with no overlap with its image cannot be clamped and is a
    validation error, as are unknown image ids and scores outside [0, 1].
    With ``dataset=None`` only the per-record checks run.
    """
    detections: list[Detection] = []
    issues: list[tuple[int, str]] = []
    for lineno, obj in _read_jsonl(path):
        image_id = obj.get("image_id")
        if not isinstance(image_id, str):
            raise ParseError(f"line {lineno}: image_id must be a string")
        coords = _box_from(obj, f"line {lineno}")
        score = obj.get("score")
        if isinstance(score, bool) or not isinstance(score, (int, float)):
            raise ParseError(f"line {lineno}: score must be a number, got {score!r}")
        score = float(score)

        if dataset is not None and image_id not in dataset:
            issues.append((lineno, f"unknown image_id {image_id!r}"))
            continue
        if not (0.0 <= score <= 1.0):
            issues.append((lineno, f"score {score} outside [0, 1]"))
            continue
        try:
            box = BoundingBox(*coords)
        except ValueError as exc:
            issues.append((lineno, str(exc)))
            continue
        img = dataset.image(image_id) if dataset is not None else None
        if img is not None and not _inside(box, img):
            try:
                clamped = clamp_to_image(box, img)
            except ValueError:
                issues.append((lineno, f"box {box.as_tuple()} lies entirely outside image {image_id!r}"))
                continue
            log.warning(
                "line %d: detection %s clamped to %s for image %r",
                lineno, box.as_tuple(), clamped.as_tuple(), image_id,
            )
            box = clamped
        detections.append(Detection(image_id, box, score))

    if issues:
        raise ValidationError(issues)
    return detections


def save_detections(detections: Iterable[Detection], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            rec = {
                "image_id": d.image_id,
                "x_min": d.box.x_min,
                "y_min": d.box.y_min,
                "x_max": d.box.x_max,
                "y_max": d.box.y_max,
                "score": d.score,
            }
            fh.write(json.dumps(rec) + "\n")


def convert_inclusive(records, mode: str) -> list[tuple]:
    """Shift ``x_max``/``y_max`` between inclusive and half-open conventions.

    ``records`` are 4-sequences ``(x_min, y_min, x_max, y_max)``. Inclusive
    bounds only make sense on integer pixel grids, so non-integer
    coordinates are rejected.
    """
    if mode == INCLUSIVE_TO_HALF_OPEN:
        delta = 1
    elif mode == HALF_OPEN_TO_INCLUSIVE:
        delta = -1
    else:
        raise ValueError(f"unknown conversion mode {mode!r}")
    out = []
    for rec in records:
        x0, y0, x1, y1 = rec
        for c in rec:
            if isinstance(c, bool) or not math.isfinite(c) or c != int(c):
                raise ValueError(f"inclusive conversion needs integer coordinates, got {tuple(rec)}")
        out.append((int(x0), int(y0), int(x1) + delta, int(y1) + delta))
    return out


def convert_annotation_file(src, dst, mode: str) -> int:
    """Rewrite every box of an annotation file; returns the box count.

    Works on raw records because inclusive one-pixel boxes such as
    ``(5, 5, 5, 5)`` are not valid half-open boxes.
    """
    n = 0
    lines = []
    for _, obj in _read_jsonl(src):
        boxes = obj.get("boxes", [])
        coords = [tuple(b[k] for k in ("x_min", "y_min", "x_max", "y_max")) for b in boxes]
        for b, c in zip(boxes, convert_inclusive(coords, mode)):
            b.update(zip(("x_min", "y_min", "x_max", "y_max"), c))
            n += 1
        lines.append(json.dumps(obj))
    Path(dst).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return n


def group_detections(detections: Iterable[Detection]) -> dict[str, list[Detection]]:
    grouped: dict[str, list[Detection]] = defaultdict(list)
    for d in detections:
        grouped[d.image_id].append(d)
    return grouped
