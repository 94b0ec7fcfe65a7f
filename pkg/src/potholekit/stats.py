"""Box-shape statistics of an annotated dataset.

Covers the aspect-ratio and pixel-area distributions, Tukey box plot
summaries, and the anchor / input-size recommendations derived from them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .geometry import area

BASE_ASPECT_RATIOS = (0.5, 1.0, 2.0)
MAX_EXTRA_RATIO = 4


@dataclass(frozen=True)
class BoxplotSummary:
    q1: float
    median: float
    q3: float
    iqr: float
    upper_limit: float
    lower_limit: float
    upper_whisker: float
    lower_whisker: float
    outliers: list[float] = field(default_factory=list)
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "q1": self.q1,
            "median": self.median,
            "q3": self.q3,
            "iqr": self.iqr,
            "lower_limit": self.lower_limit,
            "upper_limit": self.upper_limit,
            "lower_whisker": self.lower_whisker,
            "upper_whisker": self.upper_whisker,
            "outliers": list(self.outliers),
        }


@dataclass(frozen=True)
class TuningRecommendation:
    aspect_ratio_set: list[float]
    median_area_px: float
    median_area_fraction: float
    projected_area_at: dict[tuple[int, int], float]

    def to_dict(self) -> dict:
        return {
            "aspect_ratio_set": list(self.aspect_ratio_set),
            "median_area_px": self.median_area_px,
            "median_area_fraction": self.median_area_fraction,
            "projected_area_at": {f"{w}x{h}": a for (w, h), a in self.projected_area_at.items()},
        }


def _require_annotations(dataset: Dataset):
    if not dataset.annotations:
        raise ValueError("dataset has no annotations")


def aspect_ratios(dataset: Dataset) -> list[float]:
    """Width / height of every annotated box, in annotation order."""
    _require_annotations(dataset)
    return [a.box.width / a.box.height for a in dataset.annotations]


def pixel_areas(dataset: Dataset) -> list[float]:
    _require_annotations(dataset)
    return [area(a.box) for a in dataset.annotations]


def area_fractions(dataset: Dataset) -> list[float]:
    """Box area over the area of its own image."""
    _require_annotations(dataset)
    out = []
    for a in dataset.annotations:
        img = dataset.image(a.image_id)
        out.append(area(a.box) / (img.width * img.height))
    return out


def boxplot(values) -> BoxplotSummary:
    """Tukey box plot summary.

    Quartiles interpolate linearly between order statistics at zero-based
    positions ``(n - 1) * {0.25, 0.5, 0.75}``. Whiskers reach the most extreme
    samples still inside ``[Q1 - 1.5 IQR, Q3 + 1.5 IQR]``; everything beyond
    is an outlier.
    """
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        raise ValueError("boxplot of an empty sample")
    if not np.all(np.isfinite(x)):
        raise ValueError("boxplot input contains non-finite values")
    q1, med, q3 = (float(q) for q in np.percentile(x, [25, 50, 75], method="linear"))
    iqr = q3 - q1
    upper = q3 + 1.5 * iqr
    lower = q1 - 1.5 * iqr
    inside = x[(x >= lower) & (x <= upper)]
    outliers = x[(x < lower) | (x > upper)]
    return BoxplotSummary(
        q1=q1,
        median=med,
        q3=q3,
        iqr=iqr,
        upper_limit=upper,
        lower_limit=lower,
        upper_whisker=float(inside.max()),
        lower_whisker=float(inside.min()),
        outliers=[float(v) for v in outliers],
        n=int(x.size),
    )


def _round_half_up(v: float) -> int:
    return math.floor(v + 0.5)


def extend_aspect_ratios(ratio_summary: BoxplotSummary, cap: int = MAX_EXTRA_RATIO) -> list[float]:
    """Anchor aspect ratios for a ratio distribution.

    Starts from ``0.5, 1, 2`` and adds every integer ratio above 2 up to the
    rounded reach of the distribution (the larger of Q3 and the upper
    whisker), never beyond ``cap``.
    """
    top = min(cap, max(_round_half_up(ratio_summary.q3), _round_half_up(ratio_summary.upper_whisker)))
    extra = [float(k) for k in range(3, top + 1)]
    return sorted(set(BASE_ASPECT_RATIOS) | set(extra))


def recommend_tuning(dataset: Dataset, candidate_resolutions=((600, 600), (1024, 800))) -> TuningRecommendation:
    """Anchor ratios and projected median pothole size at candidate input sizes.

    The projection assumes a box keeps its share of the image when the image
    is resized, so ``projected = median_fraction * w * h``.
    """
    ratios = boxplot(aspect_ratios(dataset))
    fraction = float(np.median(area_fractions(dataset)))
    median_px = float(np.median(pixel_areas(dataset)))
    projected = {(int(w), int(h)): fraction * w * h for w, h in candidate_resolutions}
    return TuningRecommendation(
        aspect_ratio_set=extend_aspect_ratios(ratios),
        median_area_px=median_px,
        median_area_fraction=fraction,
        projected_area_at=projected,
    )
