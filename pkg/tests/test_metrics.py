import random
from fractions import Fraction

import pytest

from potholekit.dataset import Annotation, Dataset, Detection, ImageRecord
from potholekit.geometry import iou
from potholekit.metrics import (
    COCO_THRESHOLDS,
    average_precision,
    coco_map,
    export_curve,
    match_image,
    operating_point,
    pascal_map,
    pr_curve,
    read_curve,
)

from fixtures import B, build, random_instance
from oracles import brute_force_ap


# -- matching ---------------------------------------------------------------

def test_match_perfect():
    g = Annotation("a", B(0, 0, 10, 10))
    r = match_image([g], [Detection("a", B(0, 0, 10, 10), 0.5)], 0.5)
    assert (r.tp, r.fp, r.fn) == (1, 0, 0)


def test_match_duplicate_is_fp():
    g = Annotation("a", B(0, 0, 10, 10))
    d = [Detection("a", B(0, 0, 10, 10), 0.8), Detection("a", B(0, 0, 10, 10), 0.9)]
    r = match_image([g], d, 0.5)
    assert r.matched_annotation == (None, 0)
    assert (r.tp, r.fp, r.fn) == (1, 1, 0)


def test_match_low_overlap_first_does_not_block():
    # A overlaps g with IoU 1/3, B with IoU 0.8; A is visited first but fails
    g = Annotation("a", B(0, 0, 10, 10))
    a = Detection("a", B(5, 0, 15, 10), 0.9)
    b = Detection("a", B(0, 0, 10, 8), 0.8)
    assert iou(b.box, g.box) == pytest.approx(0.8)
    r = match_image([g], [a, b], 0.5)
    assert r.matched_annotation == (None, 0)


def test_match_iou_tie_goes_to_first_annotation():
    gts = [Annotation("a", B(0, 0, 10, 10)), Annotation("a", B(10, 0, 20, 10))]
    r = match_image(gts, [Detection("a", B(5, 0, 15, 10), 0.9)], 0.3)
    assert r.matched_annotation == (0,)


def test_match_threshold_inclusive():
    g = Annotation("a", B(0, 0, 10, 10))
    d = Detection("a", B(0, 0, 10, 5), 0.9)
    assert iou(g.box, d.box) == 0.5
    assert match_image([g], [d], 0.5).tp == 1


def test_match_rejects_mixed_images():
    with pytest.raises(ValueError):
        match_image([Annotation("a", B(0, 0, 1, 1))], [Detection("b", B(0, 0, 1, 1), 0.5)], 0.5)


def test_match_invariants_randomized():
    rng = random.Random(8)
    for _ in range(200):
        gt, dets = random_instance(rng, max_images=1)
        image = next(iter(gt))
        anns = [Annotation(image, B(*b)) for b in gt[image]]
        ds_ = [Detection(image, B(*b), s) for _, b, s in dets]
        thr = rng.choice([0.3, 0.5, 0.75])
        r = match_image(anns, ds_, thr)
        assert r.tp + r.fn == len(anns) and r.tp + r.fp == len(ds_)
        used = [a for a in r.matched_annotation if a is not None]
        assert len(used) == len(set(used))
        for d, a, v in r.pairs:
            assert v >= thr and v == iou(ds_[d].box, anns[a].box)


def test_refiltering_at_stricter_threshold_lowers_pr():
    rng = random.Random(12)
    for _ in range(100):
        gt, dets = random_instance(rng, max_images=1)
        image = next(iter(gt))
        anns = [Annotation(image, B(*b)) for b in gt[image]]
        ds_ = sorted((Detection(image, B(*b), s) for _, b, s in dets), key=lambda d: -d.score)
        if not anns or not ds_:
            continue
        r = match_image(anns, ds_, 0.3)
        strict = [a is not None and v >= 0.6 for a, v in zip(r.matched_annotation, r.matched_iou)]
        loose = [a is not None for a in r.matched_annotation]
        tl = ts = 0
        for k in range(len(ds_)):
            tl += loose[k]
            ts += strict[k]
            assert ts / (k + 1) <= tl / (k + 1) and ts / len(anns) <= tl / len(anns)


# -- curves and AP -----------------------------------------------------------

def tp_fp_tp():
    gt = {"a": [(0, 0, 10, 10), (50, 50, 60, 60)]}
    dets = [("a", (0, 0, 10, 10), 0.9), ("a", (20, 20, 30, 30), 0.8), ("a", (50, 50, 60, 60), 0.7)]
    return build(gt, dets)


def test_curve_tp_fp_tp():
    data, dets = tp_fp_tp()
    c = pr_curve(data, dets, 0.5)
    assert c.points == [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]
    assert c.interpolated == (1.0,) * 6 + (2 / 3,) * 5
    ap = average_precision(c)
    assert ap.exact == Fraction(28, 33)
    assert abs(ap.ap - 28 / 33) <= 1e-12
    assert ap.protocol == "PASCAL@0.5"


def test_perfect_detector():
    gt = {"a": [(0, 0, 10, 10), (20, 20, 30, 30)], "b": [(5, 5, 50, 50)]}
    dets = [("a", (0, 0, 10, 10), 0.9), ("a", (20, 20, 30, 30), 0.8), ("b", (5, 5, 50, 50), 0.7)]
    data, d = build(gt, dets)
    c = pr_curve(data, d, 0.5)
    assert c.points[-1] == (1.0, 1.0)
    assert c.interpolated == (1.0,) * 11
    assert pascal_map(data, d).ap == 1.0
    assert coco_map(data, d).ap == 1.0


def test_zero_detections():
    data, d = build({"a": [(0, 0, 10, 10)]}, [])
    c = pr_curve(data, d, 0.5)
    assert len(c) == 0 and c.interpolated == (0.0,) * 11
    assert average_precision(c).ap == 0.0
    assert coco_map(data, d).ap == 0.0


def test_no_annotations_is_an_error():
    data, d = build({"a": []}, [("a", (0, 0, 5, 5), 0.5)])
    with pytest.raises(ValueError):
        pr_curve(data, d, 0.5)
    with pytest.raises(ValueError):
        coco_map(data, d)


def test_relaxed_threshold_admits_045():
    # IoU = 45/100
    data, d = build({"a": [(0, 0, 10, 10)]}, [("a", (0, 0, 10, 4.5), 0.9)])
    assert iou(data.annotations[0].box, d[0].box) == pytest.approx(0.45)
    assert pascal_map(data, d, 0.4).ap == 1.0
    assert pascal_map(data, d, 0.5).ap == 0.0
    assert pascal_map(data, d, 0.4).protocol == "PASCAL@0.4"


def test_coco_with_iou_exactly_half():
    gt = {"a": [(0, 0, 10, 10), (20, 20, 30, 30)]}
    dets = [("a", (0, 0, 10, 5), 0.9), ("a", (20, 20, 30, 25), 0.8)]
    data, d = build(gt, dets)
    at_half = pascal_map(data, d, 0.5).ap
    assert at_half == 1.0
    res = coco_map(data, d)
    assert res.ap == pytest.approx(at_half / 10, abs=1e-15)
    assert [t for t, _ in res.per_threshold] == list(COCO_THRESHOLDS)
    assert [a for _, a in res.per_threshold] == [1.0] + [0.0] * 9


def test_ap_matches_brute_force_oracle():
    rng = random.Random(2024)
    for _ in range(200):
        gt, dets = random_instance(rng)
        data, d = build(gt, dets)
        for t in ("0.5", "0.4", "0.75"):
            expected, flags = brute_force_ap(gt, dets, t)
            got = pascal_map(data, d, float(t))
            assert abs(got.ap - float(expected)) <= 1e-12
            assert got.exact == expected


def test_coco_matches_brute_force_oracle():
    rng = random.Random(99)
    for _ in range(40):
        gt, dets = random_instance(rng)
        data, d = build(gt, dets)
        expected = sum(brute_force_ap(gt, dets, f"{t:.2f}")[0] for t in COCO_THRESHOLDS) / 10
        assert abs(coco_map(data, d).ap - float(expected)) <= 1e-12


def test_permutation_invariance():
    rng = random.Random(5)
    for _ in range(100):
        gt, dets = random_instance(rng)
        data, d = build(gt, dets)
        shuffled = list(d)
        rng.shuffle(shuffled)
        for t in (0.4, 0.5):
            assert pascal_map(data, d, t) == pascal_map(data, shuffled, t)
        assert coco_map(data, d).ap == coco_map(data, shuffled).ap


def test_scale_invariance():
    rng = random.Random(6)
    for _ in range(100):
        gt, dets = random_instance(rng)
        s = rng.choice([0.25, 0.5, 2.0, 4.0, 8.0])
        data, d = build(gt, dets)
        sgt = {k: [tuple(c * s for c in b) for b in v] for k, v in gt.items()}
        sdets = [(i, tuple(c * s for c in b), sc) for i, b, sc in dets]
        sdata, sd = build(sgt, sdets, size=(100 * s, 100 * s))
        for t in (0.5, 0.4):
            assert pascal_map(data, d, t).ap == pascal_map(sdata, sd, t).ap
        assert coco_map(data, d).ap == coco_map(sdata, sd).ap


def test_trailing_false_positive_leaves_ap_unchanged():
    rng = random.Random(7)
    for _ in range(100):
        gt, dets = random_instance(rng)
        data, d = build(gt, dets)
        lowest = min((s for _, _, s in dets), default=1.0)
        # an image with no ground truth cannot produce a match
        extra_data = Dataset(data.images + (ImageRecord("empty", 100, 100),), data.annotations)
        extra = d + [Detection("empty", B(0, 0, 50, 50), lowest / 2)]
        for t in (0.5, 0.4):
            assert pascal_map(data, d, t).ap == pascal_map(extra_data, extra, t).ap
        assert coco_map(data, d).ap == coco_map(extra_data, extra).ap


def test_unknown_image_rejected():
    data, _ = build({"a": [(0, 0, 1, 1)]}, [])
    with pytest.raises(ValueError):
        pr_curve(data, [Detection("zz", B(0, 0, 1, 1), 0.5)], 0.5)


def test_operating_point_picks_max_f1():
    data, dets = tp_fp_tp()
    op = operating_point(pr_curve(data, dets, 0.5))
    # prefix 1: p=1 r=.5 f1=2/3; prefix 3: p=2/3 r=1 f1=0.8
    assert op["score"] == 0.7 and op["f1"] == pytest.approx(0.8)
    assert (op["tp"], op["fp"], op["fn"]) == (2, 1, 0)


# -- CSV export --------------------------------------------------------------

def test_export_empty_curve(tmp_path):
    data, d = build({"a": [(0, 0, 10, 10)]}, [])
    p = tmp_path / "c.csv"
    export_curve(pr_curve(data, d, 0.5), p)
    assert p.read_text().splitlines() == ["section,score,tp_cum,fp_cum,precision,recall"]


def test_export_round_trip(tmp_path):
    data, dets = tp_fp_tp()
    c = pr_curve(data, dets, 0.5)
    p = tmp_path / "c.csv"
    export_curve(c, p)
    assert len(p.read_text().splitlines()) == 1 + 3 + 11
    back = read_curve(p)
    assert [(r[4], r[3]) for r in back["raw"]] == c.points
    assert [r[0] for r in back["raw"]] == c.scores.tolist()
    assert [r[1] for r in back["raw"]] == c.tp_cum.tolist()
    assert [p_ for _, p_ in back["interpolated"]] == list(c.interpolated)


def test_export_round_trip_random_bits(tmp_path):
    rng = random.Random(1)
    gt, dets = random_instance(rng)
    data, d = build(gt, dets)
    c = pr_curve(data, d, 0.5)
    p = tmp_path / "c.csv"
    export_curve(c, p)
    back = read_curve(p)
    assert [(r[4], r[3]) for r in back["raw"]] == c.points
