"""File writers shared by the CLI and acceptance tests."""
import json

from potholekit.dataset import Annotation, Dataset, Detection, ImageRecord
from potholekit.geometry import BoundingBox


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def box_dict(b):
    return dict(zip(("x_min", "y_min", "x_max", "y_max"), b))


def write_dataset(path, gt, size=(100, 100)):
    """gt: {image_id: [(x0, y0, x1, y1), ...]}"""
    w, h = size
    return write_jsonl(
        path,
        [{"image_id": k, "width": w, "height": h, "boxes": [box_dict(b) for b in bs]} for k, bs in gt.items()],
    )


def write_detections(path, dets):
    """dets: [(image_id, box, score), ...]"""
    return write_jsonl(path, [{"image_id": i, **box_dict(b), "score": s} for i, b, s in dets])


def worked_fixture(tmp_path):
    """Two potholes, ranked detections TP, FP, TP: AP = 28/33."""
    gt = {"road": [(10, 10, 30, 30), (60, 60, 80, 80)]}
    dets = [
        ("road", (10, 10, 30, 30), 0.9),
        ("road", (40, 0, 50, 10), 0.8),
        ("road", (61, 61, 80, 80), 0.7),
    ]
    return write_dataset(tmp_path / "gt.jsonl", gt), write_detections(tmp_path / "det.jsonl", dets)


def B(*c):
    return BoundingBox(*c)


def build(gt, dets, size=(100, 100)):
    """gt: {image: [boxes]}, dets: [(image, box, score)] with integer tuple boxes."""
    images = tuple(ImageRecord(k, *size) for k in gt)
    anns = tuple(Annotation(k, B(*b)) for k, bs in gt.items() for b in bs)
    return Dataset(images, anns), [Detection(i, B(*b), s) for i, b, s in dets]


def random_instance(rng, max_images=5, max_gt=10, max_det=15):
    gt, dets = {}, []
    scores = rng.sample(range(1, 10**6), 5 * max_det)
    for k in range(rng.randint(1, max_images)):
        boxes = []
        for _ in range(rng.randint(0, max_gt)):
            x0, y0 = rng.randint(0, 80), rng.randint(0, 80)
            boxes.append((x0, y0, rng.randint(x0 + 1, 100), rng.randint(y0 + 1, 100)))
        gt[f"im{k}"] = boxes
        for _ in range(rng.randint(0, max_det)):
            if boxes and rng.random() < 0.6:
                g = rng.choice(boxes)
                d = [c + rng.randint(-6, 6) for c in g]
                x0, y0 = max(0, min(d[0], 98)), max(0, min(d[1], 98))
                box = (x0, y0, min(100, max(d[2], x0 + 1)), min(100, max(d[3], y0 + 1)))
            else:
                x0, y0 = rng.randint(0, 90), rng.randint(0, 90)
                box = (x0, y0, rng.randint(x0 + 1, 100), rng.randint(y0 + 1, 100))
            dets.append((f"im{k}", box, scores.pop() / 10**6))
    if not any(gt.values()):
        gt["im0"] = [(0, 0, 10, 10)]
    return gt, dets
