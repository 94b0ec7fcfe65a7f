"""Evaluate pothole detections, summarise datasets and replay hazard logs.

Machine-readable JSON goes to stdout (or ``--out``), human-readable notes to
stderr. Exit codes: 0 success, 1 usage error, 2 validation failure,
3 runtime or I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from fractions import Fraction
from pathlib import Path

from . import dataset as ds
from . import hazard, losses, metrics, stats
from .geometry import nms

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("potholekit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def render_json(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with every real printed at 6 decimals and keys in insertion order."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return "null"
        return f"{obj:.6f}"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, Fraction):
        return json.dumps(f"{obj.numerator}/{obj.denominator}")
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {render_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [pad + render_json(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot render {type(obj).__name__}")


def _emit(payload, out: str | None):
    text = render_json(payload) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _resolution(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None


def _unit_float(text: str) -> float:
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1], got {text}")
    return v


# -- config files -----------------------------------------------------------

def read_config(path) -> dict:
    """Options from a JSON object or ``key = value`` lines; keys may use dashes."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        raw = json.loads(text)
    else:
        raw = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
    return {k.replace("-", "_"): v for k, v in raw.items()}


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, defaults: dict):
    """Fill options not given on the command line from --config, then defaults."""
    config = read_config(args.config) if getattr(args, "config", None) else {}
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config", "command")}
    unknown = set(config) - set(actions)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for dest, action in actions.items():
        if getattr(args, dest) is not None:
            continue
        if dest in config:
            value = config[dest]
            convert = action.type or str
            if isinstance(action, argparse._AppendAction):
                items = value if isinstance(value, list) else str(value).split(",")
                value = [convert(v) if isinstance(v, str) else v for v in items]
            elif isinstance(value, str):
                value = convert(value)
            setattr(args, dest, value)
        elif dest in defaults:
            setattr(args, dest, defaults[dest])
    missing = [d for d in args.required_options if getattr(args, d) is None]
    if missing:
        flags = ", ".join("--" + d.replace("_", "-") for d in missing)
        raise UsageError(f"{parser.prog}: missing required option(s): {flags}")


# -- subcommands ------------------------------------------------------------

def cmd_validate(args) -> int:
    data = ds.load_annotations(args.annotations)
    report = {"images": len(data.images), "annotations": len(data.annotations), "valid": True}
    if args.detections:
        report["detections"] = len(ds.load_detections(args.detections, data))
    log.info("%s: %d images, %d annotations, clean", args.annotations, len(data.images), len(data.annotations))
    _emit(report, args.out)
    return EXIT_OK


def cmd_stats(args) -> int:
    data = ds.load_annotations(args.annotations)
    ratio_box = stats.boxplot(stats.aspect_ratios(data))
    area_box = stats.boxplot(stats.pixel_areas(data))
    rec = stats.recommend_tuning(data, args.resolution)
    payload = {
        "aspect_ratio": ratio_box.to_dict(),
        "pixel_area": area_box.to_dict(),
        "recommendation": rec.to_dict(),
    }
    if args.csv_out:
        write_stats_csv(args.csv_out, ratio_box, area_box)
    log.info("aspect ratio median %.3f, area median %.1f px", ratio_box.median, area_box.median)
    _emit(payload, args.out)
    return EXIT_OK


def write_stats_csv(path, ratio_box: stats.BoxplotSummary, area_box: stats.BoxplotSummary):
    keys = ["n", "q1", "median", "q3", "iqr", "lower_limit", "upper_limit", "lower_whisker", "upper_whisker"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic", "aspect_ratio", "pixel_area"])
        for k in keys:
            a, b = getattr(ratio_box, k), getattr(area_box, k)
            w.writerow([k, a if k == "n" else f"{a:.6f}", b if k == "n" else f"{b:.6f}"])
        w.writerow(["outliers", len(ratio_box.outliers), len(area_box.outliers)])


def _curve_path(base: str, t: float, many: bool) -> str:
    if not many:
        return base
    p = Path(base)
    return str(p.with_name(f"{p.stem}_iou{t:.2f}{p.suffix}"))


def cmd_eval(args) -> int:
    data = ds.load_annotations(args.annotations)
    dets = ds.load_detections(args.detections, data)
    if args.protocol == "coco":
        thresholds = list(metrics.COCO_THRESHOLDS)
    else:
        thresholds = list(dict.fromkeys(args.iou or [0.5]))
    rows = metrics.evaluate(data, dets, thresholds)
    entries = []
    for row in rows:
        entry = {k: row[k] for k in ("iou", "protocol", "ap", "ap_exact", "tp", "fp", "fn")}
        entry["operating_point"] = row["operating_point"]
        entries.append(entry)
        if args.curve_out:
            metrics.export_curve(row["curve"], _curve_path(args.curve_out, row["iou"], len(rows) > 1))
    payload = {
        "protocol": args.protocol,
        "images": len(data.images),
        "annotations": len(data.annotations),
        "detections": len(dets),
        "results": entries,
    }
    if args.protocol == "coco":
        mean = sum(r["ap"] for r in rows) / len(rows)
        payload["coco_map"] = mean
        payload["coco_map_exact"] = sum((r["ap_exact"] for r in rows), Fraction(0)) / len(rows)
    for e in entries:
        log.info("IoU %.2f: AP %.4f (tp %d, fp %d, fn %d)", e["iou"], e["ap"], e["tp"], e["fp"], e["fn"])
    _emit(payload, args.out)
    return EXIT_OK


def cmd_curves(args) -> int:
    data = ds.load_annotations(args.annotations)
    dets = ds.load_detections(args.detections, data)
    thresholds = list(dict.fromkeys(args.iou or [0.5]))
    written = []
    for row in metrics.evaluate(data, dets, thresholds):
        path = _curve_path(args.curve_out, row["iou"], len(thresholds) > 1)
        metrics.export_curve(row["curve"], path)
        written.append({"iou": row["iou"], "path": path, "points": len(row["curve"])})
    _emit({"curves": written}, args.out)
    return EXIT_OK


def cmd_nms(args) -> int:
    data = ds.load_annotations(args.annotations) if args.annotations else None
    dets = ds.load_detections(args.detections, data)
    kept = []
    for image_id, group in sorted(ds.group_detections(dets).items()):
        for box, score in nms([(d.box, d.score) for d in group], args.iou):
            kept.append(ds.Detection(image_id, box, score))
    if args.filtered_out:
        ds.save_detections(kept, args.filtered_out)
    log.info("nms @ %.2f kept %d of %d detections", args.iou, len(kept), len(dets))
    _emit({"iou": args.iou, "input": len(dets), "kept": len(kept)}, args.out)
    return EXIT_OK


def cmd_loss_check(args) -> int:
    results = losses.run_checks(n_points=args.points, seed=args.seed)
    width = max(len(name) for name, _, _ in results)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}", file=sys.stderr)
    payload = {"checks": [{"name": n, "passed": ok, "detail": d} for n, ok, d in results]}
    payload["all_passed"] = all(ok for _, ok, _ in results)
    _emit(payload, args.out)
    return EXIT_OK if payload["all_passed"] else EXIT_INVALID


def cmd_simulate(args) -> int:
    config = hazard.HazardConfig(
        report_threshold=args.threshold,
        half_life_hours=args.half_life_hours,
        cell_size_m=args.cell_size,
        debounce_seconds=args.debounce_seconds,
        expire_confidence=args.expire_confidence,
    )
    result = hazard.replay(args.events, config)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for w in result.warnings:
                fh.write(json.dumps(w.to_json(), sort_keys=True) + "\n")
    if args.cells_out:
        Path(args.cells_out).write_text("\n".join(result.report_lines()) + "\n", encoding="utf-8")
    log.info(
        "%d events, %d cells, %d warnings",
        result.summary["events_ingested"], result.summary["cells_touched"], result.summary["warnings_emitted"],
    )
    sys.stdout.write(render_json(result.summary) + "\n")
    return EXIT_OK


def cmd_convert(args) -> int:
    n = ds.convert_annotation_file(args.annotations, args.output, args.mode)
    log.info("converted %d boxes (%s)", n, args.mode)
    _emit({"boxes": n, "mode": args.mode, "output": args.output}, args.out)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

DEFAULTS = {
    "stats": {"resolution": [(600, 600), (1024, 800)]},
    "eval": {"protocol": "pascal"},
    "nms": {"iou": 0.5},
    "loss-check": {"points": 100, "seed": 0},
    "simulate": {
        "cell_size": 10.0,
        "threshold": 3,
        "half_life_hours": 24.0,
        "debounce_seconds": 5.0,
        "expire_confidence": 0.05,
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="potholekit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="options file (JSON object or key=value lines); flags override it")
        p.set_defaults(func=func, required_options=[])
        return p

    def need(p, *flags, **kw):
        action = p.add_argument(*flags, **kw)
        p._defaults["required_options"] = p._defaults["required_options"] + [action.dest]
        action.help = (action.help + " " if action.help else "") + "(required; may come from --config)"
        return action

    p = add("validate", cmd_validate, "validate an annotation file and optionally detections against it")
    need(p, "--annotations")
    p.add_argument("--detections")
    p.add_argument("--out", help="write the JSON report here instead of stdout")

    p = add("stats", cmd_stats, "aspect-ratio / area box plots and anchor recommendations")
    need(p, "--annotations")
    p.add_argument("--resolution", type=_resolution, action="append", help="candidate input size WxH (repeatable)")
    p.add_argument("--csv-out", help="box plot summaries as CSV columns")
    p.add_argument("--out")

    p = add("eval", cmd_eval, "PASCAL / COCO-style 11-point mAP of detections")
    need(p, "--annotations")
    need(p, "--detections")
    p.add_argument("--protocol", choices=["pascal", "coco"])
    p.add_argument("--iou", type=_unit_float, action="append", help="IoU threshold (repeatable, pascal only)")
    p.add_argument("--curve-out", help="export precision-recall CSV")
    p.add_argument("--out")

    p = add("curves", cmd_curves, "export precision-recall curves as CSV")
    need(p, "--annotations")
    need(p, "--detections")
    p.add_argument("--iou", type=_unit_float, action="append")
    need(p, "--curve-out")
    p.add_argument("--out")

    p = add("nms", cmd_nms, "greedy non-maximum suppression per image")
    need(p, "--detections")
    p.add_argument("--annotations", help="check image ids and bounds against this file")
    p.add_argument("--iou", type=float)
    p.add_argument("--filtered-out", help="write surviving detections as JSON Lines")
    p.add_argument("--out")

    p = add("loss-check", cmd_loss_check, "loss invariants and gradient checks")
    p.add_argument("--points", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("simulate", cmd_simulate, "replay a hazard event log through the cell aggregator")
    need(p, "--events")
    p.add_argument("--cell-size", type=float)
    p.add_argument("--threshold", type=int)
    p.add_argument("--half-life-hours", type=float)
    p.add_argument("--debounce-seconds", type=float)
    p.add_argument("--expire-confidence", type=float)
    p.add_argument("--out", help="warnings as JSON Lines")
    p.add_argument("--cells-out", help="full report: warnings, final cell states, summary")

    p = add("convert", cmd_convert, "convert annotation boxes between inclusive and half-open bounds")
    need(p, "--annotations")
    need(p, "--mode", choices=[ds.INCLUSIVE_TO_HALF_OPEN, ds.HALF_OPEN_TO_INCLUSIVE])
    need(p, "--output")
    p.add_argument("--out")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(sub, args, DEFAULTS.get(args.command, {}))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"potholekit: bad config: {exc}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ds.ValidationError, ds.ParseError, hazard.ReplayError, hazard.OutOfOrderError) as exc:
        print(f"potholekit {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError) as exc:
        print(f"potholekit {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
