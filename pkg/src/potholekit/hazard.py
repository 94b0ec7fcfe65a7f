"""Geolocated pothole reports, per-cell confidence and hazard warnings.

Vehicles turn detections into :class:`HazardEvent` messages positioned at
the vehicle's own GPS fix. The aggregator snaps each event to an
equirectangular grid cell, decays the cell's confidence exponentially, adds
the event score, and counts debounced reports per device. Once a cell has
``report_threshold`` reports it issues a single :class:`WarningMessage`.

Wire format (JSON Lines, one object per line)::

    {"device_id": "car-1", "timestamp": 1700000000000, "lat": 41.65,
     "lon": -4.72, "score": 0.91, "box_count": 2}

Warnings are written the same way with keys ``cell_id``, ``lat``, ``lon``,
``confidence``, ``distinct_reports`` and ``issued_at``.
"""
from __future__ import annotations

import heapq
import json
import math
import threading
from functools import lru_cache
from collections import defaultdict
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator

try:
    from orjson import loads as _loads
except ImportError:  # pragma: no cover
    _loads = json.JSONDecoder().decode

METERS_PER_DEGREE = 111320.0
SPEED_LIMIT_KMH = 60.0


class OutOfOrderError(ValueError):
    """An event older than the same device's previous report for that cell."""


class ReplayError(ValueError):
    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(f"line {n}: {m}" for n, m in self.issues))


@dataclass(frozen=True)
class HazardConfig:
    report_threshold: int = 3
    half_life_hours: float = 24.0
    cell_size_m: float = 10.0
    debounce_seconds: float = 5.0
    # decayed confidence below this forgets the cell's report count and re-arms its warning
    expire_confidence: float = 0.05

    def __post_init__(self):
        if self.report_threshold < 1:
            raise ValueError("report_threshold must be >= 1")
        if self.half_life_hours <= 0 or self.cell_size_m <= 0:
            raise ValueError("half_life_hours and cell_size_m must be positive")
        if self.debounce_seconds < 0 or self.expire_confidence < 0:
            raise ValueError("debounce_seconds and expire_confidence must be non-negative")

    @classmethod
    def from_mapping(cls, values: dict) -> "HazardConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        casts = {"report_threshold": int}
        return cls(**{k: casts.get(k, float)(v) for k, v in values.items()})


@dataclass(frozen=True)
class VehiclePose:
    timestamp: int  # ms since epoch
    latitude: float
    longitude: float
    speed: float  # km/h
    device_id: str

    def __post_init__(self):
        _check_coords(self.latitude, self.longitude)


@dataclass(frozen=True)
class HazardEvent:
    device_id: str
    timestamp: int
    latitude: float
    longitude: float
    score: float
    box_count: int

    def __post_init__(self):
        _check_coords(self.latitude, self.longitude)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.box_count < 1:
            raise ValueError("box_count must be >= 1")

    def to_json(self) -> dict:
        return {
            "device_id": self.device_id,
            "timestamp": self.timestamp,
            "lat": self.latitude,
            "lon": self.longitude,
            "score": self.score,
            "box_count": self.box_count,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HazardEvent":
        return cls(*_event_fields(obj))


@dataclass(slots=True)
class CellState:
    cell_id: tuple[int, int]
    confidence: float = 0.0
    distinct_reports: int = 0
    last_update: int = 0
    warned: bool = False
    # device_id -> timestamp of that device's latest report here
    last_seen: dict = field(default_factory=dict, repr=False, compare=False)

    def to_json(self) -> dict:
        return {
            "cell_id": list(self.cell_id),
            "confidence": self.confidence,
            "distinct_reports": self.distinct_reports,
            "last_update": self.last_update,
            "warned": self.warned,
        }


@dataclass(frozen=True)
class WarningMessage:
    cell_id: tuple[int, int]
    latitude: float
    longitude: float
    confidence: float
    distinct_reports: int
    issued_at: int

    def to_json(self) -> dict:
        return {
            "cell_id": list(self.cell_id),
            "lat": self.latitude,
            "lon": self.longitude,
            "confidence": self.confidence,
            "distinct_reports": self.distinct_reports,
            "issued_at": self.issued_at,
        }


def _check_coords(lat, lon):
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise ValueError("coordinates must be finite")
    if abs(lat) > 90.0 or not -180.0 <= lon < 180.0:
        raise ValueError(f"coordinates out of range: ({lat}, {lon})")


def check_pose_stream(poses: Iterable[VehiclePose]) -> None:
    """Raise unless timestamps strictly increase per device."""
    last: dict[str, int] = {}
    for pose in poses:
        prev = last.get(pose.device_id)
        if prev is not None and pose.timestamp <= prev:
            raise ValueError(f"device {pose.device_id!r}: timestamp {pose.timestamp} not after {prev}")
        last[pose.device_id] = pose.timestamp


def geolocate(detections, pose: VehiclePose, min_score: float = 0.5,
              speed_limit: float = SPEED_LIMIT_KMH) -> HazardEvent | None:
    """Summarise one frame's detections as an event at the vehicle position.

    Detections may be objects with a ``score`` attribute or bare scores.
    Frames captured above ``speed_limit`` km/h are dropped because motion
    blur makes detections unreliable there.
    """
    if not 0.0 <= min_score <= 1.0:
        raise ValueError(f"min_score must lie in [0, 1], got {min_score}")
    if pose.speed > speed_limit:
        return None
    scores = [float(getattr(d, "score", d)) for d in detections]
    kept = [s for s in scores if s >= min_score]
    if not kept:
        return None
    return HazardEvent(pose.device_id, pose.timestamp, pose.latitude, pose.longitude, max(kept), len(kept))


@lru_cache(maxsize=65536)
def _band_cos(lat_index: int, cell_size_m: float) -> float:
    center = (lat_index + 0.5) * cell_size_m / METERS_PER_DEGREE
    center = max(-90.0, min(90.0, center))
    return max(math.cos(math.radians(center)), 1e-9)


def cell_of(latitude: float, longitude: float, cell_size_m: float = 10.0) -> tuple[int, int]:
    """Grid cell ``(lat_index, lon_index)`` containing a point.

    Latitude bands are ``cell_size_m`` tall. Inside a band, longitude is
    scaled by the cosine of the band's centre latitude so cells stay roughly
    square. Cells are half-open: boundary points go to the higher index.
    """
    if cell_size_m <= 0:
        raise ValueError("cell_size_m must be positive")
    if not (-90.0 <= latitude <= 90.0 and -180.0 <= longitude < 180.0):
        raise ValueError(f"coordinates out of range: ({latitude}, {longitude})")
    i = math.floor(latitude * METERS_PER_DEGREE / cell_size_m)
    j = math.floor(longitude * METERS_PER_DEGREE * _band_cos(i, cell_size_m) / cell_size_m)
    return i, j


def cell_center(cell_id: tuple[int, int], cell_size_m: float = 10.0) -> tuple[float, float]:
    i, j = cell_id
    lat = (i + 0.5) * cell_size_m / METERS_PER_DEGREE
    lon = (j + 0.5) * cell_size_m / (METERS_PER_DEGREE * _band_cos(i, cell_size_m))
    return lat, lon


class CellStore:
    """Mutable per-cell state.

    :meth:`ingest` serialises updates per cell with a lock, so different
    cells can be fed from different threads. :func:`replay` uses the
    lock-free :meth:`apply` on a single thread.
    """

    def __init__(self, config: HazardConfig | None = None):
        self.config = config or HazardConfig()
        self.cells: dict[tuple[int, int], CellState] = {}
        self._locks: dict[tuple[int, int], threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()
        self._decay_rate = -math.log(2.0) / (self.config.half_life_hours * 3600_000.0)
        self._debounce_ms = self.config.debounce_seconds * 1000.0

    def ingest(self, event: HazardEvent) -> tuple[CellState, WarningMessage | None]:
        cell = cell_of(event.latitude, event.longitude, self.config.cell_size_m)
        with self._locks_guard:
            lock = self._locks[cell]
        with lock:
            return self.apply(cell, event.device_id, event.timestamp, event.score)

    def apply(self, cell, device_id: str, timestamp: int, score: float):
        """Apply one report to ``cell``; callers serialise access to the cell."""
        state = self.cells.get(cell)
        if state is None:
            state = self.cells[cell] = CellState(cell, last_update=timestamp)
        seen = state.last_seen
        prev = seen.get(device_id)
        if prev is not None and timestamp < prev:
            raise OutOfOrderError(
                f"device {device_id!r}: event at {timestamp} precedes its report at {prev} in cell {cell}"
            )

        dt = timestamp - state.last_update
        if dt > 0:
            state.confidence *= math.exp(dt * self._decay_rate)
            state.last_update = timestamp
            if state.distinct_reports and state.confidence < self.config.expire_confidence:
                state.distinct_reports = 0
                state.warned = False
        state.confidence += score

        if prev is None or timestamp - prev >= self._debounce_ms or not state.distinct_reports:
            state.distinct_reports += 1
        seen[device_id] = timestamp

        if state.warned or state.distinct_reports < self.config.report_threshold:
            return state, None
        state.warned = True
        lat, lon = cell_center(cell, self.config.cell_size_m)
        return state, WarningMessage(cell, lat, lon, state.confidence, state.distinct_reports, timestamp)


def ingest(store: CellStore, event: HazardEvent):
    return store.ingest(event)


def event_sort_key(e: HazardEvent):
    return (e.timestamp, e.device_id, e.latitude, e.longitude, e.score, e.box_count)


def _event_fields(obj) -> tuple[str, int, float, float, float, int]:
    """Validated ``(device_id, timestamp, lat, lon, score, box_count)`` of a wire record."""
    device, ts = obj["device_id"], obj["timestamp"]
    lat, lon, score, count = obj["lat"], obj["lon"], obj["score"], obj["box_count"]
    if type(device) is not str:
        raise ValueError("device_id must be a string")
    if type(ts) is not int:
        if type(ts) is not float or ts != ts or ts in (math.inf, -math.inf) or ts != int(ts):
            raise ValueError(f"timestamp must be an integer, got {ts!r}")
        ts = int(ts)
    for v in (lat, lon, score):
        if type(v) not in (float, int):
            raise ValueError(f"lat, lon and score must be numbers, got {v!r}")
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon < 180.0):
        raise ValueError(f"coordinates out of range: ({lat}, {lon})")
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score {score} outside [0, 1]")
    if type(count) is not int or count < 1:
        raise ValueError(f"box_count must be a positive integer, got {count!r}")
    return device, ts, float(lat), float(lon), float(score), count


def _read_fields(path, issues) -> Iterator[tuple[int, tuple]]:
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                yield lineno, _event_fields(_loads(raw))
            except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
                if raw.strip():
                    issues.append((lineno, f"malformed event: {exc}"))


def read_events(path) -> Iterator[tuple[int, HazardEvent]]:
    """Yield ``(line_number, event)``; malformed lines raise :class:`ReplayError` at the end."""
    issues: list = []
    for lineno, f in _read_fields(path, issues):
        yield lineno, HazardEvent(*f)
    if issues:
        raise ReplayError(issues)


def write_events(events: Iterable[HazardEvent], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps(e.to_json()) + "\n")


def merge_logs(*logs: Iterable[HazardEvent]) -> list[HazardEvent]:
    """Merge time-sorted event streams into one stream in canonical order."""
    return list(heapq.merge(*logs, key=event_sort_key))


@dataclass
class ReplayResult:
    warnings: list[WarningMessage]
    cells: list[CellState]
    summary: dict

    def report_lines(self) -> list[str]:
        """Canonical JSON lines: warnings, then final cell states, then summary."""
        out = [json.dumps({"warning": w.to_json()}, sort_keys=True) for w in self.warnings]
        for c in self.cells:
            out.append(json.dumps({"cell": c.to_json()}, sort_keys=True))
        out.append(json.dumps({"summary": self.summary}, sort_keys=True))
        return out


def replay(events, config: HazardConfig | None = None) -> ReplayResult:
    """Feed a timestamp-sorted event log through a fresh :class:`CellStore`.

    ``events`` is a path to a JSON Lines log or an iterable of events. The
    log must be sorted by timestamp; a step backwards is reported with its
    line number. Output is fully determined by the log and the config.
    """
    store = CellStore(config)
    size = store.config.cell_size_m
    issues: list = []
    if isinstance(events, (str, Path)):
        numbered = _read_fields(events, issues)
    else:
        numbered = (
            (n, (e.device_id, e.timestamp, e.latitude, e.longitude, e.score, e.box_count))
            for n, e in enumerate(events, start=1)
        )

    apply = store.apply
    floor = math.floor
    band_scale: dict[int, float] = {}
    warnings: list[WarningMessage] = []
    n = 0
    last_ts = None
    for lineno, (device, ts, lat, lon, score, _) in numbered:
        if last_ts is not None and ts < last_ts:
            issues.append((lineno, f"timestamp {ts} earlier than previous {last_ts} (log not sorted)"))
            continue
        last_ts = ts
        # same arithmetic as cell_of(), with the per-band scale cached
        i = floor(lat * METERS_PER_DEGREE / size)
        k = band_scale.get(i)
        if k is None:
            k = band_scale[i] = _band_cos(i, size)
        _, warning = apply((i, floor(lon * METERS_PER_DEGREE * k / size)), device, ts, score)
        n += 1
        if warning is not None:
            warnings.append(warning)
    if issues:
        raise ReplayError(sorted(issues))

    cells = [store.cells[k] for k in sorted(store.cells)]
    summary = {
        "events_ingested": n,
        "cells_touched": len(cells),
        "warnings_emitted": len(warnings),
    }
    return ReplayResult(warnings, cells, summary)
