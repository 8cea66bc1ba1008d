"""Time-series storage and metric derivation.

Raw samples live in one append-only JSON Lines file per run
(``<root>/runs/<run_id>.jsonl``) with an in-memory index on top. Summaries are
recomputed from those series on demand and are never the source of truth.
"""

from __future__ import annotations

import bisect
import json
import math
import threading
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .errors import (
    EmptySeries,
    InsufficientSamples,
    MissingSeries,
    OutOfOrder,
    UnknownRun,
)

LATENCY = "latency_ms"
POWER = "power_w"
GRACT = "gract_frac"
FB = "fb_mib"
METRICS = (LATENCY, POWER, GRACT, FB)


class SeriesKey(NamedTuple):
    run_id: str
    instance: str
    metric: str


@dataclass
class TimeSeries:
    key: SeriesKey
    ts: list = field(default_factory=list)
    values: list = field(default_factory=list)
    warmup_end_ts: Optional[float] = None

    def __len__(self):
        return len(self.ts)

    def points(self):
        return list(zip(self.ts, self.values))

    def after(self, start: Optional[float]):
        """Points strictly after ``start`` (all points when ``start`` is None)."""
        if start is None:
            return list(self.ts), list(self.values)
        i = np.searchsorted(np.asarray(self.ts, dtype=float), start, side="right")
        return self.ts[i:], self.values[i:]


def _line(key: SeriesKey, ts, value) -> str:
    return json.dumps(
        {"run_id": key.run_id, "instance": key.instance, "metric": key.metric, "ts_ms": ts, "value": value},
        separators=(",", ":"),
    )


class TelemetryStore:
    """Append-only series store; ``root=None`` keeps everything in memory."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self._series: dict[SeriesKey, TimeSeries] = {}
        self._meta: dict[str, dict] = {}
        self._files: dict[str, object] = {}
        self._series_locks: dict[SeriesKey, threading.Lock] = {}
        self._guard = threading.Lock()
        if self.root is not None:
            self.runs_dir.mkdir(parents=True, exist_ok=True)
            self._load()

    @property
    def runs_dir(self) -> Path:
        return self.root / "runs"

    # -- writing ---------------------------------------------------------

    def _lock_for(self, key: SeriesKey) -> threading.Lock:
        with self._guard:
            lock = self._series_locks.get(key)
            if lock is None:
                lock = self._series_locks[key] = threading.Lock()
                self._series[key] = TimeSeries(key)
            return lock

    def _file(self, run_id: str):
        with self._guard:
            fh = self._files.get(run_id)
            if fh is None:
                fh = self._files[run_id] = open(self.runs_dir / f"{run_id}.jsonl", "a", encoding="utf-8")
            return fh

    def append(self, key: SeriesKey, ts, value) -> None:
        self.append_many(key, [(ts, value)])

    def append_many(self, key: SeriesKey, points: Iterable) -> None:
        key = SeriesKey(*key)
        lock = self._lock_for(key)
        with lock:
            series = self._series[key]
            last = series.ts[-1] if series.ts else None
            lines = []
            for ts, value in points:
                if last is not None and not ts > last:
                    raise OutOfOrder(
                        f"{key.run_id}/{key.instance}/{key.metric}: ts {ts} is not after {last}",
                        ts=ts,
                        last=last,
                    )
                series.ts.append(ts)
                series.values.append(value)
                last = ts
                if self.root is not None:
                    lines.append(_line(key, ts, value))
            if lines:
                fh = self._file(key.run_id)
                fh.write("\n".join(lines) + "\n")
                fh.flush()

    def set_warmup(self, run_id: str, warmup_end_ts: Optional[float]) -> None:
        for key, series in self._series.items():
            if key.run_id == run_id:
                series.warmup_end_ts = warmup_end_ts
        meta = dict(self._meta.get(run_id, {}))
        meta["warmup_end_ts"] = warmup_end_ts
        self.write_meta(run_id, meta)

    def write_meta(self, run_id: str, meta: dict) -> None:
        self._meta[run_id] = dict(meta)
        if self.root is not None:
            path = self.runs_dir / f"{run_id}.json"
            path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    def close_run(self, run_id: str) -> None:
        with self._guard:
            fh = self._files.pop(run_id, None)
        if fh is not None:
            fh.close()

    def close(self) -> None:
        for run_id in list(self._files):
            self.close_run(run_id)

    # -- reading ---------------------------------------------------------

    def _load(self) -> None:
        for meta_path in sorted(self.runs_dir.glob("*.json")):
            if meta_path.name.endswith(".summary.json"):
                continue
            self._meta[meta_path.stem] = json.loads(meta_path.read_text())
        for path in sorted(self.runs_dir.glob("*.jsonl")):
            with open(path, encoding="utf-8") as fh:
                for raw in fh:
                    if not raw.strip():
                        continue
                    rec = json.loads(raw)
                    key = SeriesKey(rec["run_id"], rec["instance"], rec["metric"])
                    series = self._series.get(key)
                    if series is None:
                        series = self._series[key] = TimeSeries(key)
                        self._series_locks[key] = threading.Lock()
                    series.ts.append(rec["ts_ms"])
                    series.values.append(rec["value"])
        for key, series in self._series.items():
            series.warmup_end_ts = self._meta.get(key.run_id, {}).get("warmup_end_ts")

    def run_ids(self) -> list[str]:
        return sorted(set(self._meta) | {k.run_id for k in self._series})

    def meta(self, run_id: str) -> dict:
        if run_id not in self._meta and not any(k.run_id == run_id for k in self._series):
            raise UnknownRun(f"unknown run {run_id}", run_id=run_id)
        return dict(self._meta.get(run_id, {}))

    def keys(self, run_id: Optional[str] = None) -> list[SeriesKey]:
        return sorted(k for k in self._series if run_id is None or k.run_id == run_id)

    def series(self, run_id: str, metric: str, instance: Optional[str] = None) -> TimeSeries:
        matches = [
            s
            for k, s in sorted(self._series.items())
            if k.run_id == run_id and k.metric == metric and (instance is None or k.instance == instance)
        ]
        if not matches:
            raise MissingSeries(f"run {run_id} has no {metric} series", missing=[metric])
        return matches[0]

    def samples(self, run_ids: Iterable[str]):
        """Every raw sample of the given runs, ordered by run, ts, metric."""
        rows = []
        for run_id in run_ids:
            self.meta(run_id)
            for key in self.keys(run_id):
                series = self._series[key]
                rows.extend((key.run_id, ts, key.metric, key.instance, v) for ts, v in series.points())
        rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
        return rows


# ---------------------------------------------------------------------------
# metric derivations


def percentile(samples, p: float):
    """Nearest-rank percentile: the ``ceil(p * n)``-th smallest sample."""
    values = sorted(samples)
    if not values:
        raise EmptySeries("percentile of an empty sample set")
    if not 0 < p <= 1:
        raise ValueError(f"percentile fraction must be in (0, 1], got {p}")
    # decimal reading of p, so 0.29 * 100 ranks 29 rather than 30
    rank = math.ceil(Fraction(repr(float(p))) * len(values))
    return values[max(rank, 1) - 1]


def throughput(completion_ts, batch_size: int, start_ts: float, end_ts: float) -> dict:
    """Batches completed in ``(start_ts, end_ts]`` per second of that window."""
    done = sum(1 for t in completion_ts if start_ts < t <= end_ts)
    seconds = (end_ts - start_ts) / 1000.0
    if done == 0 or seconds <= 0:
        raise EmptySeries("no completed batches inside the measurement window")
    per_s = done / seconds
    return {"batches_per_sec": per_s, "samples_per_sec": per_s * batch_size}


def _window(ts, values, window):
    if window is None:
        return list(ts), list(values)
    lo, hi = window
    pairs = [(t, v) for t, v in zip(ts, values) if (lo is None or t >= lo) and (hi is None or t <= hi)]
    return [t for t, _ in pairs], [v for _, v in pairs]


def integrate(ts, values, window=None) -> float:
    ts, values = _window(ts, values, window)
    if len(ts) < 2:
        raise InsufficientSamples(f"need at least 2 points to integrate, got {len(ts)}")
    return math.fsum((values[i] + values[i - 1]) / 2.0 * (ts[i] - ts[i - 1]) for i in range(1, len(ts)))


def energy(ts_ms, watts, window=None) -> float:
    """Trapezoidal energy in millijoules (W x ms) over an optional ``(lo, hi)`` window."""
    return integrate(ts_ms, watts, window)


def time_weighted_mean(ts, values, window=None) -> float:
    ts, values = _window(ts, values, window)
    if not ts:
        raise EmptySeries("no points in window")
    if len(ts) == 1 or ts[-1] == ts[0]:
        return float(values[0])
    return integrate(ts, values) / (ts[-1] - ts[0])


def sample_floor(ts, t: float) -> float:
    """Latest sample time at or before ``t``, or ``t`` itself if none precedes it."""
    j = bisect.bisect_right(list(ts), t)
    return ts[j - 1] if j else t


@dataclass(frozen=True)
class MetricSummary:
    run_id: str
    avg_latency_ms: float
    p99_latency_ms: float
    stddev_latency_ms: float
    requests: int
    throughput_batch_per_s: float
    throughput_samples_per_s: float
    mean_gract_frac: float
    peak_fb_mib: float
    energy_mj: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricSummary":
        return cls(**{f: doc[f] for f in cls.__dataclass_fields__})


SUMMARY_FIELDS = tuple(MetricSummary.__dataclass_fields__)


def summarize(store: TelemetryStore, run_id: str, include_warmup: bool = False) -> MetricSummary:
    meta = store.meta(run_id)
    missing = [m for m in METRICS if not any(k.metric == m for k in store.keys(run_id))]
    if missing:
        raise MissingSeries(f"run {run_id} is missing series: {', '.join(missing)}", missing=missing)
    lat = store.series(run_id, LATENCY)
    start = None if include_warmup else lat.warmup_end_ts
    lat_ts, lat_v = lat.after(start)
    if not lat_v:
        raise EmptySeries(f"run {run_id} has no latency samples after warm-up")
    begin = 0.0 if start is None else start
    end = meta.get("end_ts_ms", lat.ts[-1])
    batch = meta.get("spec", {}).get("batch_size", 1)
    tput = throughput(lat_ts, batch, begin, end)
    power = store.series(run_id, POWER)
    # resource samples close a bin, so start from the sample covering the warm-up boundary
    window = (sample_floor(power.ts, begin), None)
    gract = store.series(run_id, GRACT)
    fb = store.series(run_id, FB)
    _, fb_v = _window(fb.ts, fb.values, window)
    if not fb_v:
        raise EmptySeries(f"run {run_id} has no memory samples after warm-up")
    arr = np.asarray(lat_v, dtype=float)
    return MetricSummary(
        run_id=run_id,
        avg_latency_ms=math.fsum(lat_v) / len(lat_v),
        p99_latency_ms=percentile(lat_v, 0.99),
        stddev_latency_ms=float(arr.std()),
        requests=len(lat_v),
        throughput_batch_per_s=tput["batches_per_sec"],
        throughput_samples_per_s=tput["samples_per_sec"],
        mean_gract_frac=time_weighted_mean(gract.ts, gract.values, window),
        peak_fb_mib=float(max(fb_v)),
        energy_mj=energy(power.ts, power.values, window),
    )
