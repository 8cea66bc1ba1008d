"""Exporters: Prometheus text exposition, CSV, and plot-ready figure datasets."""

from __future__ import annotations

import csv
import io
import itertools
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import telemetry as tm
from .errors import IncompleteGrid, InvalidSpec

# exposition name -> MetricSummary field
SUMMARY_GAUGES = {
    "migperf_latency_p99_ms": ("p99_latency_ms", "99th percentile request latency in milliseconds"),
    "migperf_latency_avg_ms": ("avg_latency_ms", "Mean request latency in milliseconds"),
    "migperf_throughput_batch_per_s": ("throughput_batch_per_s", "Completed batches per second"),
    "migperf_gract_ratio": ("mean_gract_frac", "Time-weighted graphics engine activity, 0 to 1"),
    "migperf_fb_mib": ("peak_fb_mib", "Peak framebuffer memory in MiB"),
    "migperf_energy_mj": ("energy_mj", "Energy over the measured window in millijoules"),
}
POWER_GAUGE = ("migperf_power_w", "Most recent power sample in watts")
LABELS = ("run", "device", "instance", "profile")


def escape_label(value: str) -> str:
    return str(value).replace("\\", "\\\\").replace("\n", "\\n").replace('"', '\\"')


def format_value(value: float) -> str:
    value = float(value)
    if math.isnan(value):
        return "NaN"
    if math.isinf(value):
        return "+Inf" if value > 0 else "-Inf"
    return repr(value)


@dataclass
class ExportRow:
    """One run as seen by the exporter at snapshot time."""

    labels: dict
    summary: Optional[tm.MetricSummary] = None
    power_tail: Optional[float] = None


def export_prometheus(rows: Iterable[ExportRow], timestamp_ms: int) -> str:
    """Gauges in text exposition format 0.0.4, grouped by metric family."""
    rows = sorted(rows, key=lambda r: tuple(str(r.labels.get(k, "")) for k in LABELS))
    families: dict[str, list[str]] = {}
    helps = {name: help_ for name, (_, help_) in SUMMARY_GAUGES.items()}
    helps[POWER_GAUGE[0]] = POWER_GAUGE[1]
    for row in rows:
        label_text = ",".join(f'{k}="{escape_label(row.labels.get(k, ""))}"' for k in LABELS)
        if row.summary is not None:
            for name, (attr, _) in SUMMARY_GAUGES.items():
                value = getattr(row.summary, attr)
                families.setdefault(name, []).append(f"{name}{{{label_text}}} {format_value(value)} {timestamp_ms}")
        if row.power_tail is not None:
            name = POWER_GAUGE[0]
            families.setdefault(name, []).append(f"{name}{{{label_text}}} {format_value(row.power_tail)} {timestamp_ms}")
    lines = []
    for name in list(SUMMARY_GAUGES) + [POWER_GAUGE[0]]:
        samples = families.get(name)
        if not samples:
            continue
        lines.append(f"# HELP {name} {helps[name]}")
        lines.append(f"# TYPE {name} gauge")
        lines.extend(samples)
    # an empty snapshot is still a well-formed document: a lone newline
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# CSV

RUN_COLUMNS = (
    "run_id",
    "group_id",
    "device_id",
    "device_model",
    "instance",
    "profile",
    "arm",
    "replica",
    "kind",
    "model",
    "loop",
    "batch_size",
    "sequence_length",
    "arrival_rate",
)
SUMMARY_COLUMNS = RUN_COLUMNS + tuple(f for f in tm.SUMMARY_FIELDS if f != "run_id")
RAW_COLUMNS = ("run_id", "instance", "metric", "ts_ms", "value")


def _cell(value):
    return "" if value is None else value


def run_columns(meta: dict) -> dict:
    spec = meta.get("spec", {})
    return {
        "run_id": meta.get("run_id"),
        "group_id": meta.get("group_id"),
        "device_id": meta.get("device_id"),
        "device_model": meta.get("device_model"),
        "instance": meta.get("instance"),
        "profile": meta.get("profile"),
        "arm": meta.get("arm"),
        "replica": meta.get("replica"),
        "kind": spec.get("kind"),
        "model": spec.get("model", {}).get("name"),
        "loop": spec.get("loop"),
        "batch_size": spec.get("batch_size"),
        "sequence_length": spec.get("sequence_length"),
        "arrival_rate": spec.get("arrival_rate"),
    }


def summaries_csv(items: Iterable[tuple[dict, tm.MetricSummary]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for meta, summary in sorted(items, key=lambda it: it[1].run_id):
        row = run_columns(meta)
        row.update(summary.to_dict())
        writer.writerow([_cell(row[c]) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def raw_csv(samples) -> str:
    """``samples`` are ``(run_id, ts, metric, instance, value)`` tuples, already ordered."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RAW_COLUMNS)
    for run_id, ts, metric, instance, value in samples:
        writer.writerow([run_id, instance, metric, ts, value])
    return buf.getvalue()


def read_summaries_csv(text: str) -> list[tm.MetricSummary]:
    """Parse a summaries CSV (LF or CRLF) back into MetricSummary records."""
    reader = csv.DictReader(io.StringIO(text, newline=""))
    out = []
    for row in reader:
        doc = {}
        for name in tm.SUMMARY_FIELDS:
            raw = row[name]
            if name == "run_id":
                doc[name] = raw
            elif name == "requests":
                doc[name] = int(raw)
            else:
                doc[name] = float(raw)
        out.append(tm.MetricSummary(**doc))
    return out


# ---------------------------------------------------------------------------
# figure datasets


@dataclass
class RunView:
    meta: dict
    summary: tm.MetricSummary
    latencies: list = field(default_factory=list)


@dataclass
class FigureDataset:
    figure_id: str
    columns: list
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_cell(row[c]) for c in self.columns])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"figure_id": self.figure_id, "columns": list(self.columns), "rows": [dict(r) for r in self.rows]}


def _key_of(view: RunView, column: str):
    cols = run_columns(view.meta)
    if column == "profile":
        return cols["profile"]
    if column in ("model", "model_size"):
        return cols["model"]
    if column == "arrival_rate_per_s":
        return cols["arrival_rate"]
    return cols[column]


def _single(views, point):
    if len(views) != 1:
        raise InvalidSpec(f"expected one run at {point}, found {len(views)}")
    return views[0].summary


def _sweep_values(columns):
    def build(views, point):
        s = _single(views, point)
        out = {}
        for c in columns:
            if c == "throughput_batch_per_s":
                out[c] = s.throughput_batch_per_s
            elif c == "gract_pct":
                out[c] = s.mean_gract_frac * 100.0
            elif c == "fb_mib":
                out[c] = s.peak_fb_mib
            elif c == "energy_mj":
                out[c] = s.energy_mj
            elif c == "p99_ms":
                out[c] = s.p99_latency_ms
        return out

    return build


def _pooled_values(columns):
    def build(views, point):
        pooled = [v for view in views for v in view.latencies]
        if not pooled:
            raise InvalidSpec(f"no latency samples at {point}")
        arr = np.asarray(pooled, dtype=float)
        out = {}
        for c in columns:
            if c == "avg_ms":
                out[c] = math.fsum(pooled) / len(pooled)
            elif c == "p99_ms":
                out[c] = tm.percentile(pooled, 0.99)
            elif c == "stddev_ms":
                out[c] = float(arr.std())
        return out

    return build


@dataclass(frozen=True)
class FigureDef:
    keys: tuple
    values: tuple
    pooled: bool
    # sweep/comparison axes a source group must vary
    axes: tuple
    arm: Optional[str] = None


FIGURES = {
    "fig2_training_batch_sweep": FigureDef(
        ("profile", "batch_size"),
        ("throughput_batch_per_s", "gract_pct", "fb_mib", "energy_mj"),
        False,
        ("profile_name", "batch_size"),
    ),
    "fig3_inference_seq_sweep": FigureDef(
        ("profile", "sequence_length"),
        ("p99_ms", "gract_pct", "fb_mib", "energy_mj"),
        False,
        ("profile_name", "sequence_length"),
    ),
    "fig4_sharing_avg_latency": FigureDef(("model", "batch_size", "arm"), ("avg_ms", "stddev_ms"), True, ("batch_size",)),
    "fig5_sharing_tail_latency": FigureDef(("model", "batch_size", "arm"), ("p99_ms", "stddev_ms"), True, ("batch_size",)),
    "fig6_sharing_batch_tail": FigureDef(("model", "batch_size", "arm"), ("p99_ms", "stddev_ms"), True, ("batch_size",)),
    "fig7_sharing_model_size": FigureDef(("model_size", "arm"), ("p99_ms",), True, ("model",)),
    "fig10_mps_arrival_rate": FigureDef(("arrival_rate_per_s", "arm"), ("p99_ms",), True, ("arrival_rate",), arm="mps"),
    "fig11_mig_arrival_rate": FigureDef(("arrival_rate_per_s", "arm"), ("p99_ms",), True, ("arrival_rate",), arm="mig"),
}


def _sort_key(value):
    if value is None:
        return (0, 0, "")
    if isinstance(value, (int, float)):
        return (1, value, "")
    m = re.match(r"^(\d+)g\.", str(value))
    if m:
        return (2, int(m.group(1)), str(value))
    return (3, 0, str(value))


def build_figure_dataset(figure_id: str, views: list[RunView], expected_axes: Optional[dict] = None) -> FigureDataset:
    """Rows keyed exactly like the figure's axes; every grid point must be present.

    The grid is the product of the key values seen in ``views`` (or of
    ``expected_axes`` where given), so a missing point is reported instead of
    silently leaving a hole.
    """
    try:
        fig = FIGURES[figure_id]
    except KeyError:
        raise InvalidSpec(f"unknown figure {figure_id!r}; known: {', '.join(FIGURES)}") from None
    if fig.arm is not None:
        views = [v for v in views if v.meta.get("arm") == fig.arm]
    groups: dict[tuple, list[RunView]] = {}
    for view in views:
        key = tuple(_key_of(view, c) for c in fig.keys)
        groups.setdefault(key, []).append(view)
    axis_values = []
    for i, column in enumerate(fig.keys):
        declared = (expected_axes or {}).get(column)
        seen = {k[i] for k in groups}
        values = list(declared) if declared is not None else sorted(seen, key=_sort_key)
        axis_values.append(values)
    grid = list(itertools.product(*axis_values))
    missing = [dict(zip(fig.keys, point)) for point in grid if point not in groups]
    if missing or not grid or not groups:
        raise IncompleteGrid(
            f"{figure_id}: missing {len(missing)} grid point(s): "
            + "; ".join(", ".join(f"{k}={v}" for k, v in m.items()) for m in missing[:10])
            if missing
            else f"{figure_id}: no runs match this figure",
            missing=missing,
        )
    build = (_pooled_values if fig.pooled else _sweep_values)(fig.values)
    rows = []
    for point in grid:
        row = dict(zip(fig.keys, point))
        row.update(build(groups[point], row))
        rows.append(row)
    return FigureDataset(figure_id, list(fig.keys) + list(fig.values), rows)
