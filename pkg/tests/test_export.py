import json
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st
from prometheus_client.parser import text_string_to_metric_families

from migperf import export_report as ex
from migperf import telemetry as tm
from migperf.engine import Engine
from migperf.errors import IncompleteGrid, InvalidSpec, UnknownRun

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SUMMARY_NAMES = set(ex.SUMMARY_GAUGES)


def _summary(run_id="r1", **kw):
    doc = dict(
        run_id=run_id,
        avg_latency_ms=12.5,
        p99_latency_ms=20.25,
        stddev_latency_ms=1.5,
        requests=100,
        throughput_batch_per_s=80.0,
        throughput_samples_per_s=320.0,
        mean_gract_frac=0.75,
        peak_fb_mib=2048.0,
        energy_mj=1e6,
    )
    doc.update(kw)
    return tm.MetricSummary(**doc)


def _parse(text):
    return [s for fam in text_string_to_metric_families(text) for s in fam.samples]


@pytest.fixture(scope="module")
def fig2_engine():
    with Engine() as engine:
        r = engine.submit(json.loads((CONFIGS / "fig2.json").read_text()))
        engine.wait(r["run_ids"])
        yield engine, r


@pytest.fixture(scope="module")
def sharing_engine():
    doc = {
        "type": "compare",
        "device_id": 1,
        "replicas": 4,
        "seed": 11,
        "base": {"kind": "inference", "model": "resnet50", "batch_size": 8, "total_requests": 1000, "warmup_s": 0},
        "axes": {"model": ["resnet18", "resnet50"], "batch_size": [8]},
    }
    with Engine() as engine:
        r = engine.submit(doc)
        engine.wait(r["run_ids"])
        yield engine, r


# -- Prometheus ---------------------------------------------------------------


def test_empty_exposition():
    assert ex.export_prometheus([], 1) == "\n"
    assert _parse(ex.export_prometheus([], 1)) == []


def test_one_summary_gives_six_lines():
    labels = {"run": "r1", "device": "0", "instance": "gi1", "profile": "1g.10gb"}
    text = ex.export_prometheus([ex.ExportRow(labels, _summary())], 1_700_000_000_000)
    samples = [line for line in text.splitlines() if line and not line.startswith("#")]
    assert len(samples) == 6
    parsed = _parse(text)
    assert {s.name for s in parsed} == SUMMARY_NAMES
    assert all(s.labels == labels for s in parsed)
    assert all(line.endswith(" 1700000000000") for line in samples)


def test_power_tail_is_its_own_family():
    labels = {"run": "r1", "device": "0", "instance": "gi1", "profile": "1g.10gb"}
    text = ex.export_prometheus([ex.ExportRow(labels, None, 108.5)], 5)
    (sample,) = _parse(text)
    assert (sample.name, sample.value) == ("migperf_power_w", 108.5)


label_text = st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), max_size=12)
finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(label_text, label_text, finite, finite)
def test_exposition_parses_back_exactly(run, instance, p99, energy):
    labels = {"run": run, "device": "1", "instance": instance, "profile": "2g.12gb"}
    summary = _summary(p99_latency_ms=p99, energy_mj=energy)
    text = ex.export_prometheus([ex.ExportRow(labels, summary, 99.0)], 123)
    parsed = {s.name: s for s in _parse(text)}
    assert parsed["migperf_latency_p99_ms"].value == p99
    assert parsed["migperf_energy_mj"].value == energy
    assert parsed["migperf_latency_p99_ms"].labels == labels
    assert parsed["migperf_power_w"].timestamp == 0.123


def test_no_duplicate_series(fig2_engine):
    engine, _ = fig2_engine
    parsed = _parse(engine.export_prometheus(timestamp_ms=1))
    keys = [(s.name, tuple(sorted(s.labels.items()))) for s in parsed]
    assert len(keys) == len(set(keys)) == 20 * 7


def test_gract_is_a_ratio_in_exposition(fig2_engine):
    engine, _ = fig2_engine
    values = [s.value for s in _parse(engine.export_prometheus(timestamp_ms=1)) if s.name == "migperf_gract_ratio"]
    assert values and all(0 < v <= 1 for v in values)


# -- CSV ----------------------------------------------------------------------


def test_summary_csv_round_trip(fig2_engine):
    engine, r = fig2_engine
    text = engine.export_csv(r["run_ids"][:1])
    assert len(text.splitlines()) == 2
    text = engine.export_csv(r["run_ids"])
    back = ex.read_summaries_csv(text)
    assert back == [engine.summary(x) for x in sorted(r["run_ids"])]
    # CRLF on import
    assert ex.read_summaries_csv(text.replace("\n", "\r\n")) == back


def test_raw_csv_row_count(fig2_engine):
    engine, r = fig2_engine
    ids = r["run_ids"][:3]
    text = engine.export_csv(ids, "raw")
    total = sum(len(engine.store.series(x, m)) for x in ids for m in (tm.LATENCY, tm.POWER, tm.GRACT, tm.FB))
    lines = text.splitlines()
    assert lines[0] == ",".join(ex.RAW_COLUMNS)
    assert len(lines) - 1 == total
    assert "\r" not in text


def test_raw_csv_is_ordered(fig2_engine):
    engine, r = fig2_engine
    rows = engine.export_csv(r["run_ids"][:2], "raw").splitlines()[1:]
    keys = [(row.split(",")[0], float(row.split(",")[3])) for row in rows]
    assert keys == sorted(keys)


def test_csv_errors(fig2_engine):
    engine, r = fig2_engine
    with pytest.raises(UnknownRun):
        engine.export_csv(["run-9999"])
    with pytest.raises(InvalidSpec):
        engine.export_csv(r["run_ids"][:1], "parquet")


def test_reexport_is_stable(fig2_engine):
    engine, r = fig2_engine
    assert engine.export_csv(r["run_ids"]) == engine.export_csv(r["run_ids"])
    assert engine.report("fig2_training_batch_sweep").to_csv() == engine.report("fig2_training_batch_sweep").to_csv()


# -- figure datasets ------------------------------------------------------------


def test_fig2_dataset_shape(fig2_engine):
    engine, _ = fig2_engine
    ds = engine.report("fig2_training_batch_sweep")
    assert ds.columns == ["profile", "batch_size", "throughput_batch_per_s", "gract_pct", "fb_mib", "energy_mj"]
    assert len(ds.rows) == 20
    assert all(set(row) == set(ds.columns) for row in ds.rows)
    assert [row["profile"] for row in ds.rows[::4]] == ["1g.10gb", "2g.20gb", "3g.40gb", "4g.40gb", "7g.80gb"]
    assert all(0 < row["gract_pct"] <= 100 for row in ds.rows)
    assert len(ds.to_csv().splitlines()) == 21


def test_missing_point_is_named(fig2_engine):
    engine, r = fig2_engine
    dropped = r["run_ids"][5]
    meta = engine.store.meta(dropped)
    with pytest.raises(IncompleteGrid) as info:
        engine.report("fig2_training_batch_sweep", run_ids=[x for x in r["run_ids"] if x != dropped])
    missing = info.value.details["missing"]
    assert missing == [{"profile": meta["profile"], "batch_size": meta["spec"]["batch_size"]}]
    assert meta["profile"] in str(info.value)


def test_unknown_figure():
    with pytest.raises(InvalidSpec):
        ex.build_figure_dataset("fig99", [])


def test_fig5_mig_beats_mps_at_batch_8(sharing_engine):
    engine, r = sharing_engine
    ds = engine.report("fig5_sharing_tail_latency", group_id=r["group_id"])
    assert len(ds.rows) == 4
    by_key = {(row["model"], row["arm"]): row for row in ds.rows}
    for model in ("resnet18", "resnet50"):
        assert by_key[model, "mig"]["p99_ms"] < by_key[model, "mps"]["p99_ms"]


def test_pooled_dataset_matches_oracle(sharing_engine):
    engine, r = sharing_engine
    ds = engine.report("fig4_sharing_avg_latency", group_id=r["group_id"])
    row = next(x for x in ds.rows if x["model"] == "resnet50" and x["arm"] == "mps")
    ids = [x for x in r["mps_runs"] if engine.store.meta(x)["spec"]["model"]["name"] == "resnet50"]
    pooled = [v for x in ids for v in engine.store.series(x, tm.LATENCY).after(engine.store.series(x, tm.LATENCY).warmup_end_ts)[1]]
    assert len(ids) == 4
    assert row["avg_ms"] == pytest.approx(sum(pooled) / len(pooled), rel=1e-12)
