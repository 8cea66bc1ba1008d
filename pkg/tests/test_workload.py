import pytest
from hypothesis import given
from hypothesis import strategies as st

from migperf import telemetry as tm
from migperf.engine import Engine
from migperf.errors import BindFailed, InvalidSpec, MigPerfError, NoEqualSplit
from migperf.workload import MODELS, ComparisonSpec, RunConfig, SweepSpec, WorkloadSpec

A100_PROFILES = ["1g.10gb", "2g.20gb", "3g.40gb", "4g.40gb", "7g.80gb"]


def workload(**kw):
    doc = {"kind": "inference", "model": "resnet50", "batch_size": 4, "total_requests": 100}
    doc.update(kw)
    return doc


@pytest.fixture
def engine():
    with Engine() as e:
        yield e


def _run(engine, device_id=0, target="exclusive", seed=0, **kw):
    r = engine.submit({"type": "run", "device_id": device_id, "target": target, "seed": seed, "workload": workload(**kw)})
    engine.wait(r["run_ids"])
    return r["run_ids"][0]


@pytest.mark.parametrize(
    "changes",
    [
        {"batch_size": 0},
        {"total_requests": None},
        {"duration_s": 10.0},
        {"loop": "open"},
        {"loop": "open", "arrival_rate": 0.0},
        {"arrival_rate": 10.0},
        {"kind": "serving"},
        {"concurrency": 0},
        {"sequence_length": 0},
        {"model": "gpt-9"},
        {"colour": "red"},
    ],
)
def test_spec_validation(changes):
    with pytest.raises(InvalidSpec):
        WorkloadSpec.from_dict(workload(**changes))


def test_spec_round_trip():
    spec = WorkloadSpec.from_dict(workload(sequence_length=256, model="bert-base"))
    assert WorkloadSpec.from_dict(spec.to_dict()) == spec
    assert spec.sequence_scale == 2.0
    assert spec.fb_mib == 0.5 * 1024 + 4 * 48 * 2.0


def test_vision_models_ignore_sequence_length():
    spec = WorkloadSpec.from_dict(workload(sequence_length=512))
    assert spec.sequence_scale == 1.0


def test_closed_loop_records_every_request(engine):
    run_id = _run(engine, total_requests=100, warmup_s=0, warmup_batches=0)
    meta = engine.store.meta(run_id)
    lat = engine.store.series(run_id, tm.LATENCY)
    assert meta["status"] == "complete"
    assert len(lat) == meta["issued"] == meta["served"] == 100


def test_open_loop_is_reproducible(engine):
    kw = dict(total_requests=None, duration_s=10.0, loop="open", arrival_rate=25.0)
    a = _run(engine, seed=42, **kw)
    b = _run(engine, seed=42, **kw)
    sa, sb = engine.store.series(a, tm.LATENCY), engine.store.series(b, tm.LATENCY)
    assert sa.points() == sb.points()
    assert engine.store.meta(a)["issued"] == len(sa)


def test_training_throughput_matches_step_count(engine):
    run_id = _run(
        engine,
        kind="training",
        model="bert-base",
        batch_size=32,
        total_requests=None,
        duration_s=60.0,
        warmup_s=0,
        warmup_batches=0,
    )
    steps = len(engine.store.series(run_id, tm.LATENCY))
    summary = engine.summary(run_id)
    assert abs(summary.throughput_batch_per_s * 60 - steps) <= 1
    assert summary.throughput_samples_per_s == summary.throughput_batch_per_s * 32


def test_gi_target_binds_for_the_run(engine):
    engine.apply_plan(0, ["3g.40gb"])
    gi = engine.list_instances(0)[0]["gi_id"]
    run_id = _run(engine, target={"gi_id": gi})
    meta = engine.store.meta(run_id)
    assert (meta["instance"], meta["profile"], meta["arm"]) == (f"gi{gi}", "3g.40gb", "mig")
    # released once complete
    assert engine.controller.bindings(0) == {}


def test_unknown_gi_target_rejected(engine):
    engine.set_mig(0, True)
    with pytest.raises(MigPerfError):
        engine.submit({"type": "run", "device_id": 0, "target": {"gi_id": 99}, "workload": workload()})


def test_mps_target_requires_mps_mode(engine):
    runner = engine.runner
    spec = WorkloadSpec.from_dict(workload())
    with pytest.raises(BindFailed):
        runner.execute(RunConfig("r1", 0, "mps_shared", spec))
    assert engine.store.meta("r1")["status"] == "failed"


def test_memory_over_capacity_fails_run(engine):
    engine.apply_plan(1, ["1g.6gb"])
    gi = engine.list_instances(1)[0]["gi_id"]
    spec = WorkloadSpec.from_dict(workload(model="bert-large", batch_size=64))
    with pytest.raises(InvalidSpec, match="MiB"):
        engine.runner.execute(RunConfig("big", 1, {"gi_id": gi}, spec))
    assert engine.controller.bindings(1) == {}


def test_sweep_grid_shape():
    base = WorkloadSpec.from_dict(workload(kind="training", model="bert-base"))
    sweep = SweepSpec(0, base, profile_name=tuple(A100_PROFILES), batch_size=(8, 16, 32, 64))
    points = sweep.points()
    assert len(points) == 20
    assert [p["profile_name"] for p in points[:4]] == ["1g.10gb"] * 4
    assert SweepSpec(0, base, profile_name=("1g.10gb",), batch_size=(8,)).points() == [{"batch_size": 8, "profile_name": "1g.10gb"}]


def test_sweep_runs_every_point(engine):
    doc = {
        "type": "sweep",
        "device_id": 0,
        "base": workload(total_requests=50, warmup_s=0),
        "axes": {"profile_name": ["1g.10gb", "7g.80gb"], "batch_size": [1, 2]},
    }
    r = engine.submit(doc)
    engine.wait(r["run_ids"])
    group = engine.group(r["group_id"])
    assert group["status"] == "complete" and len(r["run_ids"]) == 4
    profiles = [engine.store.meta(x)["profile"] for x in r["run_ids"]]
    assert profiles == ["1g.10gb", "1g.10gb", "7g.80gb", "7g.80gb"]


def test_infeasible_sweep_rejected_before_running(engine):
    doc = {
        "type": "sweep",
        "device_id": 1,
        "base": workload(),
        "axes": {"profile_name": ["1g.6gb", "3g.40gb"]},
    }
    with pytest.raises(InvalidSpec):
        engine.submit(doc)
    assert engine.store.run_ids() == []


def test_sweep_failure_names_the_point(engine):
    # the second point's run fails; the rest of the sweep is aborted
    doc = {
        "type": "sweep",
        "device_id": 0,
        "base": workload(total_requests=20, warmup_s=0),
        "axes": {"profile_name": ["1g.10gb"], "batch_size": [1, 2, 3]},
    }
    calls = {"n": 0}
    original = engine.runner.execute

    def flaky(cfg, record=None):
        calls["n"] += 1
        if calls["n"] == 2:
            raise InvalidSpec("synthetic failure")
        return original(cfg, record)

    engine.runner.execute = flaky
    r = engine.submit(doc)
    engine.wait(r["run_ids"])
    group = engine.group(r["group_id"])
    assert group["status"] == "failed"
    assert "batch_size" in group["error"] and "synthetic failure" in group["error"]
    statuses = [engine.run_status(x)["status"] for x in r["run_ids"]]
    assert statuses[0] == "complete" and statuses[2] == "aborted"


def test_comparison_a30_four_way(engine):
    spec = WorkloadSpec.from_dict(workload(total_requests=200, warmup_s=0))
    out = engine.run_sharing_comparison(1, spec, 4, seed=5)
    assert len(out["mig_runs"]) == len(out["mps_runs"]) == 4
    mig = [engine.store.meta(r) for r in out["mig_runs"]]
    mps = [engine.store.meta(r) for r in out["mps_runs"]]
    assert {m["profile"] for m in mig} == {"1g.6gb"}
    assert len({m["instance"] for m in mig}) == 4
    assert {m["instance"] for m in mps} == {"device"} and {m["arm"] for m in mps} == {"mps"}
    assert [m["seed"] for m in mig] == [m["seed"] for m in mps] == [5, 6, 7, 8]


def test_comparison_without_equal_split(engine):
    spec = WorkloadSpec.from_dict(workload())
    with pytest.raises(NoEqualSplit):
        engine.run_sharing_comparison(1, spec, 3)


def test_single_replica_arms_match(engine):
    spec = WorkloadSpec.from_dict(workload(total_requests=2000, warmup_s=0, batch_size=8))
    out = engine.run_sharing_comparison(0, spec, 1, seed=1)
    mig = engine.summary(out["mig_runs"][0])
    mps = engine.summary(out["mps_runs"][0])
    # same seed, same slices, no co-tenant: identical draws
    assert mig.avg_latency_ms == mps.avg_latency_ms
    assert mig.p99_latency_ms == mps.p99_latency_ms


def test_comparison_spec_points():
    base = WorkloadSpec.from_dict(workload())
    cmp = ComparisonSpec(1, base, 4, model=("resnet18", "resnet50"), batch_size=(1, 8))
    assert len(cmp.points()) == 4
    spec = cmp.spec_at({"model": "resnet18", "batch_size": 8})
    assert spec.model == MODELS["resnet18"] and spec.concurrency == 4


@given(st.integers(1, 64), st.sampled_from(sorted(MODELS)), st.one_of(st.none(), st.integers(1, 1024)))
def test_memory_footprint_is_positive_and_monotone(batch, model, seq):
    spec = WorkloadSpec.from_dict(workload(model=model, batch_size=batch, sequence_length=seq))
    bigger = WorkloadSpec.from_dict(workload(model=model, batch_size=batch + 1, sequence_length=seq))
    assert 0 < spec.fb_mib < bigger.fb_mib
