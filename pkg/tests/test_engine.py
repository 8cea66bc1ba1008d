import json
import threading

import pytest

from migperf.engine import Engine
from migperf.errors import (
    CatalogError,
    InvalidSpec,
    RunNotComplete,
    UnknownDevice,
    UnknownGroup,
    UnknownRun,
)


def _run_doc(**kw):
    workload = {"kind": "inference", "model": "resnet50", "batch_size": 4, "total_requests": 200, "warmup_s": 0}
    workload.update(kw)
    return {"type": "run", "device_id": 1, "target": "exclusive", "seed": 3, "workload": workload}


def test_partition_state_survives_restart(tmp_path):
    with Engine(tmp_path) as a:
        a.apply_plan(0, ["3g.40gb", "2g.20gb"])
        before = a.list_instances(0)
    with Engine(tmp_path) as b:
        assert b.list_instances(0) == before
        assert b.device_state(0)["mig_enabled"] is True
        # ids keep counting from where the previous process stopped
        created = b.create_gi(0, "1g.10gb")
        assert created["gi_id"] == max(i["gi_id"] for i in before) + 1


def test_state_file_holds_devices_only(tmp_path):
    with Engine(tmp_path) as e:
        e.set_mig(1, True)
    doc = json.loads((tmp_path / "state.json").read_text())
    assert set(doc) == {"devices"}
    assert [d["device_id"] for d in doc["devices"]] == [0, 1]


def test_state_from_other_catalog_rejected(tmp_path):
    with Engine(tmp_path) as e:
        e.set_mig(0, True)
    doc = json.loads((tmp_path / "state.json").read_text())
    doc["devices"][0]["model_name"] = "H100"
    (tmp_path / "state.json").write_text(json.dumps(doc))
    with pytest.raises(CatalogError):
        Engine(tmp_path)


def test_run_ids_continue_across_sessions(tmp_path):
    with Engine(tmp_path) as a:
        first = a.submit(_run_doc())["run_ids"]
        a.wait(first)
    with Engine(tmp_path) as b:
        second = b.submit(_run_doc())["run_ids"]
        b.wait(second)
        assert first == ["run-0001"] and second == ["run-0002"]
        assert b.complete_runs() == ["run-0001", "run-0002"]


def test_summary_cache_matches_recompute(tmp_path):
    with Engine(tmp_path) as e:
        (run_id,) = e.submit(_run_doc())["run_ids"]
        e.wait([run_id])
        cached_path = tmp_path / "runs" / f"{run_id}.summary.json"
        assert cached_path.exists()
        cached = cached_path.read_bytes()
        cached_path.unlink()
        assert e.summary(run_id) == Engine(tmp_path).summary(run_id)
        assert cached_path.read_bytes() == cached


def test_status_of_finished_run():
    with Engine() as e:
        (run_id,) = e.submit(_run_doc())["run_ids"]
        e.wait([run_id])
        status = e.run_status(run_id)
        assert status["status"] == "complete" and status["error"] is None
        # the first ten batches are warm-up
        assert status["summary"]["requests"] == 190
        assert (status["instance"], status["arm"]) == ("device", "exclusive")


def test_unknown_ids():
    with Engine() as e:
        with pytest.raises(UnknownRun):
            e.run_status("run-0042")
        with pytest.raises(UnknownGroup):
            e.group("grp-0001")
        with pytest.raises(UnknownDevice):
            e.list_instances(7)
        with pytest.raises(InvalidSpec):
            e.list_instances("zero")


def test_failed_run_has_no_summary():
    with Engine() as e:
        doc = _run_doc()
        doc["target"] = "mps_shared"
        (run_id,) = e.submit(doc)["run_ids"]
        e.wait([run_id])
        status = e.run_status(run_id)
        assert status["status"] == "failed" and "MPS" in status["error"]
        assert status["summary"] is None
        with pytest.raises(RunNotComplete):
            e.summary(run_id)
        assert e.complete_runs() == []


def test_summary_of_running_run_refused():
    gate = threading.Event()
    with Engine() as e:
        original = e.runner.execute

        def slow(cfg, record=None):
            gate.wait(10)
            return original(cfg, record)

        e.runner.execute = slow
        (run_id,) = e.submit(_run_doc())["run_ids"]
        assert e.run_status(run_id)["status"] in ("pending", "running")
        with pytest.raises((RunNotComplete, UnknownRun)):
            e.summary(run_id)
        gate.set()
        e.wait([run_id])
        assert e.run_status(run_id)["status"] == "complete"


def test_runs_on_different_devices_proceed_in_parallel():
    gate = threading.Event()
    with Engine() as e:
        original = e.runner.execute

        def blocked(cfg, record=None):
            if cfg.device_id == 0:
                gate.wait(10)
            return original(cfg, record)

        e.runner.execute = blocked
        doc0 = _run_doc()
        doc0["device_id"] = 0
        (slow,) = e.submit(doc0)["run_ids"]
        (fast,) = e.submit(_run_doc())["run_ids"]
        e.wait([fast], timeout=10)
        assert e.run_status(fast)["status"] == "complete"
        assert e.run_status(slow)["status"] != "complete"
        gate.set()
        e.wait([slow])


def test_submit_type_checks():
    with Engine() as e:
        with pytest.raises(InvalidSpec, match="expected"):
            e.submit(_run_doc(), kind="training")
        with pytest.raises(InvalidSpec):
            e.submit(_run_doc(), expect_type="sweep")
        with pytest.raises(InvalidSpec):
            e.submit({"type": "party"})
        assert e.store.run_ids() == []


def test_groups_are_persisted(tmp_path):
    doc = {
        "type": "sweep",
        "device_id": 0,
        "seed": 1,
        "base": {"kind": "inference", "model": "resnet18", "batch_size": 1, "total_requests": 100, "warmup_s": 0},
        "axes": {"profile_name": ["1g.10gb", "2g.20gb"]},
    }
    with Engine(tmp_path) as a:
        r = a.submit(doc)
        a.wait(r["run_ids"])
        group = a.group(r["group_id"])
    assert r["group_id"] == "grp-0001"
    with Engine(tmp_path) as b:
        assert b.group("grp-0001") == group
        assert b.groups() == [group]
        assert b.submit(doc)["group_id"] == "grp-0002"
