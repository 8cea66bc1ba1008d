"""In-process service that backs both the CLI and the HTTP daemon.

A workdir holds everything a session produces::

    state.json             device states (bindings are process-local)
    runs/<id>.jsonl        raw series
    runs/<id>.json         run metadata
    runs/<id>.summary.json cached MetricSummary
    groups/<id>.json       sweep / comparison records

Benchmarks execute on one worker thread per device, so runs on a device
never overlap while different devices proceed in parallel.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor, wait
from pathlib import Path
from typing import Optional

from . import device_model as dm
from . import export_report as ex
from . import telemetry as tm
from .backend_sim import BACKENDS, SimBackend
from .controller import Controller, PartitionPlan
from .errors import (
    CatalogError,
    InvalidSpec,
    MigPerfError,
    RunNotComplete,
    UnknownGroup,
    UnknownRun,
)
from .workload import ComparisonSpec, RunConfig, SweepSpec, WorkloadRunner, WorkloadSpec

log = logging.getLogger(__name__)

CATALOG_ENV = "MIGPERF_CATALOG"
RUN_PREFIX = "run-"
GROUP_PREFIX = "grp-"
DONE = ("complete", "failed", "aborted")

# sweep axis -> figure column
_FIGURE_AXES = {
    "profile_name": "profile",
    "batch_size": "batch_size",
    "sequence_length": "sequence_length",
    "arrival_rate": "arrival_rate_per_s",
    "model": "model",
}


def _dump(path: Path, doc) -> None:
    tmp = path.with_name(f".{path.name}.{threading.get_ident()}.tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _next_index(names, prefix) -> int:
    found = [int(m.group(1)) for n in names if (m := re.fullmatch(re.escape(prefix) + r"(\d+)", n))]
    return max(found, default=0) + 1


def config_type(doc: dict) -> str:
    if "type" in doc:
        return doc["type"]
    if "replicas" in doc:
        return "compare"
    if "axes" in doc:
        return "sweep"
    return "run"


class Engine:
    def __init__(self, workdir=None, catalog_path=None, backend=None):
        self.workdir = Path(workdir) if workdir is not None else None
        catalog_path = catalog_path or os.environ.get(CATALOG_ENV) or None
        self.catalog = dm.load_catalog(catalog_path)
        if not self.catalog:
            raise CatalogError("catalog has no devices")
        self._persist_lock = threading.Lock()
        states = None
        if self.workdir is not None:
            self.workdir.mkdir(parents=True, exist_ok=True)
            (self.workdir / "groups").mkdir(exist_ok=True)
            states = self._load_states()
        self.controller = Controller(self.catalog, states, on_change=self._persist)
        self.store = tm.TelemetryStore(self.workdir)
        self.backend = backend or SimBackend()
        self.runner = WorkloadRunner(self.controller, self.store, self.backend)
        self._executors = {i: ThreadPoolExecutor(1, thread_name_prefix=f"device{i}") for i in range(len(self.catalog))}
        self._ids_lock = threading.Lock()
        self._futures: dict[str, Future] = {}
        self._pending: dict[str, dict] = {}
        self._groups: dict[str, dict] = self._load_groups()
        self._next_run = _next_index(self.store.run_ids(), RUN_PREFIX)
        self._next_group = _next_index(self._groups, GROUP_PREFIX)

    # -- persistence -----------------------------------------------------

    def _load_states(self):
        path = self.workdir / "state.json"
        if not path.exists():
            return None
        doc = json.loads(path.read_text())
        states = {}
        for raw in doc.get("devices", []):
            device_id = raw["device_id"]
            if device_id >= len(self.catalog) or self.catalog[device_id].model_name != raw["model_name"]:
                raise CatalogError(f"{path}: device {device_id} does not match the catalog")
            states[device_id] = dm.state_from_dict(raw, self.catalog[device_id])
        return states

    def _persist(self, controller: Controller) -> None:
        if self.workdir is None:
            return
        with self._persist_lock:
            doc = {"devices": [dm.state_to_dict(controller.state(i)) for i in range(len(self.catalog))]}
            _dump(self.workdir / "state.json", doc)

    def _load_groups(self) -> dict:
        if self.workdir is None:
            return {}
        return {p.stem: json.loads(p.read_text()) for p in sorted((self.workdir / "groups").glob("*.json"))}

    def _save_group(self, group: dict) -> None:
        self._groups[group["group_id"]] = group
        if self.workdir is not None:
            _dump(self.workdir / "groups" / f"{group['group_id']}.json", group)

    def close(self) -> None:
        for executor in self._executors.values():
            executor.shutdown(wait=True)
        self.store.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- devices ---------------------------------------------------------

    def _device(self, device_id) -> int:
        try:
            device_id = int(device_id)
        except (TypeError, ValueError):
            raise InvalidSpec(f"device id must be an integer, got {device_id!r}") from None
        self.controller.state(device_id)
        return device_id

    def list_devices(self) -> list[dict]:
        return self.controller.list_devices()

    def list_instances(self, device_id) -> list[dict]:
        return self.controller.track_instances(self._device(device_id))

    def device_state(self, device_id) -> dict:
        return dm.state_to_dict(self.controller.state(self._device(device_id)))

    def set_mig(self, device_id, enabled: bool) -> dict:
        device_id = self._device(device_id)
        if enabled:
            self.controller.enable_mig(device_id)
        else:
            self.controller.disable_mig(device_id)
        return self.device_state(device_id)

    def set_mps(self, device_id, enabled: bool) -> dict:
        device_id = self._device(device_id)
        self.controller.set_mps(device_id, enabled)
        return self.device_state(device_id)

    def create_gi(self, device_id, profile: str, start=None) -> dict:
        device_id = self._device(device_id)
        gi_id = self.controller.create_gi(device_id, profile, None if start is None else int(start))
        return next(r for r in self.controller.track_instances(device_id) if r["gi_id"] == gi_id)

    def destroy_gi(self, device_id, gi_id) -> dict:
        device_id = self._device(device_id)
        self.controller.destroy_gi(device_id, int(gi_id))
        return {"device_id": device_id, "gi_id": int(gi_id), "destroyed": True}

    def create_ci(self, device_id, gi_id, slices) -> dict:
        device_id = self._device(device_id)
        ci_id = self.controller.create_ci(device_id, int(gi_id), int(slices))
        return {"device_id": device_id, "gi_id": int(gi_id), "ci_id": ci_id, "slices": int(slices)}

    def destroy_ci(self, device_id, gi_id, ci_id) -> dict:
        device_id = self._device(device_id)
        self.controller.destroy_ci(device_id, int(gi_id), int(ci_id))
        return {"device_id": device_id, "gi_id": int(gi_id), "ci_id": int(ci_id), "destroyed": True}

    def apply_plan(self, device_id, target, strategy: str = "strict") -> dict:
        device_id = self._device(device_id)
        if isinstance(target, str):
            target = [t.strip() for t in target.split(",") if t.strip()]
        if not isinstance(target, list) or not all(isinstance(t, str) for t in target):
            raise InvalidSpec("target must be a list of profile names")
        script = self.controller.apply_plan(PartitionPlan(device_id, tuple(target), strategy))
        return script.to_dict()

    def validate(self, device_id, target) -> dict:
        device_id = self._device(device_id)
        if isinstance(target, str):
            target = [t.strip() for t in target.split(",") if t.strip()]
        entry = self.controller.state(device_id).catalog_entry
        return dm.validate_config(entry, target).to_dict()

    # -- benchmarks ------------------------------------------------------

    def _allocate(self, n: int) -> list[str]:
        with self._ids_lock:
            ids = [f"{RUN_PREFIX}{self._next_run + i:04d}" for i in range(n)]
            self._next_run += n
            return ids

    def _allocate_group(self) -> str:
        with self._ids_lock:
            gid = f"{GROUP_PREFIX}{self._next_group:04d}"
            self._next_group += 1
            return gid

    def _backend_for(self, doc: dict):
        raw = doc.get("backend")
        if raw is None:
            return None
        if isinstance(raw, str):
            raw = {"name": raw}
        name = raw.get("name", "sim")
        if name not in BACKENDS:
            raise InvalidSpec(f"unknown backend {name!r}; known: {', '.join(BACKENDS)}")
        if name == "sim":
            return SimBackend(raw.get("params"))
        if "path" not in raw:
            raise InvalidSpec("external backend needs a 'path'")
        return BACKENDS[name](raw["path"])

    def _runner_for(self, backend) -> WorkloadRunner:
        if backend is None:
            return self.runner
        return WorkloadRunner(self.controller, self.store, backend, self.runner.models)

    def submit(self, doc: dict, kind: Optional[str] = None, expect_type: Optional[str] = None) -> dict:
        """Validate a benchmark config and queue it; returns its run ids at once."""
        if not isinstance(doc, dict):
            raise InvalidSpec("benchmark config must be a JSON object")
        doc = dict(doc)
        ctype = config_type(doc)
        if expect_type is not None and ctype != expect_type:
            raise InvalidSpec(f"config type is {ctype}, expected {expect_type}")
        doc.pop("type", None)
        runner = self._runner_for(self._backend_for(doc))
        doc.pop("backend", None)
        if ctype == "run":
            return self._submit_run(doc, kind, runner)
        if ctype == "sweep":
            return self._submit_sweep(doc, kind, runner)
        if ctype == "compare":
            return self._submit_compare(doc, kind, runner)
        raise InvalidSpec(f"unknown benchmark type {ctype!r}; expected run, sweep or compare")

    def _check_kind(self, spec: WorkloadSpec, kind: Optional[str]) -> None:
        if kind is not None and spec.kind != kind:
            raise InvalidSpec(f"config workload kind is {spec.kind}, expected {kind}")

    def _submit_run(self, doc, kind, runner) -> dict:
        extra = set(doc) - {"device_id", "target", "seed", "workload"}
        if extra:
            raise InvalidSpec(f"unknown run fields: {', '.join(sorted(extra))}")
        if "workload" not in doc:
            raise InvalidSpec("run config needs a 'workload'")
        spec = WorkloadSpec.from_dict(doc["workload"], runner.models)
        self._check_kind(spec, kind)
        device_id = self._device(doc.get("device_id", 0))
        target = doc.get("target", "exclusive")
        if isinstance(target, dict):
            if set(target) != {"gi_id"}:
                raise InvalidSpec("target object must be {\"gi_id\": N}")
            target = {"gi_id": int(target["gi_id"])}
            self.controller.state(device_id).instance(target["gi_id"])
        elif target not in ("mps_shared", "exclusive"):
            raise InvalidSpec(f"unknown target {target!r}")
        seed = int(doc.get("seed", 0))
        (run_id,) = self._allocate(1)
        cfg = RunConfig(run_id, device_id, target, spec, seed)
        record = runner.prepare(cfg)

        def job():
            try:
                runner.execute(cfg, record)
            finally:
                self._finish([run_id])

        self._launch(device_id, [run_id], job)
        return {"run_ids": [run_id], "group_id": None}

    def _submit_sweep(self, doc, kind, runner) -> dict:
        sweep = SweepSpec.from_dict(doc, runner.models)
        self._check_kind(sweep.base, kind)
        self._device(sweep.device_id)
        planned = runner.check_sweep(sweep)
        run_ids = self._allocate(len(planned))
        group_id = self._allocate_group()
        group = {
            "group_id": group_id,
            "type": "sweep",
            "name": sweep.name,
            "device_id": sweep.device_id,
            "axes": sweep.axes(),
            "points": [p for p, _ in planned],
            "run_ids": run_ids,
            "status": "pending",
            "error": None,
        }
        self._save_group(group)

        def job():
            self._set_group(group, "running")
            try:
                for i, ((point, spec), run_id) in enumerate(zip(planned, run_ids)):
                    try:
                        runner.run_sweep_point(sweep, point, spec, run_id, group_id=group_id)
                    except MigPerfError as exc:
                        self._abort(run_ids[i + 1 :], group_id, exc)
                        self._set_group(group, "failed", exc.message)
                        raise
                    finally:
                        self._finish([run_id])
                self._set_group(group, "complete")
            finally:
                self._finish(run_ids)

        self._launch(sweep.device_id, run_ids, job)
        return {"run_ids": run_ids, "group_id": group_id}

    def _submit_compare(self, doc, kind, runner) -> dict:
        cmp = ComparisonSpec.from_dict(doc, runner.models)
        self._check_kind(cmp.base, kind)
        self._device(cmp.device_id)
        runner.check_comparison(cmp)
        points = cmp.points()
        k = cmp.replicas
        run_ids = self._allocate(2 * k * len(points))
        group_id = self._allocate_group()
        layout = []
        for j, point in enumerate(points):
            base = 2 * k * j
            layout.append((point, run_ids[base : base + k], run_ids[base + k : base + 2 * k]))
        group = {
            "group_id": group_id,
            "type": "compare",
            "name": cmp.name,
            "device_id": cmp.device_id,
            "replicas": k,
            "axes": cmp.axes(),
            "points": points,
            "run_ids": run_ids,
            "mig_runs": [r for _, mig, _ in layout for r in mig],
            "mps_runs": [r for _, _, mps in layout for r in mps],
            "status": "pending",
            "error": None,
        }
        self._save_group(group)

        def job():
            self._set_group(group, "running")
            done: list[str] = []
            try:
                for point, mig_ids, mps_ids in layout:
                    for arm, ids in (("mig", mig_ids), ("mps", mps_ids)):
                        try:
                            runner.run_comparison_arm(cmp, arm, point, ids, group_id=group_id)
                        except MigPerfError as exc:
                            self._abort([r for r in run_ids if r not in done and not self._has_meta(r)], group_id, exc)
                            self._set_group(group, "failed", exc.message)
                            raise
                        finally:
                            done.extend(ids)
                            self._finish(ids)
                self._set_group(group, "complete")
            finally:
                self._finish(run_ids)

        self._launch(cmp.device_id, run_ids, job)
        return {"run_ids": run_ids, "group_id": group_id, "mig_runs": group["mig_runs"], "mps_runs": group["mps_runs"]}

    def run_sharing_comparison(self, device_id, spec: WorkloadSpec, k: int, seed: int = 0) -> dict:
        """Paired MIG / MPS runs of ``spec`` with ``k`` replicas; blocks until done."""
        doc = {"type": "compare", "device_id": device_id, "replicas": k, "seed": seed, "base": spec.to_dict()}
        result = self.submit(doc)
        self.wait(result["run_ids"])
        return {"mig_runs": result["mig_runs"], "mps_runs": result["mps_runs"]}

    def _has_meta(self, run_id: str) -> bool:
        try:
            return bool(self.store.meta(run_id))
        except UnknownRun:
            return False

    def _abort(self, run_ids, group_id, exc: MigPerfError) -> None:
        for run_id in run_ids:
            self.store.write_meta(
                run_id,
                {"run_id": run_id, "group_id": group_id, "status": "aborted", "error": f"not run: {exc.message}"},
            )

    def _set_group(self, group: dict, status: str, error: Optional[str] = None) -> None:
        group["status"] = status
        if error is not None:
            group["error"] = error
        self._save_group(group)

    def _launch(self, device_id: int, run_ids: list[str], job) -> None:
        with self._ids_lock:
            for run_id in run_ids:
                self._pending[run_id] = {"run_id": run_id, "status": "pending"}
        future = self._executors[device_id].submit(self._guard(job))
        for run_id in run_ids:
            self._futures[run_id] = future

    def _guard(self, job):
        def run():
            try:
                job()
            except MigPerfError as exc:
                log.warning("benchmark failed: %s", exc.message)
            except Exception:
                log.exception("benchmark crashed")
                raise

        return run

    def _finish(self, run_ids) -> None:
        for run_id in run_ids:
            meta = self._meta_or_none(run_id)
            if meta and meta.get("status") == "complete" and not self._summary_path(run_id, exists=True):
                try:
                    self.summary(run_id)
                except MigPerfError as exc:
                    log.warning("run %s: no summary (%s)", run_id, exc.message)
            with self._ids_lock:
                if meta and meta.get("status") in DONE:
                    self._pending.pop(run_id, None)

    def wait(self, run_ids=None, timeout: Optional[float] = None) -> None:
        futures = {self._futures[r] for r in (run_ids or list(self._futures)) if r in self._futures}
        wait(futures, timeout=timeout)

    # -- results ---------------------------------------------------------

    def _meta_or_none(self, run_id: str):
        try:
            return self.store.meta(run_id)
        except UnknownRun:
            return None

    def _summary_path(self, run_id: str, exists: bool = False):
        if self.workdir is None:
            return None
        path = self.workdir / "runs" / f"{run_id}.summary.json"
        if exists:
            return path if path.exists() else None
        return path

    def run_status(self, run_id: str) -> dict:
        meta = self._meta_or_none(run_id)
        if meta is None:
            with self._ids_lock:
                pending = self._pending.get(run_id)
            if pending is None:
                raise UnknownRun(f"unknown run {run_id}", run_id=run_id)
            meta = dict(pending)
        out = {
            "run_id": run_id,
            "status": meta.get("status", "pending"),
            "error": meta.get("error"),
            "group_id": meta.get("group_id"),
            "device_id": meta.get("device_id"),
            "instance": meta.get("instance"),
            "profile": meta.get("profile"),
            "arm": meta.get("arm"),
            "summary": None,
        }
        if out["status"] == "complete":
            try:
                out["summary"] = self.summary(run_id).to_dict()
            except MigPerfError as exc:
                out["error"] = f"summary unavailable: {exc.message}"
        return out

    def summary(self, run_id: str) -> tm.MetricSummary:
        meta = self.store.meta(run_id)
        if meta.get("status") != "complete":
            raise RunNotComplete(f"run {run_id} is {meta.get('status', 'pending')}", run_id=run_id)
        path = self._summary_path(run_id, exists=True)
        if path is not None:
            return tm.MetricSummary.from_dict(json.loads(path.read_text()))
        summary = tm.summarize(self.store, run_id)
        path = self._summary_path(run_id)
        if path is not None:
            _dump(path, summary.to_dict())
        return summary

    def group(self, group_id: str) -> dict:
        try:
            return dict(self._groups[group_id])
        except KeyError:
            raise UnknownGroup(f"unknown group {group_id}", group_id=group_id) from None

    def groups(self) -> list[dict]:
        return [dict(g) for _, g in sorted(self._groups.items())]

    def complete_runs(self) -> list[str]:
        return [r for r in self.store.run_ids() if self.store.meta(r).get("status") == "complete"]

    def _resolve_runs(self, run_ids) -> list[str]:
        if isinstance(run_ids, str):
            run_ids = [r for r in run_ids.split(",") if r]
        if not run_ids:
            return self.complete_runs()
        for run_id in run_ids:
            self.store.meta(run_id)
        return sorted(set(run_ids))

    def export_csv(self, run_ids=None, kind: str = "summaries") -> str:
        run_ids = self._resolve_runs(run_ids)
        if kind == "summaries":
            return ex.summaries_csv((self.store.meta(r), self.summary(r)) for r in run_ids)
        if kind == "raw":
            return ex.raw_csv(self.store.samples(run_ids))
        raise InvalidSpec(f"unknown CSV kind {kind!r}; expected summaries or raw")

    def export_prometheus(self, timestamp_ms: Optional[int] = None, run_ids=None) -> str:
        """Gauges for complete runs, stamped with the snapshot instant."""
        if timestamp_ms is None:
            timestamp_ms = int(time.time() * 1000)
        rows = []
        wanted = self._resolve_runs(run_ids)
        for run_id in wanted:
            if self.store.meta(run_id).get("status") != "complete":
                continue
            meta = self.store.meta(run_id)
            try:
                summary = self.summary(run_id)
            except MigPerfError:
                summary = None
            try:
                power = self.store.series(run_id, tm.POWER)
                tail = power.values[-1] if power.values else None
            except MigPerfError:
                tail = None
            labels = {
                "run": run_id,
                "device": str(meta.get("device_id", "")),
                "instance": meta.get("instance") or "",
                "profile": meta.get("profile") or "",
            }
            rows.append(ex.ExportRow(labels, summary, tail))
        return ex.export_prometheus(rows, timestamp_ms)

    def report(self, figure_id: str, run_ids=None, group_id: Optional[str] = None) -> ex.FigureDataset:
        """Figure dataset from explicit runs, a group, or the newest matching group."""
        if figure_id not in ex.FIGURES:
            raise InvalidSpec(f"unknown figure {figure_id!r}; known: {', '.join(ex.FIGURES)}")
        fig = ex.FIGURES[figure_id]
        expected = None
        if run_ids:
            runs = self._resolve_runs(run_ids)
        else:
            group = self.group(group_id) if group_id else self._latest_group(figure_id)
            runs = list(group["run_ids"])
            expected = {}
            for axis, values in group.get("axes", {}).items():
                column = _FIGURE_AXES.get(axis)
                if column == "model" and "model_size" in fig.keys:
                    column = "model_size"
                if column in fig.keys:
                    expected[column] = list(values)
            if "arm" in fig.keys:
                expected["arm"] = [fig.arm] if fig.arm else ["mig", "mps"]
        views = []
        for run_id in runs:
            meta = self.store.meta(run_id)
            if meta.get("status") != "complete":
                continue
            lat = self.store.series(run_id, tm.LATENCY)
            _, values = lat.after(lat.warmup_end_ts)
            views.append(ex.RunView(meta, self.summary(run_id), list(values)))
        return ex.build_figure_dataset(figure_id, views, expected)

    def _latest_group(self, figure_id: str) -> dict:
        fig = ex.FIGURES[figure_id]
        wanted = "compare" if fig.pooled else "sweep"
        for gid in sorted(self._groups, reverse=True):
            group = self._groups[gid]
            if group.get("type") == wanted and all(a in group.get("axes", {}) for a in fig.axes):
                return group
        raise UnknownGroup(
            f"no {wanted} over {', '.join(fig.axes)} to build {figure_id} from; run one first or pass --group/--runs"
        )
