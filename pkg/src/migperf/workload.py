"""Workload descriptions and the runner that drives them against partitions.

A run is bound to one GPU instance (or the whole device in MPS/exclusive
mode), executed by a backend, and its samples are appended to telemetry.
Sweeps and MIG-vs-MPS comparisons are sequences of such runs, executed one
at a time per device so their telemetry never overlaps.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from typing import Optional, Union

from . import device_model as dm
from . import telemetry as tm
from .controller import Controller, PartitionPlan
from .errors import (
    AlreadyBound,
    BindFailed,
    InvalidSpec,
    MigPerfError,
    NoEqualSplit,
    NotFound,
    UnknownProfile,
)

log = logging.getLogger(__name__)

KINDS = ("training", "inference")
LOOPS = ("closed", "open")
REFERENCE_SEQUENCE_LENGTH = 128


@dataclass(frozen=True)
class ModelSpec:
    name: str
    flops_per_sample: float
    params_mem_gib: float
    activation_mem_per_sample_mib: float
    text: bool = False

    def __post_init__(self):
        for name in ("flops_per_sample", "params_mem_gib", "activation_mem_per_sample_mib"):
            if not getattr(self, name) > 0:
                raise InvalidSpec(f"model {self.name}: {name} must be positive")


def load_models(path=None) -> dict[str, ModelSpec]:
    if path is None:
        text = (resources.files("migperf") / "data" / "models.json").read_text()
    else:
        text = open(path).read()
    return {m["name"]: ModelSpec(**m) for m in json.loads(text)["models"]}


MODELS = load_models()


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str
    model: ModelSpec
    batch_size: int
    sequence_length: Optional[int] = None
    duration_s: Optional[float] = None
    total_requests: Optional[int] = None
    loop: str = "closed"
    arrival_rate: Optional[float] = None
    concurrency: int = 1
    warmup_s: float = 5.0
    warmup_batches: int = 10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.loop not in LOOPS:
            raise InvalidSpec(f"loop must be one of {LOOPS}, got {self.loop!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise InvalidSpec(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if (self.duration_s is None) == (self.total_requests is None):
            raise InvalidSpec("exactly one of duration_s and total_requests must be set")
        if self.duration_s is not None and not self.duration_s > 0:
            raise InvalidSpec("duration_s must be positive")
        if self.total_requests is not None and (not isinstance(self.total_requests, int) or self.total_requests < 1):
            raise InvalidSpec("total_requests must be a positive integer")
        if self.loop == "open" and not (self.arrival_rate is not None and self.arrival_rate > 0):
            raise InvalidSpec("open loop requires arrival_rate > 0")
        if self.loop == "closed" and self.arrival_rate is not None:
            raise InvalidSpec("arrival_rate only applies to open loop")
        if self.sequence_length is not None and self.sequence_length < 1:
            raise InvalidSpec("sequence_length must be positive")
        if not isinstance(self.concurrency, int) or self.concurrency < 1:
            raise InvalidSpec("concurrency must be a positive integer")
        if self.warmup_s < 0 or self.warmup_batches < 0:
            raise InvalidSpec("warm-up settings must be non-negative")

    @property
    def sequence_scale(self) -> float:
        if not self.model.text:
            return 1.0
        return (self.sequence_length or REFERENCE_SEQUENCE_LENGTH) / REFERENCE_SEQUENCE_LENGTH

    @property
    def work_per_batch(self) -> float:
        """Batch size in reference-model samples at the reference sequence length."""
        return self.batch_size * self.model.flops_per_sample * self.sequence_scale

    @property
    def fb_mib(self) -> float:
        m = self.model
        return m.params_mem_gib * 1024 + self.batch_size * m.activation_mem_per_sample_mib * self.sequence_scale

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"] = asdict(self.model)
        return out

    @classmethod
    def from_dict(cls, doc: dict, models: Optional[dict] = None) -> "WorkloadSpec":
        if not isinstance(doc, dict):
            raise InvalidSpec("workload spec must be an object")
        models = MODELS if models is None else models
        doc = dict(doc)
        model = doc.get("model")
        if isinstance(model, str):
            if model not in models:
                raise InvalidSpec(f"unknown model {model!r}; known: {', '.join(sorted(models))}")
            doc["model"] = models[model]
        elif isinstance(model, dict):
            try:
                doc["model"] = ModelSpec(**model)
            except TypeError as exc:
                raise InvalidSpec(f"bad model description: {exc}") from None
        else:
            raise InvalidSpec("workload spec needs a model name or model description")
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidSpec(f"unknown workload fields: {', '.join(sorted(unknown))}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from None


Target = Union[dict, str]


@dataclass(frozen=True)
class RunConfig:
    run_id: str
    device_id: int
    # {"gi_id": n} | "mps_shared" | "exclusive"
    target: Target
    spec: WorkloadSpec
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "device_id": self.device_id,
            "target": self.target,
            "spec": self.spec.to_dict(),
            "seed": self.seed,
        }


SWEEP_AXES = ("profile_name", "batch_size", "sequence_length", "arrival_rate")


@dataclass(frozen=True)
class SweepSpec:
    device_id: int
    base: WorkloadSpec
    profile_name: tuple = ()
    batch_size: tuple = ()
    sequence_length: tuple = ()
    arrival_rate: tuple = ()
    seed: int = 0
    name: str = "sweep"

    def points(self) -> list[dict]:
        """Cartesian grid, profile outermost; empty axes keep the base value."""
        axes = [(a, getattr(self, a)) for a in SWEEP_AXES[1:] if getattr(self, a)]
        profiles = self.profile_name or (None,)
        grid = []
        for profile in profiles:
            for combo in itertools.product(*(values for _, values in axes)):
                point = dict(zip((a for a, _ in axes), combo))
                point["profile_name"] = profile
                grid.append(point)
        return grid

    def spec_at(self, point: dict) -> WorkloadSpec:
        changes = {k: v for k, v in point.items() if k != "profile_name"}
        if "arrival_rate" in changes and self.base.loop == "closed":
            changes["loop"] = "open"
        try:
            return replace(self.base, **changes)
        except MigPerfError as exc:
            raise InvalidSpec(f"sweep point {point}: {exc.message}", point=point) from None

    def axes(self) -> dict:
        return {a: list(getattr(self, a)) for a in SWEEP_AXES if getattr(self, a)}

    @classmethod
    def from_dict(cls, doc: dict, models=None) -> "SweepSpec":
        doc = dict(doc)
        if "base" not in doc:
            raise InvalidSpec("sweep needs a 'base' workload")
        base = WorkloadSpec.from_dict(doc.pop("base"), models)
        axes = doc.pop("axes", {})
        unknown = set(axes) - set(SWEEP_AXES)
        if unknown:
            raise InvalidSpec(f"unknown sweep axes: {', '.join(sorted(unknown))}")
        kwargs = {a: tuple(axes.get(a, ())) for a in SWEEP_AXES}
        extra = set(doc) - {"device_id", "seed", "name"}
        if extra:
            raise InvalidSpec(f"unknown sweep fields: {', '.join(sorted(extra))}")
        return cls(
            device_id=doc.get("device_id", 0),
            base=base,
            seed=doc.get("seed", 0),
            name=doc.get("name", "sweep"),
            **kwargs,
        )


@dataclass(frozen=True)
class ComparisonSpec:
    """MIG vs MPS with ``replicas`` co-located copies of each workload point."""

    device_id: int
    base: WorkloadSpec
    replicas: int
    model: tuple = ()
    batch_size: tuple = ()
    arrival_rate: tuple = ()
    seed: int = 0
    name: str = "compare"

    def points(self) -> list[dict]:
        axes = [(a, getattr(self, a)) for a in ("model", "batch_size", "arrival_rate") if getattr(self, a)]
        return [dict(zip((a for a, _ in axes), combo)) for combo in itertools.product(*(v for _, v in axes))]

    def spec_at(self, point: dict, models=None) -> WorkloadSpec:
        models = MODELS if models is None else models
        changes = dict(point)
        if "model" in changes:
            name = changes["model"]
            if name not in models:
                raise InvalidSpec(f"unknown model {name!r}")
            changes["model"] = models[name]
        if "arrival_rate" in changes and self.base.loop == "closed":
            changes["loop"] = "open"
        changes["concurrency"] = self.replicas
        try:
            return replace(self.base, **changes)
        except MigPerfError as exc:
            raise InvalidSpec(f"comparison point {point}: {exc.message}", point=point) from None

    def axes(self) -> dict:
        return {a: list(getattr(self, a)) for a in ("model", "batch_size", "arrival_rate") if getattr(self, a)}

    @classmethod
    def from_dict(cls, doc: dict, models=None) -> "ComparisonSpec":
        doc = dict(doc)
        if "base" not in doc:
            raise InvalidSpec("comparison needs a 'base' workload")
        base = WorkloadSpec.from_dict(doc.pop("base"), models)
        axes = doc.pop("axes", {})
        unknown = set(axes) - {"model", "batch_size", "arrival_rate"}
        if unknown:
            raise InvalidSpec(f"unknown comparison axes: {', '.join(sorted(unknown))}")
        extra = set(doc) - {"device_id", "seed", "name", "replicas"}
        if extra:
            raise InvalidSpec(f"unknown comparison fields: {', '.join(sorted(extra))}")
        replicas = doc.get("replicas", 4)
        if not isinstance(replicas, int) or replicas < 1:
            raise InvalidSpec("replicas must be a positive integer")
        return cls(
            device_id=doc.get("device_id", 0),
            base=base,
            replicas=replicas,
            seed=doc.get("seed", 0),
            name=doc.get("name", "compare"),
            **{a: tuple(axes.get(a, ())) for a in ("model", "batch_size", "arrival_rate")},
        )


@dataclass
class RunRecord:
    """Metadata stored beside a run's series."""

    run_id: str
    device_id: int
    device_model: str
    instance: str
    profile: Optional[str]
    arm: str
    spec: dict
    seed: int
    group_id: Optional[str] = None
    replica: int = 0
    point: dict = field(default_factory=dict)
    status: str = "pending"
    error: Optional[str] = None
    warmup_end_ts: Optional[float] = None
    end_ts_ms: Optional[float] = None
    issued: Optional[int] = None
    served: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


class WorkloadRunner:
    """Binds runs to partitions, executes them and records telemetry."""

    def __init__(self, controller: Controller, store: tm.TelemetryStore, backend, models=None):
        self.controller = controller
        self.store = store
        self.backend = backend
        self.models = MODELS if models is None else models

    # -- single runs -----------------------------------------------------

    def _resolve(self, cfg: RunConfig):
        """Bind the run's target; returns (instance label, profile, slices, k, mode, capacity MiB)."""
        state = self.controller.state(cfg.device_id)
        entry = state.catalog_entry
        total = entry.total_compute_slices
        k = cfg.spec.concurrency
        if isinstance(cfg.target, dict) and "gi_id" in cfg.target:
            gi_id = cfg.target["gi_id"]
            try:
                gi = state.instance(gi_id)
                self.controller.bind_workload(cfg.device_id, gi_id, cfg.run_id)
            except (NotFound, AlreadyBound) as exc:
                raise BindFailed(f"cannot bind run {cfg.run_id} to GPU instance {gi_id}: {exc.message}") from None
            mode = "mps" if k > 1 else "mig"
            return f"gi{gi_id}", gi.profile.name, gi.profile.compute_slices, k, mode, gi.profile.memory_mib
        if cfg.target == "mps_shared":
            if state.sharing_mode != "mps":
                raise BindFailed(f"device {cfg.device_id} is not in MPS mode")
            self.controller.attach_run(cfg.device_id, cfg.run_id)
            capacity = entry.total_memory_gib * 1024 / k
            return "device", None, total, k, "mps", capacity
        if cfg.target == "exclusive":
            if state.sharing_mode != "exclusive" or state.mig_enabled:
                raise BindFailed(f"device {cfg.device_id} is not in exclusive mode")
            self.controller.attach_run(cfg.device_id, cfg.run_id)
            mode = "mps" if k > 1 else "mig"
            return "device", None, total, k, mode, entry.total_memory_gib * 1024 / k
        raise InvalidSpec(f"unknown run target {cfg.target!r}")

    def _release(self, cfg: RunConfig) -> None:
        if isinstance(cfg.target, dict):
            try:
                self.controller.unbind_workload(cfg.device_id, cfg.target["gi_id"])
            except MigPerfError:
                pass
        else:
            self.controller.detach_run(cfg.device_id, cfg.run_id)

    def prepare(self, cfg: RunConfig, group_id=None, replica=0, point=None, arm=None) -> RunRecord:
        state = self.controller.state(cfg.device_id)
        if isinstance(cfg.target, dict):
            gi = state.instance(cfg.target["gi_id"]) if cfg.target.get("gi_id") is not None else None
            instance, profile = f"gi{gi.gi_id}", gi.profile.name
        else:
            instance, profile = "device", None
        record = RunRecord(
            run_id=cfg.run_id,
            device_id=cfg.device_id,
            device_model=state.catalog_entry.model_name,
            instance=instance,
            profile=profile,
            arm=arm or ("mps" if cfg.target == "mps_shared" else "mig" if isinstance(cfg.target, dict) else "exclusive"),
            spec=cfg.spec.to_dict(),
            seed=cfg.seed,
            group_id=group_id,
            replica=replica,
            point=dict(point or {}),
        )
        self.store.write_meta(cfg.run_id, record.to_dict())
        return record

    def execute(self, cfg: RunConfig, record: Optional[RunRecord] = None) -> RunRecord:
        """Run to completion in the calling thread."""
        record = record or self.prepare(cfg)
        entry = self.controller.state(cfg.device_id).catalog_entry
        try:
            instance, profile, slices, k, mode, capacity = self._resolve(cfg)
        except MigPerfError as exc:
            record.status, record.error = "failed", exc.message
            self.store.write_meta(cfg.run_id, record.to_dict())
            raise
        try:
            if cfg.spec.fb_mib > capacity:
                raise InvalidSpec(
                    f"{cfg.spec.model.name} at batch {cfg.spec.batch_size} needs {cfg.spec.fb_mib:.0f} MiB, "
                    f"instance has {capacity:.0f} MiB"
                )
            record.instance, record.profile, record.status = instance, profile, "running"
            self.store.write_meta(cfg.run_id, record.to_dict())
            ctx = RunContext(
                run_id=cfg.run_id,
                spec=cfg.spec,
                entry=entry,
                slices=slices,
                co_tenants=k,
                mode=mode,
                instance=instance,
                capacity_mib=capacity,
                seed=cfg.seed,
            )
            trace = self.backend.execute(ctx)
            for metric, ts, values in trace.series():
                self.store.append_many(tm.SeriesKey(cfg.run_id, instance, metric), zip(ts, values))
            self.store.close_run(cfg.run_id)
            record.warmup_end_ts = trace.warmup_end_ts
            record.end_ts_ms = trace.end_ts
            record.issued, record.served = trace.issued, trace.served
            record.status = "complete"
            self.store.write_meta(cfg.run_id, record.to_dict())
            self.store.set_warmup(cfg.run_id, trace.warmup_end_ts)
        except MigPerfError as exc:
            record.status, record.error = "failed", exc.message
            self.store.write_meta(cfg.run_id, record.to_dict())
            raise
        finally:
            self._release(cfg)
        return record

    # -- sweeps ----------------------------------------------------------

    def check_sweep(self, sweep: SweepSpec) -> list[tuple[dict, WorkloadSpec]]:
        """Validate every point before anything runs."""
        entry = self.controller.state(sweep.device_id).catalog_entry
        planned = []
        for point in sweep.points():
            profile = point["profile_name"]
            if profile is not None:
                try:
                    p = entry.profile(profile)
                except UnknownProfile as exc:
                    raise InvalidSpec(f"sweep point {point}: {exc.message}", point=point) from None
                if not dm.validate_config(entry, [profile]):
                    raise InvalidSpec(f"profile {profile} cannot be placed alone on {entry.model_name}")
                capacity = p.memory_mib
            else:
                capacity = entry.total_memory_gib * 1024
            spec = sweep.spec_at(point)
            if spec.fb_mib > capacity:
                raise InvalidSpec(f"sweep point {point}: needs {spec.fb_mib:.0f} MiB, profile has {capacity}", point=point)
            planned.append((point, spec))
        return planned

    def ensure_mig(self, device_id: int) -> None:
        state = self.controller.state(device_id)
        if state.sharing_mode == "mps":
            self.controller.set_mps(device_id, False)

    def ensure_mps(self, device_id: int) -> None:
        state = self.controller.state(device_id)
        if state.sharing_mode == "mps":
            return
        if state.mig_enabled:
            self.controller.apply_plan(PartitionPlan(device_id, ()))
            self.controller.disable_mig(device_id)
        self.controller.set_mps(device_id, True)

    def ensure_exclusive(self, device_id: int) -> None:
        state = self.controller.state(device_id)
        if state.sharing_mode == "mps":
            self.controller.set_mps(device_id, False)
        elif state.mig_enabled:
            self.controller.apply_plan(PartitionPlan(device_id, ()))
            self.controller.disable_mig(device_id)

    def run_sweep_point(self, sweep: SweepSpec, point: dict, spec: WorkloadSpec, run_id: str, group_id=None):
        profile = point["profile_name"]
        try:
            if profile is not None:
                self.ensure_mig(sweep.device_id)
                self.controller.apply_plan(PartitionPlan(sweep.device_id, (profile,)))
                gi_id = self.controller.track_instances(sweep.device_id)[0]["gi_id"]
                target = {"gi_id": gi_id}
            else:
                self.ensure_exclusive(sweep.device_id)
                target = "exclusive"
            cfg = RunConfig(run_id, sweep.device_id, target, spec, sweep.seed)
            record = self.prepare(cfg, group_id=group_id, point=point)
            return self.execute(cfg, record)
        except MigPerfError as exc:
            exc.details.setdefault("point", point)
            if "sweep point" not in exc.message:
                exc.message = f"sweep point {point}: {exc.message}"
                exc.args = (exc.message,)
            raise

    def check_comparison(self, cmp: ComparisonSpec) -> dm.GiProfile:
        entry = self.controller.state(cmp.device_id).catalog_entry
        profile = dm.equal_split_profile(entry, cmp.replicas)
        if profile is None:
            raise NoEqualSplit(
                f"{entry.model_name} has no {cmp.replicas}-way equal MIG split",
                replicas=cmp.replicas,
            )
        for point in cmp.points():
            spec = cmp.spec_at(point, self.models)
            if spec.fb_mib > profile.memory_mib:
                raise InvalidSpec(f"comparison point {point}: needs {spec.fb_mib:.0f} MiB, {profile.name} has {profile.memory_mib}")
        return profile

    def run_comparison_arm(self, cmp: ComparisonSpec, arm: str, point: dict, run_ids: list, group_id=None):
        spec = cmp.spec_at(point, self.models)
        records = []
        if arm == "mig":
            profile = dm.equal_split_profile(self.controller.state(cmp.device_id).catalog_entry, cmp.replicas)
            self.ensure_mig(cmp.device_id)
            self.controller.apply_plan(PartitionPlan(cmp.device_id, (profile.name,) * cmp.replicas))
            gis = [row["gi_id"] for row in self.controller.track_instances(cmp.device_id)]
            # each replica owns a GI, so there is no co-tenant on it
            spec = replace(spec, concurrency=1)
            targets = [{"gi_id": g} for g in gis]
        else:
            self.ensure_mps(cmp.device_id)
            targets = ["mps_shared"] * cmp.replicas
        for i, (run_id, target) in enumerate(zip(run_ids, targets)):
            cfg = RunConfig(run_id, cmp.device_id, target, spec, cmp.seed + i)
            record = self.prepare(cfg, group_id=group_id, replica=i, point=point, arm=arm)
            records.append(self.execute(cfg, record))
        return records


@dataclass
class RunContext:
    run_id: str
    spec: WorkloadSpec
    entry: dm.DeviceCatalogEntry
    slices: int
    co_tenants: int
    mode: str
    instance: str
    capacity_mib: float
    seed: int
    interval_ms: float = 100.0
