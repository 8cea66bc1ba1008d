"""GPU topologies, MIG profiles, placement legality and the partition state machine.

All state transitions are pure: they take a frozen ``DeviceState`` and return a
new one, so snapshots can be handed to concurrent readers safely.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

from . import kernels
from .errors import (
    AlreadyEnabled,
    Busy,
    CatalogError,
    InvalidStart,
    ModeConflict,
    NoCapacity,
    NotEnabled,
    NotFound,
    UnknownProfile,
)

SHARING_MODES = ("mig", "mps", "exclusive")
_PROFILE_NAME = re.compile(r"^(\d+)g\.(\d+)gb$")


@dataclass(frozen=True)
class GiProfile:
    name: str
    compute_slices: int
    memory_gib: int
    allowed_starts: tuple[int, ...]
    max_count: int

    @property
    def memory_mib(self) -> int:
        return self.memory_gib * 1024

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "compute_slices": self.compute_slices,
            "memory_gib": self.memory_gib,
            "allowed_starts": list(self.allowed_starts),
            "max_count": self.max_count,
        }


@dataclass(frozen=True)
class DeviceCatalogEntry:
    model_name: str
    total_compute_slices: int
    total_memory_gib: int
    profiles: tuple[GiProfile, ...]
    # pairs of profile names the driver refuses to co-host
    incompatible: tuple[frozenset, ...] = ()
    perf_model: Optional[dict] = field(default=None, compare=False, hash=False)

    @property
    def max_instances_per_profile(self) -> dict[str, int]:
        return {p.name: p.max_count for p in self.profiles}

    def profile(self, name: str) -> GiProfile:
        for p in self.profiles:
            if p.name == name:
                return p
        raise UnknownProfile(
            f"profile {name!r} is not defined for {self.model_name}",
            profile=name,
        )

    def profile_index(self, name: str) -> int:
        for i, p in enumerate(self.profiles):
            if p.name == name:
                return i
        raise UnknownProfile(
            f"profile {name!r} is not defined for {self.model_name}",
            profile=name,
        )

    def to_dict(self) -> dict:
        out = {
            "model_name": self.model_name,
            "total_compute_slices": self.total_compute_slices,
            "total_memory_gib": self.total_memory_gib,
            "profiles": [p.to_dict() for p in self.profiles],
            "incompatible": [sorted(pair) for pair in self.incompatible],
        }
        if self.perf_model is not None:
            out["perf_model"] = dict(self.perf_model)
        return out


@dataclass(frozen=True)
class ComputeInstance:
    ci_id: int
    slices: int


@dataclass(frozen=True)
class GpuInstance:
    gi_id: int
    profile: GiProfile
    start_slice: int
    compute_instances: tuple[ComputeInstance, ...] = ()

    @property
    def end_slice(self) -> int:
        return self.start_slice + self.profile.compute_slices

    @property
    def ci_slices_used(self) -> int:
        return sum(ci.slices for ci in self.compute_instances)


@dataclass(frozen=True)
class DeviceState:
    device_id: int
    catalog_entry: DeviceCatalogEntry
    mig_enabled: bool = False
    instances: tuple[GpuInstance, ...] = ()
    sharing_mode: str = "exclusive"
    # id counter; excluded from equality so create->destroy round-trips compare equal
    next_id: int = field(default=1, compare=False)

    def instance(self, gi_id) -> GpuInstance:
        for gi in self.instances:
            if gi.gi_id == gi_id:
                return gi
        raise NotFound(f"GPU instance {gi_id} not found on device {self.device_id}", gi_id=gi_id)

    def profile_multiset(self) -> Counter:
        return Counter(gi.profile.name for gi in self.instances)

    def occupied_intervals(self) -> list[tuple[int, int]]:
        return sorted((gi.start_slice, gi.end_slice) for gi in self.instances)


# ---------------------------------------------------------------------------
# catalog loading


def default_catalog_path() -> Path:
    return Path(str(resources.files("migperf") / "data" / "catalog.json"))


def _field(obj, key, kind, where):
    if not isinstance(obj, dict) or key not in obj:
        raise CatalogError(f"{where}: missing field {key!r}", field=f"{where}.{key}")
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise CatalogError(f"{where}.{key}: expected integer, got {value!r}", field=f"{where}.{key}")
    if kind is str and not isinstance(value, str):
        raise CatalogError(f"{where}.{key}: expected text, got {value!r}", field=f"{where}.{key}")
    if kind is list and not isinstance(value, list):
        raise CatalogError(f"{where}.{key}: expected list, got {value!r}", field=f"{where}.{key}")
    return value


def _parse_profile(raw, total, where) -> GiProfile:
    name = _field(raw, "name", str, where)
    slices = _field(raw, "compute_slices", int, where)
    memory = _field(raw, "memory_gib", int, where)
    starts = _field(raw, "allowed_starts", list, where)
    max_count = raw.get("max_count", total)
    m = _PROFILE_NAME.match(name)
    if not m:
        raise CatalogError(f"{where}: profile name {name!r} is not of the form '<g>g.<mem>gb'", profile=name)
    if int(m.group(1)) != slices:
        raise CatalogError(
            f"profile {name}: name says {m.group(1)} slices but compute_slices is {slices}",
            profile=name,
        )
    if slices < 1 or slices > total:
        raise CatalogError(f"profile {name}: compute_slices {slices} outside 1..{total}", profile=name)
    if memory < 1:
        raise CatalogError(f"profile {name}: memory_gib must be positive", profile=name)
    if not starts:
        raise CatalogError(f"profile {name}: allowed_starts is empty", profile=name)
    for s in starts:
        if isinstance(s, bool) or not isinstance(s, int) or s < 0:
            raise CatalogError(f"profile {name}: bad start {s!r}", profile=name)
        if s + slices > total:
            raise CatalogError(
                f"profile {name}: start {s} + {slices} slices exceeds {total} compute slices",
                profile=name,
            )
    if any(b <= a for a, b in zip(starts, starts[1:])):
        raise CatalogError(f"profile {name}: allowed_starts must be strictly increasing", profile=name)
    if isinstance(max_count, bool) or not isinstance(max_count, int) or max_count < 1:
        raise CatalogError(f"profile {name}: max_count must be a positive integer", profile=name)
    return GiProfile(name, slices, memory, tuple(starts), max_count)


def parse_catalog(doc) -> list[DeviceCatalogEntry]:
    if not isinstance(doc, dict):
        raise CatalogError("catalog: top level must be an object")
    devices = doc.get("devices", [])
    if not isinstance(devices, list):
        raise CatalogError("catalog: 'devices' must be a list", field="devices")
    entries = []
    for i, raw in enumerate(devices):
        where = f"devices[{i}]"
        model = _field(raw, "model_name", str, where)
        total = _field(raw, "total_compute_slices", int, where)
        memory = _field(raw, "total_memory_gib", int, where)
        if total < 1:
            raise CatalogError(f"{model}: total_compute_slices must be >= 1", field=f"{where}.total_compute_slices")
        raw_profiles = _field(raw, "profiles", list, where)
        profiles = tuple(
            _parse_profile(p, total, f"{where}.profiles[{j}]") for j, p in enumerate(raw_profiles)
        )
        names = [p.name for p in profiles]
        if len(set(names)) != len(names):
            raise CatalogError(f"{model}: duplicate profile names", field=f"{where}.profiles")
        incompatible = []
        for pair in raw.get("incompatible", []):
            if not isinstance(pair, list) or len(pair) != 2 or not set(pair) <= set(names):
                raise CatalogError(f"{model}: bad incompatible pair {pair!r}", field=f"{where}.incompatible")
            incompatible.append(frozenset(pair))
        entries.append(
            DeviceCatalogEntry(
                model_name=model,
                total_compute_slices=total,
                total_memory_gib=memory,
                profiles=profiles,
                incompatible=tuple(incompatible),
                perf_model=raw.get("perf_model"),
            )
        )
    return entries


def load_catalog(path=None) -> list[DeviceCatalogEntry]:
    """Read and validate a device catalog file.

    An empty file is an empty catalog. JSON syntax errors are reported with
    their line and column; invariant violations name the offending profile.
    """
    path = Path(path) if path is not None else default_catalog_path()
    text = path.read_text()
    if not text.strip():
        return []
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CatalogError(
            f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}",
            line=exc.lineno,
        ) from exc
    return parse_catalog(doc)


# ---------------------------------------------------------------------------
# state machine


def new_device(device_id: int, entry: DeviceCatalogEntry) -> DeviceState:
    return DeviceState(device_id=device_id, catalog_entry=entry)


def enable_mig(state: DeviceState) -> DeviceState:
    if state.sharing_mode == "mps":
        raise ModeConflict(f"device {state.device_id} is in MPS mode; disable MPS before enabling MIG")
    if state.mig_enabled:
        raise AlreadyEnabled(f"MIG is already enabled on device {state.device_id}")
    return replace(state, mig_enabled=True, instances=(), sharing_mode="mig")


def disable_mig(state: DeviceState) -> DeviceState:
    if not state.mig_enabled:
        raise NotEnabled(f"MIG is not enabled on device {state.device_id}")
    if state.instances:
        raise Busy(f"device {state.device_id} still hosts {len(state.instances)} GPU instance(s)")
    return replace(state, mig_enabled=False, sharing_mode="exclusive")


def set_mps(state: DeviceState, enabled: bool) -> DeviceState:
    if enabled:
        if state.mig_enabled:
            raise ModeConflict(f"device {state.device_id} has MIG enabled; MPS and MIG are exclusive")
        return replace(state, sharing_mode="mps")
    if state.sharing_mode != "mps":
        raise ModeConflict(f"device {state.device_id} is not in MPS mode")
    return replace(state, sharing_mode="exclusive")


def _overlaps(start: int, size: int, state: DeviceState) -> bool:
    end = start + size
    return any(start < gi.end_slice and gi.start_slice < end for gi in state.instances)


def _check_admission(state: DeviceState, profile: GiProfile) -> None:
    entry = state.catalog_entry
    present = state.profile_multiset()
    if present[profile.name] >= profile.max_count:
        raise NoCapacity(
            f"{entry.model_name} allows at most {profile.max_count} x {profile.name}",
            profile=profile.name,
        )
    for pair in entry.incompatible:
        if profile.name in pair:
            (other,) = pair - {profile.name} or {profile.name}
            if present[other]:
                raise NoCapacity(
                    f"{profile.name} cannot coexist with {other} on {entry.model_name}",
                    profile=profile.name,
                )


def create_gi(state: DeviceState, profile_name: str, start: Optional[int] = None):
    """Place a new GPU instance; returns ``(new_state, gi_id)``.

    Without ``start`` the lowest legal free start is used, so the same sequence
    of calls always yields the same layout.
    """
    if not state.mig_enabled:
        raise NotEnabled(f"MIG is not enabled on device {state.device_id}")
    profile = state.catalog_entry.profile(profile_name)
    _check_admission(state, profile)
    if start is not None:
        if start not in profile.allowed_starts:
            raise InvalidStart(
                f"{profile_name} cannot start at slice {start}; allowed {list(profile.allowed_starts)}",
                start=start,
            )
        if _overlaps(start, profile.compute_slices, state):
            raise NoCapacity(f"slices {start}..{start + profile.compute_slices - 1} are occupied", start=start)
        chosen = start
    else:
        chosen = next(
            (s for s in profile.allowed_starts if not _overlaps(s, profile.compute_slices, state)),
            None,
        )
        if chosen is None:
            raise NoCapacity(
                f"no free placement for {profile_name} on device {state.device_id}",
                profile=profile_name,
            )
    gi = GpuInstance(gi_id=state.next_id, profile=profile, start_slice=chosen)
    instances = tuple(sorted(state.instances + (gi,), key=lambda g: g.start_slice))
    return replace(state, instances=instances, next_id=state.next_id + 1), gi.gi_id


def destroy_gi(state: DeviceState, gi_id) -> DeviceState:
    gi = state.instance(gi_id)
    if gi.compute_instances:
        raise Busy(f"GPU instance {gi_id} still has {len(gi.compute_instances)} compute instance(s)", gi_id=gi_id)
    return replace(state, instances=tuple(g for g in state.instances if g.gi_id != gi_id))


def create_ci(state: DeviceState, gi_id, slices: int):
    """Carve a compute instance out of a GI; returns ``(new_state, ci_id)``."""
    if isinstance(slices, bool) or not isinstance(slices, int) or slices < 1:
        raise NoCapacity(f"compute instance needs at least one slice, got {slices!r}")
    gi = state.instance(gi_id)
    free = gi.profile.compute_slices - gi.ci_slices_used
    if slices > free:
        raise NoCapacity(f"GPU instance {gi_id} has {free} free slice(s), {slices} requested", gi_id=gi_id)
    ci = ComputeInstance(ci_id=state.next_id, slices=slices)
    new_gi = replace(gi, compute_instances=gi.compute_instances + (ci,))
    instances = tuple(new_gi if g.gi_id == gi_id else g for g in state.instances)
    return replace(state, instances=instances, next_id=state.next_id + 1), ci.ci_id


def destroy_ci(state: DeviceState, gi_id, ci_id) -> DeviceState:
    gi = state.instance(gi_id)
    if not any(ci.ci_id == ci_id for ci in gi.compute_instances):
        raise NotFound(f"compute instance {ci_id} not found in GPU instance {gi_id}", ci_id=ci_id)
    new_gi = replace(gi, compute_instances=tuple(c for c in gi.compute_instances if c.ci_id != ci_id))
    instances = tuple(new_gi if g.gi_id == gi_id else g for g in state.instances)
    return replace(state, instances=instances)


# ---------------------------------------------------------------------------
# feasibility


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    # (profile name, start) pairs in catalog-profile order, starts ascending
    placement: Optional[tuple[tuple[str, int], ...]] = None

    def __bool__(self) -> bool:
        return self.feasible

    def to_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "placement": None if self.placement is None else [list(p) for p in self.placement],
        }


def _violates_rules(entry: DeviceCatalogEntry, counts: Counter) -> bool:
    for p in entry.profiles:
        if counts[p.name] > p.max_count:
            return True
    return any(all(counts[name] for name in pair) for pair in entry.incompatible)


def validate_config(entry: DeviceCatalogEntry, requested: Iterable[str]) -> Feasibility:
    """Decide whether a multiset of profiles can be placed on an empty device.

    The witness is the lexicographically smallest assignment when instances
    are ordered by catalog profile order and then by start.
    """
    names = list(requested)
    order = sorted(names, key=entry.profile_index)
    counts = Counter(order)
    if _violates_rules(entry, counts):
        return Feasibility(False)
    profiles = [entry.profile(n) for n in order]
    sizes = [p.compute_slices for p in profiles]
    starts = [list(p.allowed_starts) for p in profiles]
    same = [i > 0 and order[i] == order[i - 1] for i in range(len(order))]
    found = kernels.search_placement(sizes, starts, same, entry.total_compute_slices)
    if found is None:
        return Feasibility(False)
    return Feasibility(True, tuple(zip(order, found)))


def enumerate_valid_configs(entry: DeviceCatalogEntry) -> set[tuple[str, ...]]:
    """Every placeable profile multiset, each as a sorted tuple of names."""
    sizes = [p.compute_slices for p in entry.profiles]
    starts = [list(p.allowed_starts) for p in entry.profiles]
    max_counts = [p.max_count for p in entry.profiles]
    vectors = kernels.enumerate_configs(sizes, starts, max_counts, entry.total_compute_slices)
    out = set()
    for vec in vectors:
        counts = Counter({p.name: c for p, c in zip(entry.profiles, vec) if c})
        if _violates_rules(entry, counts):
            continue
        out.add(tuple(sorted(counts.elements())))
    return out


def equal_split_profile(entry: DeviceCatalogEntry, k: int) -> Optional[GiProfile]:
    """Profile that divides the whole device into ``k`` equal GIs, if any."""
    for p in entry.profiles:
        if p.compute_slices * k == entry.total_compute_slices and validate_config(entry, [p.name] * k):
            return p
    return None


def state_to_dict(state: DeviceState) -> dict:
    return {
        "device_id": state.device_id,
        "model_name": state.catalog_entry.model_name,
        "mig_enabled": state.mig_enabled,
        "sharing_mode": state.sharing_mode,
        "next_id": state.next_id,
        "instances": [
            {
                "gi_id": gi.gi_id,
                "profile": gi.profile.name,
                "start": gi.start_slice,
                "compute_instances": [{"ci_id": c.ci_id, "slices": c.slices} for c in gi.compute_instances],
            }
            for gi in state.instances
        ],
    }


def state_from_dict(doc: dict, entry: DeviceCatalogEntry) -> DeviceState:
    instances = tuple(
        GpuInstance(
            gi_id=raw["gi_id"],
            profile=entry.profile(raw["profile"]),
            start_slice=raw["start"],
            compute_instances=tuple(ComputeInstance(c["ci_id"], c["slices"]) for c in raw["compute_instances"]),
        )
        for raw in doc["instances"]
    )
    return DeviceState(
        device_id=doc["device_id"],
        catalog_entry=entry,
        mig_enabled=doc["mig_enabled"],
        instances=instances,
        sharing_mode=doc["sharing_mode"],
        next_id=doc["next_id"],
    )
