"""Owns device states, executes partition plans and tracks workload bindings.

Every mutation of a device runs under that device's lock; readers get the
current immutable snapshot without locking.
"""

from __future__ import annotations

import logging
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import device_model as dm
from . import kernels
from .errors import (
    AlreadyBound,
    Busy,
    BusyInstance,
    InfeasibleTarget,
    InvalidSpec,
    NotBound,
    UnknownDevice,
)

log = logging.getLogger(__name__)

STRATEGIES = ("strict", "best_effort")


@dataclass(frozen=True)
class PartitionPlan:
    device_id: int
    target: tuple[str, ...]
    strategy: str = "strict"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidSpec(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")


@dataclass
class ReconfigurationScript:
    device_id: int
    steps: list[dict] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"device_id": self.device_id, "steps": list(self.steps), "dropped": list(self.dropped)}


def replay(state: dm.DeviceState, steps) -> dm.DeviceState:
    """Apply script steps to a snapshot through the device model alone."""
    for step in steps:
        if step["op"] == "destroy":
            gi = state.instance(step["gi_id"])
            for ci in gi.compute_instances:
                state = dm.destroy_ci(state, gi.gi_id, ci.ci_id)
            state = dm.destroy_gi(state, gi.gi_id)
        else:
            state, _ = dm.create_gi(state, step["profile"], start=step["start"])
    return state


class Controller:
    def __init__(self, catalog, states=None, bindings=None, on_change: Optional[Callable] = None):
        self.catalog = list(catalog)
        self._states = {i: dm.new_device(i, entry) for i, entry in enumerate(self.catalog)}
        if states:
            self._states.update(states)
        # device_id -> {gi_id: run_id}
        self._bindings: dict[int, dict] = {i: {} for i in self._states}
        for device_id, table in (bindings or {}).items():
            self._bindings[device_id] = dict(table)
        # runs attached to a whole device (MPS or exclusive mode)
        self._attached: dict[int, set] = {i: set() for i in self._states}
        self._locks = {i: threading.RLock() for i in self._states}
        self._on_change = on_change

    # -- snapshots -------------------------------------------------------

    def state(self, device_id: int) -> dm.DeviceState:
        try:
            return self._states[device_id]
        except KeyError:
            raise UnknownDevice(f"device {device_id} is not in the catalog", device_id=device_id) from None

    def lock(self, device_id: int) -> threading.RLock:
        self.state(device_id)
        return self._locks[device_id]

    def bindings(self, device_id: int) -> dict:
        self.state(device_id)
        return dict(self._bindings[device_id])

    def list_devices(self) -> list[dict]:
        rows = []
        for device_id, state in sorted(self._states.items()):
            entry = state.catalog_entry
            rows.append(
                {
                    "device_id": device_id,
                    "model_name": entry.model_name,
                    "total_compute_slices": entry.total_compute_slices,
                    "total_memory_gib": entry.total_memory_gib,
                    "mig_enabled": state.mig_enabled,
                    "sharing_mode": state.sharing_mode,
                    "instances": len(state.instances),
                    "profiles": [p.name for p in entry.profiles],
                }
            )
        return rows

    def track_instances(self, device_id: int) -> list[dict]:
        state = self.state(device_id)
        bound = self._bindings[device_id]
        return [
            {
                "gi_id": gi.gi_id,
                "profile": gi.profile.name,
                "start": gi.start_slice,
                "compute_slices": gi.profile.compute_slices,
                "memory_gib": gi.profile.memory_gib,
                "compute_instances": [{"ci_id": c.ci_id, "slices": c.slices} for c in gi.compute_instances],
                "bound_workload": bound.get(gi.gi_id),
            }
            for gi in sorted(state.instances, key=lambda g: g.start_slice)
        ]

    # -- mutations -------------------------------------------------------

    def _commit(self, device_id: int, state: dm.DeviceState) -> None:
        self._states[device_id] = state
        if self._on_change is not None:
            self._on_change(self)

    def _mutate(self, device_id: int, fn, *args):
        with self.lock(device_id):
            result = fn(self._states[device_id], *args)
            state, value = result if isinstance(result, tuple) else (result, None)
            self._commit(device_id, state)
            return value

    def enable_mig(self, device_id: int) -> None:
        with self.lock(device_id):
            self._check_detached(device_id)
            self._mutate(device_id, dm.enable_mig)

    def disable_mig(self, device_id: int) -> None:
        self._mutate(device_id, dm.disable_mig)

    def set_mps(self, device_id: int, enabled: bool) -> None:
        with self.lock(device_id):
            self._check_detached(device_id)
            self._mutate(device_id, dm.set_mps, enabled)

    def create_gi(self, device_id: int, profile: str, start: Optional[int] = None) -> int:
        return self._mutate(device_id, dm.create_gi, profile, start)

    def destroy_gi(self, device_id: int, gi_id) -> None:
        with self.lock(device_id):
            run = self._bindings[device_id].get(gi_id)
            if run is not None:
                raise Busy(f"GPU instance {gi_id} is bound to run {run}", gi_id=gi_id, run_id=run)
            self._mutate(device_id, dm.destroy_gi, gi_id)

    def create_ci(self, device_id: int, gi_id, slices: int) -> int:
        return self._mutate(device_id, dm.create_ci, gi_id, slices)

    def destroy_ci(self, device_id: int, gi_id, ci_id) -> None:
        self._mutate(device_id, dm.destroy_ci, gi_id, ci_id)

    # -- bindings --------------------------------------------------------

    def bind_workload(self, device_id: int, gi_id, run_id: str) -> None:
        with self.lock(device_id):
            self.state(device_id).instance(gi_id)
            current = self._bindings[device_id].get(gi_id)
            if current is not None:
                raise AlreadyBound(f"GPU instance {gi_id} is already bound to run {current}", gi_id=gi_id)
            self._bindings[device_id][gi_id] = run_id
            self._commit(device_id, self._states[device_id])

    def unbind_workload(self, device_id: int, gi_id) -> None:
        with self.lock(device_id):
            if self._bindings[device_id].get(gi_id) is None:
                raise NotBound(f"GPU instance {gi_id} has no bound workload", gi_id=gi_id)
            del self._bindings[device_id][gi_id]
            self._commit(device_id, self._states[device_id])

    def attach_run(self, device_id: int, run_id: str) -> None:
        with self.lock(device_id):
            self._attached[device_id].add(run_id)

    def detach_run(self, device_id: int, run_id: str) -> None:
        with self.lock(device_id):
            self._attached[device_id].discard(run_id)

    def attached_runs(self, device_id: int) -> set:
        self.state(device_id)
        return set(self._attached[device_id])

    def _check_detached(self, device_id: int) -> None:
        if self._attached[device_id]:
            raise BusyInstance(
                f"device {device_id} has attached runs: {', '.join(sorted(self._attached[device_id]))}",
                runs=sorted(self._attached[device_id]),
            )

    # -- plans -----------------------------------------------------------

    def apply_plan(self, plan: PartitionPlan) -> ReconfigurationScript:
        """Reconfigure a device to hold exactly ``plan.target``.

        GIs whose profile survives are kept (bound ones first, then lowest
        start); only surplus GIs are destroyed.
        """
        with self.lock(plan.device_id):
            state = self._states[plan.device_id]
            entry = state.catalog_entry
            target = list(plan.target)
            for name in target:
                entry.profile(name)
            dropped = []
            if not dm.validate_config(entry, target):
                if plan.strategy == "strict":
                    raise InfeasibleTarget(
                        f"infeasible target {', '.join(target)}: no placement fits on {entry.model_name}",
                        target=target,
                    )
                while target and not dm.validate_config(entry, target):
                    dropped.append(target.pop())
            if not state.mig_enabled:
                state = dm.enable_mig(state)
            steps = self._plan_steps(state, target)
            new_state = replay(state, steps)
            # ids of created GIs are only known after replay
            created = [gi for gi in new_state.instances if gi.gi_id >= state.next_id]
            created.sort(key=lambda g: g.gi_id)
            for step, gi in zip((s for s in steps if s["op"] == "create"), created):
                step["gi_id"] = gi.gi_id
            self._commit(plan.device_id, new_state)
            script = ReconfigurationScript(plan.device_id, steps, dropped)
            log.info("device %s: applied plan with %d step(s)", plan.device_id, len(steps))
            return script

    def _plan_steps(self, state: dm.DeviceState, target: list[str]) -> list[dict]:
        entry = state.catalog_entry
        bound = self._bindings[state.device_id]
        want = Counter(target)
        by_profile: dict[str, list[dm.GpuInstance]] = {}
        for gi in state.instances:
            by_profile.setdefault(gi.profile.name, []).append(gi)
        keep: list[dm.GpuInstance] = []
        for name, gis in by_profile.items():
            gis.sort(key=lambda g: (bound.get(g.gi_id) is None, g.start_slice))
            keep.extend(gis[: want[name]])
        surplus = [gi for gi in state.instances if gi not in keep]
        busy = {gi.gi_id: bound[gi.gi_id] for gi in surplus if gi.gi_id in bound}
        if busy:
            raise BusyInstance(
                "plan would destroy GPU instances with bound workloads: "
                + ", ".join(f"gi {g} (run {r})" for g, r in sorted(busy.items())),
                bound=busy,
            )
        while True:
            missing = want - Counter(gi.profile.name for gi in keep)
            starts = _pinned_search(entry, keep, missing)
            if starts is not None:
                break
            # a kept GI blocks the target layout; recreate the highest unbound one
            movable = [gi for gi in keep if gi.gi_id not in bound]
            if not movable:
                raise BusyInstance(
                    "bound GPU instances block the target layout",
                    bound={g: r for g, r in bound.items()},
                )
            victim = max(movable, key=lambda g: (g.start_slice, g.gi_id))
            keep.remove(victim)
            surplus.append(victim)
        steps = [
            {"op": "destroy", "gi_id": gi.gi_id, "profile": gi.profile.name, "start": gi.start_slice}
            for gi in sorted(surplus, key=lambda g: g.start_slice)
        ]
        steps.extend({"op": "create", "profile": name, "start": s} for name, s in starts)
        return steps


def _pinned_search(entry: dm.DeviceCatalogEntry, keep, missing: Counter):
    """Starts for the ``missing`` profiles that avoid the kept GIs, or None."""
    new_names = sorted(missing.elements(), key=entry.profile_index)
    pinned = sorted(keep, key=lambda g: g.start_slice)
    sizes = [g.profile.compute_slices for g in pinned]
    starts = [[g.start_slice] for g in pinned]
    same = [False] * len(pinned)
    for i, name in enumerate(new_names):
        p = entry.profile(name)
        sizes.append(p.compute_slices)
        starts.append(list(p.allowed_starts))
        same.append(i > 0 and new_names[i - 1] == name)
    found = kernels.search_placement(sizes, starts, same, entry.total_compute_slices)
    if found is None:
        return None
    return list(zip(new_names, found[len(pinned):]))
