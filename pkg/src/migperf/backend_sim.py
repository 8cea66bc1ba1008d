"""Execution backends.

``SimBackend`` synthesizes a run from a parametric model: per-batch service
time is a fixed overhead plus compute work spread over the instance's slices,
with Gaussian jitter that grows with co-tenants under MPS. Runs are simulated
in virtual time, so a 60 s benchmark costs milliseconds of wall time.

``ExternalBackend`` replays pre-recorded samples from a JSON Lines file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from . import telemetry as tm
from .errors import InvalidSpec

# power samples are reported on a 1/1024 W grid, so trapezoid sums stay exact
POWER_RESOLUTION_W = 1.0 / 1024.0
_MIN_SERVICE_MS = 1e-6
_CHUNK = 4096


@dataclass(frozen=True)
class PerfModelParams:
    alpha_ms: float = 2.0
    beta_ms: float = 1.5
    sigma_iso_ms: float = 0.2
    gamma: float = 0.05
    p_idle_w: float = 60.0
    p_max_w: float = 400.0
    seed: int = 0

    def __post_init__(self):
        for name in ("alpha_ms", "beta_ms", "sigma_iso_ms", "gamma", "p_idle_w", "p_max_w"):
            if getattr(self, name) < 0:
                raise InvalidSpec(f"{name} must be non-negative")
        if self.p_max_w < self.p_idle_w:
            raise InvalidSpec("p_max_w must be at least p_idle_w")

    @classmethod
    def for_device(cls, entry, seed: int = 0) -> "PerfModelParams":
        raw = dict(entry.perf_model or {})
        raw.pop("calibration", None)
        return cls(seed=seed, **raw)


def service_params(spec, params: PerfModelParams, slices: int, co_tenants: int = 1, mode: str = "mig"):
    """Mean and jitter std (ms) of one batch's service time."""
    if slices < 1 or co_tenants < 1:
        raise InvalidSpec("slices and co-tenant count must be >= 1")
    work = spec.work_per_batch
    if mode == "mig":
        return params.alpha_ms + params.beta_ms * work / slices, params.sigma_iso_ms
    if mode == "mps":
        effective = slices / co_tenants
        std = params.sigma_iso_ms * (1.0 + params.gamma * work * (co_tenants - 1))
        return params.alpha_ms + params.beta_ms * work / effective, std
    raise InvalidSpec(f"unknown sharing mode {mode!r}")


def service_time(spec, slices: int, co_tenants: int, mode: str, params: PerfModelParams, rng, size=None):
    """Draw service time(s) in ms; never below the fixed overhead."""
    mean, std = service_params(spec, params, slices, co_tenants, mode)
    noise = rng.normal(0.0, 1.0, size=size)
    floor = max(params.alpha_ms, _MIN_SERVICE_MS)
    return np.maximum(mean + std * noise, floor)


def power_w(busy_frac, slices, total_slices, params: PerfModelParams):
    raw = params.p_idle_w + (params.p_max_w - params.p_idle_w) * np.asarray(busy_frac) * (slices / total_slices)
    return np.round(raw / POWER_RESOLUTION_W) * POWER_RESOLUTION_W


@dataclass
class RunTrace:
    latency_ts: list
    latency_ms: list
    sample_ts: list
    gract: list
    power: list
    fb: list
    warmup_end_ts: float
    end_ts: float
    issued: int
    served: int
    arrivals: list = field(default_factory=list, repr=False)

    def series(self):
        yield tm.LATENCY, self.latency_ts, self.latency_ms
        yield tm.POWER, self.sample_ts, self.power
        yield tm.GRACT, self.sample_ts, self.gract
        yield tm.FB, self.sample_ts, self.fb


def warmup_end(completions, warmup_s: float, warmup_batches: int) -> float:
    """End of the warm-up phase: ``warmup_s`` or the ``warmup_batches``-th completion, whichever is later."""
    by_time = warmup_s * 1000.0
    if warmup_batches <= 0:
        return by_time
    if len(completions) >= warmup_batches:
        return max(by_time, float(completions[warmup_batches - 1]))
    return max(by_time, float(completions[-1])) if len(completions) else by_time


class SimBackend:
    name = "sim"

    def __init__(self, overrides: Optional[dict] = None):
        self.overrides = dict(overrides or {})

    def params_for(self, ctx) -> PerfModelParams:
        base = PerfModelParams.for_device(ctx.entry, seed=ctx.seed)
        if not self.overrides:
            return base
        raw = {**base.__dict__, **self.overrides, "seed": ctx.seed}
        return PerfModelParams(**raw)

    def execute(self, ctx) -> RunTrace:
        params = self.params_for(ctx)
        spec = ctx.spec
        arrival_seq, service_seq = np.random.SeedSequence(params.seed).spawn(2)
        arrival_rng = np.random.default_rng(arrival_seq)
        service_rng = np.random.default_rng(service_seq)

        def draw(n):
            return service_time(spec, ctx.slices, ctx.co_tenants, ctx.mode, params, service_rng, size=n)

        horizon = spec.duration_s * 1000.0 if spec.duration_s is not None else 0.0
        if spec.loop == "closed":
            starts, services = _closed_loop(spec, draw)
            completions = starts + services
            latencies = services
            arrivals = starts
        else:
            arrivals = _poisson_arrivals(spec, arrival_rng)
            services = draw(len(arrivals))
            completions = np.asarray(kernels.fifo_completions(arrivals, services))
            latencies = completions - arrivals
        begins = completions - services
        if len(completions) == 0:
            raise InvalidSpec(f"run {ctx.run_id} completed no requests")
        # open loop drains its queue past the horizon; closed loop stops at it
        end = max(horizon, float(completions[-1]))
        # the fixed overhead is host-side; only the compute part keeps the GPU busy
        busy_from = np.minimum(begins + params.alpha_ms, completions)
        n_bins = max(1, math.ceil(end / ctx.interval_ms))
        gract = kernels.busy_fractions(busy_from, completions, ctx.interval_ms, n_bins)
        # an idle sample at the start, then one per interval reporting the bin it closes
        gract = [0.0] + list(gract)
        share = ctx.slices / ctx.co_tenants if ctx.mode == "mps" else ctx.slices
        power = power_w(gract, share, ctx.entry.total_compute_slices, params)
        sample_ts = [ctx.interval_ms * i for i in range(n_bins + 1)]
        fb = [float(spec.fb_mib)] * (n_bins + 1)
        return RunTrace(
            latency_ts=completions.tolist(),
            latency_ms=latencies.tolist(),
            sample_ts=sample_ts,
            gract=gract,
            power=power.tolist(),
            fb=fb,
            warmup_end_ts=warmup_end(completions, spec.warmup_s, spec.warmup_batches),
            end_ts=end,
            issued=len(arrivals),
            served=len(completions),
            arrivals=list(arrivals),
        )


def _closed_loop(spec, draw):
    """Back-to-back batches: each starts when the previous completes.

    With a duration, the batch still in flight at the horizon is cut off and
    never counted as issued.
    """
    if spec.total_requests is not None:
        services = draw(spec.total_requests)
        starts = np.concatenate(([0.0], np.cumsum(services)[:-1]))
        return starts, services
    horizon = spec.duration_s * 1000.0
    chunks = []
    elapsed = 0.0
    while elapsed < horizon:
        chunk = draw(_CHUNK)
        chunks.append(chunk)
        elapsed += float(chunk.sum())
    services = np.concatenate(chunks)
    starts = np.concatenate(([0.0], np.cumsum(services)[:-1]))
    keep = starts + services <= horizon
    return starts[keep], services[keep]


def _poisson_arrivals(spec, rng):
    """Exponential gaps at ``arrival_rate`` per second, independent of service."""
    mean_gap = 1000.0 / spec.arrival_rate
    if spec.total_requests is not None:
        return np.cumsum(rng.exponential(mean_gap, size=spec.total_requests))
    horizon = spec.duration_s * 1000.0
    chunks = []
    last = 0.0
    while last < horizon:
        gaps = rng.exponential(mean_gap, size=_CHUNK)
        chunk = last + np.cumsum(gaps)
        chunks.append(chunk)
        last = float(chunk[-1])
    arrivals = np.concatenate(chunks)
    return arrivals[arrivals < horizon]


class ExternalBackend:
    """Replays recorded samples; one JSON object per line with
    ``ts``, ``kind``, ``value`` and ``instance``."""

    name = "external"

    def __init__(self, path):
        self.path = Path(path)

    def load(self, capacity_mib: Optional[float] = None):
        series = {tm.LATENCY: [], tm.POWER: [], tm.GRACT: [], tm.FB: []}
        with open(self.path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                if not raw.strip():
                    continue
                try:
                    rec = json.loads(raw)
                    ts, kind, value = float(rec["ts"]), rec["kind"], float(rec["value"])
                except (ValueError, KeyError, TypeError) as exc:
                    raise InvalidSpec(f"{self.path}:{lineno}: bad sample ({exc})") from None
                if kind not in series:
                    raise InvalidSpec(f"{self.path}:{lineno}: unknown sample kind {kind!r}")
                if kind == tm.GRACT and not 0.0 <= value <= 1.0:
                    raise InvalidSpec(f"{self.path}:{lineno}: gract_frac {value} outside [0, 1]")
                if kind == tm.FB and capacity_mib is not None and value > capacity_mib:
                    raise InvalidSpec(f"{self.path}:{lineno}: fb_mib {value} exceeds {capacity_mib} MiB")
                series[kind].append((ts, value))
        for points in series.values():
            points.sort()
        return series

    def execute(self, ctx) -> RunTrace:
        series = self.load(ctx.capacity_mib)
        lat = series[tm.LATENCY]
        completions = [t for t, _ in lat]
        sample_ts = sorted({t for k in (tm.POWER, tm.GRACT, tm.FB) for t, _ in series[k]})
        lookup = {k: dict(series[k]) for k in (tm.POWER, tm.GRACT, tm.FB)}
        missing = [k for k in lookup if len(lookup[k]) != len(sample_ts)]
        if missing:
            raise InvalidSpec(f"{self.path}: resource samples must share timestamps ({', '.join(missing)})")
        end = max(completions[-1] if completions else 0.0, sample_ts[-1] if sample_ts else 0.0)
        return RunTrace(
            latency_ts=completions,
            latency_ms=[v for _, v in lat],
            sample_ts=sample_ts,
            gract=[lookup[tm.GRACT][t] for t in sample_ts],
            power=[lookup[tm.POWER][t] for t in sample_ts],
            fb=[lookup[tm.FB][t] for t in sample_ts],
            warmup_end_ts=warmup_end(completions, ctx.spec.warmup_s, ctx.spec.warmup_batches),
            end_ts=end,
            issued=len(completions),
            served=len(completions),
        )


BACKENDS = {"sim": SimBackend, "external": ExternalBackend}
