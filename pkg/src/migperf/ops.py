"""Operation table shared by the CLI and the HTTP API.

Each operation names its HTTP route and the engine call behind it. The CLI
maps subcommands onto operation names, so anything the CLI can do is
reachable over HTTP with the same payload, and vice versa.
"""

from __future__ import annotations

import json
import re
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass
from typing import Any, Callable, Optional

from . import errors
from .errors import InvalidSpec, MigPerfError

JSON = "application/json"
CSV = "text/csv; charset=utf-8"
PROM = "text/plain; version=0.0.4; charset=utf-8"


def _flag(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("1", "true", "yes", "on"):
        return True
    if isinstance(value, str) and value.lower() in ("0", "false", "no", "off"):
        return False
    raise InvalidSpec(f"expected a boolean, got {value!r}")


def _required(params: dict, name: str):
    if params.get(name) is None:
        raise InvalidSpec(f"missing parameter {name!r}")
    return params[name]


@dataclass(frozen=True)
class Operation:
    name: str
    method: str
    path: str
    call: Callable[[Any, dict], Any]
    content_type: str = JSON
    # parameter that receives the whole JSON request body
    body: Optional[str] = None

    @property
    def pattern(self) -> re.Pattern:
        return re.compile("^" + re.sub(r"\{(\w+)\}", r"(?P<\1>[^/]+)", self.path) + "$")

    @property
    def path_params(self) -> list[str]:
        return re.findall(r"\{(\w+)\}", self.path)

    def url_path(self, params: dict) -> str:
        return re.sub(
            r"\{(\w+)\}",
            lambda m: urllib.parse.quote(str(_required(params, m.group(1))), safe=""),
            self.path,
        )


def _report(engine, p):
    return engine.report(_required(p, "figure_id"), p.get("runs"), p.get("group")).to_dict()


OPERATIONS = [
    Operation("device.list", "GET", "/v1/devices", lambda e, p: e.list_devices()),
    Operation("device.show", "GET", "/v1/devices/{device_id}", lambda e, p: e.device_state(p["device_id"])),
    Operation("mig.set", "POST", "/v1/devices/{device_id}/mig", lambda e, p: e.set_mig(p["device_id"], _flag(_required(p, "enabled")))),
    Operation("mps.set", "POST", "/v1/devices/{device_id}/mps", lambda e, p: e.set_mps(p["device_id"], _flag(_required(p, "enabled")))),
    Operation("mig.ls", "GET", "/v1/devices/{device_id}/instances", lambda e, p: e.list_instances(p["device_id"])),
    Operation(
        "mig.create",
        "POST",
        "/v1/devices/{device_id}/instances",
        lambda e, p: e.create_gi(p["device_id"], _required(p, "profile"), p.get("start")),
    ),
    Operation("mig.destroy", "DELETE", "/v1/devices/{device_id}/instances/{gi_id}", lambda e, p: e.destroy_gi(p["device_id"], p["gi_id"])),
    Operation(
        "mig.ci_create",
        "POST",
        "/v1/devices/{device_id}/instances/{gi_id}/compute",
        lambda e, p: e.create_ci(p["device_id"], p["gi_id"], _required(p, "slices")),
    ),
    Operation(
        "mig.ci_destroy",
        "DELETE",
        "/v1/devices/{device_id}/instances/{gi_id}/compute/{ci_id}",
        lambda e, p: e.destroy_ci(p["device_id"], p["gi_id"], p["ci_id"]),
    ),
    Operation(
        "mig.plan",
        "POST",
        "/v1/devices/{device_id}/partitions",
        lambda e, p: e.apply_plan(p["device_id"], _required(p, "target"), p.get("strategy") or "strict"),
    ),
    Operation(
        "mig.check",
        "GET",
        "/v1/devices/{device_id}/feasibility",
        lambda e, p: e.validate(p["device_id"], _required(p, "target")),
    ),
    Operation(
        "bench.submit",
        "POST",
        "/v1/benchmarks",
        lambda e, p: e.submit(_required(p, "config"), p.get("kind"), p.get("type")),
        body="config",
    ),
    Operation("bench.status", "GET", "/v1/benchmarks/{run_id}", lambda e, p: e.run_status(p["run_id"])),
    Operation("bench.group", "GET", "/v1/groups/{group_id}", lambda e, p: e.group(p["group_id"])),
    Operation(
        "export.csv",
        "GET",
        "/v1/export/csv",
        lambda e, p: e.export_csv(p.get("runs"), p.get("kind") or "summaries"),
        content_type=CSV,
    ),
    Operation("export.prom", "GET", "/metrics", lambda e, p: e.export_prometheus(run_ids=p.get("runs")), content_type=PROM),
    Operation("report", "GET", "/v1/reports/{figure_id}", _report),
]

BY_NAME = {op.name: op for op in OPERATIONS}


def match(method: str, path: str):
    """``(operation, path params)`` for a request, or ``(None, allowed methods)``."""
    allowed = []
    for op in OPERATIONS:
        m = op.pattern.match(path)
        if m is None:
            continue
        if op.method == method:
            return op, {k: urllib.parse.unquote(v) for k, v in m.groupdict().items()}
        allowed.append(op.method)
    return None, allowed


@dataclass
class CommandResult:
    status: str
    payload: Any = None
    message: str = ""
    error: Optional[MigPerfError] = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


class LocalClient:
    """Runs operations against an in-process engine."""

    def __init__(self, engine):
        self.engine = engine

    def call(self, name: str, params: dict):
        return BY_NAME[name].call(self.engine, params)

    def wait(self, run_ids, poll_s: float = 0.0) -> None:
        self.engine.wait(run_ids)

    def close(self) -> None:
        self.engine.close()


def error_from_body(status: int, body: bytes) -> MigPerfError:
    try:
        doc = json.loads(body.decode("utf-8"))
        code, message = doc["code"], doc["message"]
    except (ValueError, KeyError, TypeError):
        return MigPerfError(f"HTTP {status}: {body[:200].decode('utf-8', 'replace')}")
    for value in vars(errors).values():
        if isinstance(value, type) and issubclass(value, MigPerfError) and value.code == code:
            return value(message, **doc.get("details", {}))
    exc = MigPerfError(message)
    exc.status, exc.code = status, code
    return exc


class RemoteClient:
    """Runs operations against a daemon started with ``serve``."""

    def __init__(self, base_url: str, timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def call(self, name: str, params: dict):
        op = BY_NAME[name]
        rest = {k: v for k, v in params.items() if k not in op.path_params and v is not None}
        url = self.base_url + op.url_path(params)
        data = None
        if op.body is not None:
            data = json.dumps(rest.pop(op.body)).encode()
        elif op.method != "GET" and rest:
            data = json.dumps(rest).encode()
            rest = {}
        if rest:
            url += "?" + urllib.parse.urlencode({k: ",".join(v) if isinstance(v, list) else v for k, v in rest.items()})
        req = urllib.request.Request(url, data=data, method=op.method)
        if data is not None:
            req.add_header("Content-Type", JSON)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read()
        except urllib.error.HTTPError as exc:
            raise error_from_body(exc.code, exc.read()) from None
        except urllib.error.URLError as exc:
            raise MigPerfError(f"cannot reach {self.base_url}: {exc.reason}") from None
        if op.content_type != JSON:
            return body.decode("utf-8")
        return json.loads(body.decode("utf-8"))

    def wait(self, run_ids, poll_s: float = 0.2) -> None:
        pending = list(run_ids)
        while pending:
            pending = [r for r in pending if self.call("bench.status", {"run_id": r})["status"] in ("pending", "running")]
            if pending:
                time.sleep(poll_s)

    def close(self) -> None:
        pass
