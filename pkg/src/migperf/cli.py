"""``migperf`` command line.

Talks to an in-process engine rooted at ``--workdir`` by default, or to a
daemon when ``--remote URL`` is given. Exit status is 0 on success, 1 on an
operational error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import InvalidSpec, MigPerfError
from .ops import BY_NAME, JSON, CommandResult, LocalClient, RemoteClient

WORKDIR_ENV = "MIGPERF_WORKDIR"
DEFAULT_WORKDIR = ".migperf"


# -- rendering -------------------------------------------------------------


def table(rows: list[dict], columns: list[str]) -> str:
    if not rows:
        return "(none)"
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines)


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.4g}"
    if isinstance(value, list):
        return ",".join(_fmt(v) for v in value) or "-"
    return str(value)


def _render_devices(rows):
    for r in rows:
        r["profiles"] = ",".join(r["profiles"])
    return table(
        rows,
        ["device_id", "model_name", "total_compute_slices", "total_memory_gib", "mig_enabled", "sharing_mode", "instances", "profiles"],
    )


def _render_instances(rows):
    for r in rows:
        r["compute_instances"] = [f"ci{c['ci_id']}:{c['slices']}" for c in r["compute_instances"]]
    return table(rows, ["gi_id", "profile", "start", "compute_slices", "memory_gib", "compute_instances", "bound_workload"])


def _render_plan(script):
    lines = []
    for step in script["steps"]:
        if step["op"] == "destroy":
            lines.append(f"destroy gi {step['gi_id']} ({step['profile']} @ slice {step['start']})")
        else:
            lines.append(f"create  {step['profile']} @ slice {step['start']} -> gi {step.get('gi_id')}")
    if not lines:
        lines.append("already in target configuration")
    if script["dropped"]:
        lines.append("dropped: " + ", ".join(script["dropped"]))
    return "\n".join(lines)


def _render_status(rows):
    flat = []
    for r in rows:
        s = r.get("summary") or {}
        flat.append(
            {
                "run_id": r["run_id"],
                "status": r["status"],
                "arm": r.get("arm"),
                "profile": r.get("profile"),
                "avg_ms": s.get("avg_latency_ms"),
                "p99_ms": s.get("p99_latency_ms"),
                "batch_per_s": s.get("throughput_batch_per_s"),
                "gract": s.get("mean_gract_frac"),
                "energy_mj": s.get("energy_mj"),
            }
        )
    return table(flat, ["run_id", "status", "arm", "profile", "avg_ms", "p99_ms", "batch_per_s", "gract", "energy_mj"])


def _render_record(doc):
    if isinstance(doc, dict):
        return "\n".join(f"{k}: {json.dumps(v) if isinstance(v, dict) else _fmt(v)}" for k, v in doc.items())
    return str(doc)


RENDERERS = {
    "device.list": _render_devices,
    "mig.ls": _render_instances,
    "mig.plan": _render_plan,
}


# -- grammar ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="machine-readable output")

    parser = argparse.ArgumentParser(prog="migperf", description="Partition, benchmark and report on MIG devices.")
    parser.add_argument("--json", action="store_true", help="machine-readable output")
    parser.add_argument("--remote", metavar="URL", help="talk to a daemon instead of the local workdir")
    parser.add_argument("--workdir", default=os.environ.get(WORKDIR_ENV, DEFAULT_WORKDIR), help="local state directory")
    parser.add_argument("--catalog", help="device catalog JSON (default: $MIGPERF_CATALOG or the bundled one)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    groups = parser.add_subparsers(dest="group", required=True, metavar="COMMAND")

    def leaf(sub, name, op, build, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(op=op, build=build)
        return p

    device = groups.add_parser("device", help="inspect devices").add_subparsers(dest="action", required=True)
    leaf(device, "list", "device.list", lambda a: {}, "list catalog devices")
    p = leaf(device, "show", "device.show", lambda a: {"device_id": a.device}, "show one device's state")
    p.add_argument("--device", type=int, required=True)

    mig = groups.add_parser("mig", help="manage MIG partitions").add_subparsers(dest="action", required=True)
    for name, enabled in (("enable", True), ("disable", False)):
        p = leaf(mig, name, "mig.set", lambda a, e=enabled: {"device_id": a.device, "enabled": e}, f"{name} MIG mode")
        p.add_argument("--device", type=int, required=True)
    p = leaf(mig, "create", "mig.create", lambda a: {"device_id": a.device, "profile": a.profile, "start": a.start}, "create a GPU instance")
    p.add_argument("--device", type=int, required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--start", type=int)
    p = leaf(mig, "destroy", "mig.destroy", lambda a: {"device_id": a.device, "gi_id": a.gi}, "destroy a GPU instance")
    p.add_argument("--device", type=int, required=True)
    p.add_argument("--gi", type=int, required=True)
    p = leaf(
        mig, "ci-create", "mig.ci_create", lambda a: {"device_id": a.device, "gi_id": a.gi, "slices": a.slices}, "create a compute instance"
    )
    p.add_argument("--device", type=int, required=True)
    p.add_argument("--gi", type=int, required=True)
    p.add_argument("--slices", type=int, required=True)
    p = leaf(
        mig, "ci-destroy", "mig.ci_destroy", lambda a: {"device_id": a.device, "gi_id": a.gi, "ci_id": a.ci}, "destroy a compute instance"
    )
    p.add_argument("--device", type=int, required=True)
    p.add_argument("--gi", type=int, required=True)
    p.add_argument("--ci", type=int, required=True)
    p = leaf(
        mig,
        "plan",
        "mig.plan",
        lambda a: {"device_id": a.device, "target": _split(a.target), "strategy": a.strategy},
        "reconfigure a device to a target profile multiset",
    )
    p.add_argument("--device", type=int, required=True)
    p.add_argument("--target", required=True, help='comma-separated profiles, e.g. "3g.40gb,2g.20gb"')
    p.add_argument("--strategy", choices=("strict", "best_effort"), default="strict")
    p = leaf(mig, "check", "mig.check", lambda a: {"device_id": a.device, "target": _split(a.target)}, "check whether a target fits")
    p.add_argument("--device", type=int, required=True)
    p.add_argument("--target", required=True)
    p = leaf(mig, "ls", "mig.ls", lambda a: {"device_id": a.device}, "list GPU instances")
    p.add_argument("--device", type=int, required=True)

    mps = groups.add_parser("mps", help="toggle MPS sharing").add_subparsers(dest="action", required=True)
    for name, enabled in (("enable", True), ("disable", False)):
        p = leaf(mps, name, "mps.set", lambda a, e=enabled: {"device_id": a.device, "enabled": e}, f"{name} MPS mode")
        p.add_argument("--device", type=int, required=True)

    bench = groups.add_parser("bench", help="run benchmarks").add_subparsers(dest="action", required=True)
    for name, kind, ctype, help_ in (
        ("train", "training", "run", "run one training workload"),
        ("infer", "inference", "run", "run one inference workload"),
        ("sweep", None, "sweep", "run a parameter sweep"),
        ("compare", None, "compare", "run a MIG vs MPS comparison"),
    ):
        p = leaf(
            bench,
            name,
            "bench.submit",
            lambda a, k=kind, t=ctype: {"config": _load_config(a.config), "kind": k, "type": t},
            help_,
        )
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--no-wait", action="store_true", help="return as soon as the runs are queued")
    p = leaf(bench, "status", "bench.status", lambda a: {"run_id": a.run_id}, "show a run's status and summary")
    p.add_argument("run_id")
    p = leaf(bench, "group", "bench.group", lambda a: {"group_id": a.group_id}, "show a sweep or comparison")
    p.add_argument("group_id")

    export = groups.add_parser("export", help="export results").add_subparsers(dest="action", required=True)
    p = leaf(export, "csv", "export.csv", lambda a: {"runs": _runs(a.runs), "kind": a.kind}, "CSV of summaries or raw samples")
    p.add_argument("--runs", nargs="*", default=[], help="run ids (default: every complete run)")
    p.add_argument("--kind", choices=("summaries", "raw"), default="summaries")
    p.add_argument("--out", help="write to a file instead of standard output")
    p = leaf(export, "prom", "export.prom", lambda a: {"runs": _runs(a.runs)}, "Prometheus text exposition")
    p.add_argument("--runs", nargs="*", default=[], help="run ids (default: every complete run)")
    p.add_argument("--out", help="write to a file instead of standard output")

    p = leaf(groups, "report", "report", lambda a: {"figure_id": a.figure, "runs": _runs(a.runs), "group": a.group}, "build a figure dataset")
    p.add_argument("--figure", required=True)
    p.add_argument("--out", help="CSV output file (default: standard output)")
    p.add_argument("--group", help="sweep/comparison group (default: newest matching)")
    p.add_argument("--runs", nargs="*", default=[])

    p = groups.add_parser("serve", parents=[common], help="start the HTTP daemon")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(op=None)
    return parser


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _runs(values) -> list[str]:
    return [r for v in values or [] for r in _split(v)]


def _load_config(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise InvalidSpec(f"cannot read config {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise InvalidSpec(f"{path}: invalid JSON ({exc})") from None


# -- dispatch --------------------------------------------------------------


def _client(args):
    if args.remote:
        return RemoteClient(args.remote)
    from .engine import Engine

    return LocalClient(Engine(args.workdir, args.catalog))


def _render(op_name: str, payload, as_json: bool) -> str:
    if BY_NAME[op_name].content_type != JSON:
        return payload
    if as_json:
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"
    render = RENDERERS.get(op_name)
    if render is not None:
        return render(payload) + "\n"
    if op_name == "bench.status":
        return _render_status([payload]) + "\n"
    if isinstance(payload, list):
        return "\n".join(_render_record(r) for r in payload) + "\n"
    return _render_record(payload) + "\n"


def _bench(client, params, args) -> CommandResult:
    payload = client.call("bench.submit", params)
    if args.no_wait:
        return CommandResult("ok", payload, _render("bench.submit", payload, args.json))
    client.wait(payload["run_ids"])
    statuses = [client.call("bench.status", {"run_id": r}) for r in payload["run_ids"]]
    failed = [s for s in statuses if s["status"] != "complete"]
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n" if args.json else _render_status(statuses) + "\n"
    if failed:
        first = next((s for s in failed if s["status"] == "failed"), failed[0])
        return CommandResult("error", payload, f"run {first['run_id']} {first['status']}: {first.get('error')}")
    return CommandResult("ok", payload, text)


def cli_dispatch(argv=None) -> CommandResult:
    """Parse and run one command. Usage errors raise SystemExit(2)."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.op is None:
        from .engine import Engine
        from .server import serve

        engine = Engine(args.workdir, args.catalog)
        print(f"serving on http://{args.host}:{args.port}", file=sys.stderr)
        serve(engine, args.host, args.port)
        engine.close()
        return CommandResult("ok", None, "")
    try:
        params = args.build(args)
        client = _client(args)
    except MigPerfError as exc:
        return CommandResult("error", None, exc.message, exc)
    try:
        if args.op == "bench.submit":
            return _bench(client, params, args)
        payload = client.call(args.op, params)
        text = _render(args.op, payload, args.json)
        out = getattr(args, "out", None)
        if out:
            if args.op == "report":
                from .export_report import FigureDataset

                text = FigureDataset(payload["figure_id"], payload["columns"], payload["rows"]).to_csv()
            Path(out).write_text(text)
            n = len(payload["rows"]) if args.op == "report" else text.count("\n")
            text = f"wrote {n} {'rows' if args.op == 'report' else 'lines'} to {out}\n"
        elif args.op == "report" and not args.json:
            from .export_report import FigureDataset

            text = FigureDataset(payload["figure_id"], payload["columns"], payload["rows"]).to_csv()
        return CommandResult("ok", payload, text)
    except MigPerfError as exc:
        return CommandResult("error", None, exc.message, exc)
    finally:
        client.close()


def main(argv=None) -> int:
    try:
        result = cli_dispatch(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if result.ok:
        sys.stdout.write(result.message)
        return 0
    argv = sys.argv[1:] if argv is None else argv
    if result.error is not None and "--json" in argv:
        print(json.dumps(result.error.to_dict(), default=str), file=sys.stderr)
    else:
        print(f"error: {result.message}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
