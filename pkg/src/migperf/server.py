"""JSON-over-HTTP daemon on the standard library server."""

from __future__ import annotations

import json
import logging
import urllib.parse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .errors import InvalidSpec, MigPerfError
from .ops import JSON, match

log = logging.getLogger(__name__)


class Handler(BaseHTTPRequestHandler):
    server_version = "migperf"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.info("%s - %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: bytes, content_type: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, status: int, doc) -> None:
        self._send(status, (json.dumps(doc, default=str) + "\n").encode("utf-8"), JSON)

    def _params(self, op, path_params: dict, query: str) -> dict:
        params = dict(path_params)
        for key, values in urllib.parse.parse_qs(query, keep_blank_values=True).items():
            params[key] = values[-1]
        length = int(self.headers.get("Content-Length") or 0)
        if length:
            try:
                body = json.loads(self.rfile.read(length).decode("utf-8"))
            except (ValueError, UnicodeDecodeError) as exc:
                raise InvalidSpec(f"request body is not valid JSON: {exc}") from None
            if op.body is not None:
                params[op.body] = body
            elif isinstance(body, dict):
                params.update(body)
            else:
                raise InvalidSpec("request body must be a JSON object")
        return params

    def _dispatch(self, method: str) -> None:
        url = urllib.parse.urlsplit(self.path)
        op, found = match(method, url.path)
        if op is None:
            if found:
                self._send_json(405, {"code": "method_not_allowed", "message": f"{method} not allowed on {url.path}"})
            else:
                self._send_json(404, {"code": "not_found", "message": f"no route for {url.path}"})
            return
        try:
            payload = op.call(self.server.engine, self._params(op, found, url.query))
        except MigPerfError as exc:
            self._send_json(exc.status, exc.to_dict())
            return
        except Exception as exc:
            log.exception("%s %s failed", method, url.path)
            self._send_json(500, {"code": "internal_error", "message": str(exc)})
            return
        if op.content_type == JSON:
            self._send_json(200, payload)
        else:
            self._send(200, payload.encode("utf-8"), op.content_type)

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_DELETE(self):
        self._dispatch("DELETE")

    def do_PUT(self):
        self._dispatch("PUT")

    def do_PATCH(self):
        self._dispatch("PATCH")


class ApiServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, engine, host: str = "127.0.0.1", port: int = 8080):
        self.engine = engine
        super().__init__((host, port), Handler)


def serve(engine, host: str = "127.0.0.1", port: int = 8080) -> None:
    server = ApiServer(engine, host, port)
    log.info("listening on http://%s:%d", *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
