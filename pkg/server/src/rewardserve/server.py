"""HTTP listener implementing the reward wire protocol.

Routes:
    POST /v1/score              {"prompt", "response"}                 -> {"reward"}
    POST /v1/score_contrastive  {"prompt", "response_a", "response_b"} -> {"reward"}
    GET  /v1/healthz                                                   -> {"status", "model_fingerprint"}

Contrastive scoring is the pointwise difference, computed server-side so
the arithmetic matches a client doing score(a) - score(b) bit for bit.
Every error response carries {"error": str}: 400 malformed body, 401 bad
or missing bearer token, 404 unknown path, 405 wrong method, 500 model
failure. Requests are served on a thread per connection; the model handle
is never mutated after startup.
"""

from __future__ import annotations

import json
import os
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .models import ModelError

SCORE_FIELDS = ("prompt", "response")
CONTRASTIVE_FIELDS = ("prompt", "response_a", "response_b")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    # set by make_handler
    model = None
    bearer_token_env: str | None = None

    def log_message(self, format, *args):  # noqa: A002 - stdlib signature
        pass

    def _send(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _authorized(self) -> bool:
        if not self.bearer_token_env:
            return True
        expected = os.environ.get(self.bearer_token_env, "")
        got = self.headers.get("Authorization", "")
        return bool(expected) and got == f"Bearer {expected}"

    def _read_body(self, fields: tuple[str, ...]) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        try:
            body = json.loads(raw)
        except (ValueError, UnicodeDecodeError) as exc:
            raise ValueError(f"body is not valid JSON: {exc}") from exc
        if not isinstance(body, dict):
            raise ValueError("body must be a JSON object")
        for field in fields:
            if field not in body:
                raise ValueError(f"missing required field {field!r}")
            if not isinstance(body[field], str):
                raise ValueError(f"field {field!r} must be a string")
        return body

    def do_GET(self):
        if self.path != "/v1/healthz":
            self._send(404, {"error": f"no such path: {self.path}"})
            return
        self._send(200, {"status": "ok", "model_fingerprint": self.model.fingerprint()})

    def do_POST(self):
        if self.path == "/v1/score":
            fields = SCORE_FIELDS
        elif self.path == "/v1/score_contrastive":
            fields = CONTRASTIVE_FIELDS
        elif self.path == "/v1/healthz":
            self._send(405, {"error": "healthz is GET only"})
            return
        else:
            self._send(404, {"error": f"no such path: {self.path}"})
            return
        if not self._authorized():
            self._send(401, {"error": "missing or invalid bearer token"})
            return
        try:
            body = self._read_body(fields)
        except ValueError as exc:
            self._send(400, {"error": str(exc)})
            return
        try:
            if fields is SCORE_FIELDS:
                payload = self.model.score(body["prompt"], body["response"])
            else:
                a = self.model.score(body["prompt"], body["response_a"])
                b = self.model.score(body["prompt"], body["response_b"])
                payload = {"reward": a["reward"] - b["reward"]}
                if "truncated" in a or "truncated" in b:
                    payload["truncated"] = bool(
                        a.get("truncated") or b.get("truncated")
                    )
        except ModelError as exc:
            self._send(500, {"error": str(exc)})
            return
        self._send(200, payload)


def make_handler(model, bearer_token_env: str | None = None) -> type:
    return type(
        "BoundHandler",
        (_Handler,),
        {"model": model, "bearer_token_env": bearer_token_env},
    )


def create_server(
    host: str,
    port: int,
    model,
    bearer_token_env: str | None = None,
) -> ThreadingHTTPServer:
    """Bind the listener; raises OSError if the port is taken."""
    server = ThreadingHTTPServer((host, port), make_handler(model, bearer_token_env))
    server.daemon_threads = True
    return server


def serve(host: str, port: int, model, bearer_token_env: str | None = None) -> None:
    server = create_server(host, port, model, bearer_token_env)
    try:
        server.serve_forever()
    finally:
        server.server_close()
