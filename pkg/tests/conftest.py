from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

EIGHT_INSTRUCTION = {
    "attribute_name": "sentiment",
    "description_w1": "positive sentiment",
    "description_w0": "negative sentiment",
    "template": "Adjust this response so it's {W}, but change *nothing* else.",
}


def make_eval_config(tmp_path: Path, **over) -> dict:
    """Config dict for the checked-in 8-record fixture, output under tmp."""
    base = {
        "dataset": {
            "path": str(FIXTURES / "eight.jsonl"),
            "attribute_name": "sentiment",
        },
        "instruction": dict(EIGHT_INSTRUCTION),
        "rewriter": {"kind": "scripted", "table_path": str(FIXTURES / "rewrites.json")},
        "reward": {"kind": "mock", "mock": {"kind": "length_scaled", "divisor": 100.0}},
        "estimator": {"ci_level": 0.95},
        "output_dir": str(tmp_path / "runs"),
        "cache_dir": str(tmp_path / "cache"),
        "seed": 7,
        "parallelism": 2,
        "figures": False,
    }
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return base


class ScriptedHttpServer:
    """Local HTTP stub: pops one scripted (status, body) per request.

    A scripted entry may also be a callable (path, payload) -> (status, body)
    so handlers can echo request content. Requests are recorded for
    assertions. When the script runs dry the last entry is repeated.
    """

    def __init__(self, script):
        self.script = list(script)
        self.received: list[tuple[str, dict | None]] = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _respond(self):
                length = int(self.headers.get("Content-Length", 0) or 0)
                payload = None
                if length:
                    try:
                        payload = json.loads(self.rfile.read(length))
                    except json.JSONDecodeError:
                        payload = None
                outer.received.append((self.path, payload))
                entry = outer.script.pop(0) if len(outer.script) > 1 else outer.script[0]
                if callable(entry):
                    status, body = entry(self.path, payload)
                else:
                    status, body = entry
                data = json.dumps(body).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            do_POST = _respond
            do_GET = _respond

        self._server = HTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def http_stub():
    servers = []

    def start(script):
        server = ScriptedHttpServer(script)
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.close()
