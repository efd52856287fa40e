from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from steersmc import TableModel, UniformModel, Vocabulary, load_table_model


@pytest.fixture
def abc_vocab() -> Vocabulary:
    return Vocabulary.from_tokens(["a", "b", "<eos>"])


@pytest.fixture
def uniform3(abc_vocab) -> UniformModel:
    return UniformModel(abc_vocab)


@pytest.fixture
def table_721() -> TableModel:
    """Three-token table: empty context row [0.7, 0.2, 0.1], row after 'a'."""
    return load_table_model({
        "vocab": ["a", "b", "<eos>"],
        "rows": [
            {"context": [], "dist": [0.7, 0.2, 0.1]},
            {"context": ["a"], "dist": [0.1, 0.6, 0.3]},
        ],
        "default": "uniform",
    })


class _JsonHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length) or b"{}")
        self.server.calls.append((self.path, body))
        status, payload = self.server.respond(self.path, body)
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


class LocalEndpoint:
    """In-process HTTP server for remote-protocol tests."""

    def __init__(self, respond):
        self.server = HTTPServer(("127.0.0.1", 0), _JsonHandler)
        self.server.calls = []
        self.server.respond = respond
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"

    @property
    def calls(self):
        return self.server.calls

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def local_endpoint():
    endpoints = []

    def spawn(respond) -> LocalEndpoint:
        ep = LocalEndpoint(respond)
        endpoints.append(ep)
        return ep

    yield spawn
    for ep in endpoints:
        ep.close()
