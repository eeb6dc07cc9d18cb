import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
import pytest

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def golden_forward():
    """Frozen forward-pass output for the seed-42 net on the fixture image.

    Produced once by tools/make_golden.py and committed; regenerating it
    is only legitimate when the network architecture itself changes.
    """
    path = DATA_DIR / "golden_forward.npz"
    if not path.exists():
        pytest.fail(f"golden file missing: {path} (run tools/make_golden.py)")
    with np.load(path) as data:
        return {"offsets": data["offsets"], "scores": data["scores"]}


class _ScriptedHandler(BaseHTTPRequestHandler):
    """POST handler that replays a scripted status-code sequence."""

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length)
        self.server.requests.append(json.loads(body))
        script = self.server.script
        status = script[min(len(self.server.requests) - 1, len(script) - 1)]
        self.send_response(status)
        self.send_header("Content-Length", "0")
        self.end_headers()

    def log_message(self, *args):
        pass


@pytest.fixture
def fake_endpoint():
    """Factory for fault-injecting local HTTP endpoints.

    ``start([500, 500, 200])`` serves those statuses in order (the last
    repeats) and records request payloads on ``server.requests``.
    """
    servers = []

    def start(script):
        server = ThreadingHTTPServer(("127.0.0.1", 0), _ScriptedHandler)
        server.script = list(script)
        server.requests = []
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        servers.append(server)
        return server, f"http://127.0.0.1:{server.server_address[1]}/hook"

    yield start
    for server in servers:
        server.shutdown()
        server.server_close()
