"""In-process mock of the remote classify endpoint.

Implements POST /v1/classify over the JSON/base64 wire format and records
every request so tests can assert batch splitting, ordering and cache
behavior. Labels come from a configurable function of the decoded image
batch; the default derives each label from the image's exact 32-bit bytes,
which makes order preservation directly checkable.

Failure modes (for error-path tests):
    "http500"     -> plain 500 response
    "not-json"    -> 200 with a non-JSON body
    "short"       -> one label too few
    "float-labels"-> labels that are not integers
"""

from __future__ import annotations

import base64
import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np


def content_label(image: np.ndarray, n_classes: int = 10) -> int:
    """Deterministic label from the image's float32 byte content."""
    digest = hashlib.sha256(
        np.ascontiguousarray(image, dtype="<f4").tobytes()
    ).digest()
    return int.from_bytes(digest[:4], "little") % n_classes


class MockClassifierServer:
    """Context manager running the mock endpoint on an ephemeral port."""

    def __init__(self, labeler=None, n_classes: int = 10, fail_mode=None):
        self.n_classes = n_classes
        self.labeler = labeler or (
            lambda batch: [content_label(img, n_classes) for img in batch]
        )
        self.fail_mode = fail_mode
        self.requests = []  # list of per-request batch shapes
        self.images_served = 0
        self._lock = threading.Lock()
        self._httpd = None
        self._thread = None

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address
        return f"http://{host}:{port}"

    def _record(self, shape):
        with self._lock:
            self.requests.append(tuple(shape))
            self.images_served += shape[0]

    def __enter__(self):
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _reply(self, status, body: bytes,
                       content_type="application/json"):
                self.send_response(status)
                self.send_header("Content-Type", content_type)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                if self.path != "/v1/classify":
                    self._reply(404, b'{"error": "unknown path"}')
                    return
                length = int(self.headers.get("Content-Length", "0"))
                payload = json.loads(self.rfile.read(length))
                shape = payload["shape"]
                raw = base64.b64decode(payload["data"])
                batch = np.frombuffer(raw, dtype="<f4").reshape(shape)
                outer._record(shape)

                if outer.fail_mode == "http500":
                    self._reply(500, b"simulated server failure",
                                content_type="text/plain")
                    return
                if outer.fail_mode == "not-json":
                    self._reply(200, b"this is not json",
                                content_type="text/plain")
                    return
                labels = outer.labeler(batch)
                if outer.fail_mode == "short":
                    labels = labels[:-1]
                if outer.fail_mode == "float-labels":
                    labels = [float(v) + 0.5 for v in labels]
                self._reply(200, json.dumps({"labels": labels}).encode())

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)
        return False
