"""Deterministic offline stand-in for the auditor endpoint.

Scores are a fixed digest of the record CSV, so tests can predict every
verdict. Fault injection (5xx bursts, fenced output, invalid scores,
malformed JSON) is keyed per distinct prompt to exercise the retry path.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

__all__ = ["StubBehavior", "StubAuditorServer", "stub_score"]

_CSV_START = "### PATIENT RECORD from the csv\n"
_CSV_END = "\n\n### OUTPUT FORMAT"


def stub_score(csv_text: str) -> int:
    """Deterministic 1-10 score for a record CSV."""
    digest = hashlib.sha256(csv_text.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") % 10 + 1


def _extract_csv(prompt: str) -> str:
    start = prompt.find(_CSV_START)
    end = prompt.find(_CSV_END)
    if start < 0 or end < 0 or end <= start:
        return prompt
    return prompt[start + len(_CSV_START) : end]


@dataclass
class StubBehavior:
    fail_first: int = 0  # respond 500 to the first n attempts per prompt
    fence_output: bool = False  # wrap the JSON verdict in a ``` code fence
    invalid_score_first: int = 0  # return score 11 on the first n attempts
    malformed_first: int = 0  # return non-JSON text on the first n attempts


class _Handler(BaseHTTPRequestHandler):
    server_version = "StubAuditor/1.0"

    def log_message(self, fmt, *args):  # keep test output quiet
        pass

    def do_POST(self):
        if self.path.rstrip("/") != "/chat/completions":
            self.send_error(404)
            return
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length).decode("utf-8"))
        prompt = body["messages"][0]["content"]
        behavior: StubBehavior = self.server.behavior
        attempt = self.server.bump_attempt(prompt)
        self.server.note_request()

        if attempt <= behavior.fail_first:
            self.send_response(500)
            self.end_headers()
            self.wfile.write(b"injected failure")
            return

        if attempt <= behavior.fail_first + behavior.malformed_first:
            content = "the auditor mumbles incoherently"
        else:
            score = stub_score(_extract_csv(prompt))
            if attempt <= behavior.fail_first + behavior.invalid_score_first:
                score = 11
            verdict = json.dumps(
                {"realism_score": score, "reasoning": f"deterministic stub verdict {score}"}
            )
            content = f"```json\n{verdict}\n```" if behavior.fence_output else verdict

        payload = {
            "id": "stub-completion",
            "object": "chat.completion",
            "model": body.get("model", "stub"),
            "choices": [
                {
                    "index": 0,
                    "message": {"role": "assistant", "content": content},
                    "finish_reason": "stop",
                }
            ],
        }
        data = json.dumps(payload).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


class _Server(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, addr, behavior: StubBehavior):
        super().__init__(addr, _Handler)
        self.behavior = behavior
        self._lock = threading.Lock()
        self._attempts: dict[str, int] = {}
        self.request_count = 0

    def bump_attempt(self, prompt: str) -> int:
        key = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        with self._lock:
            self._attempts[key] = self._attempts.get(key, 0) + 1
            return self._attempts[key]

    def note_request(self) -> None:
        with self._lock:
            self.request_count += 1


class StubAuditorServer:
    """Context manager running the stub on an ephemeral localhost port."""

    def __init__(self, behavior: StubBehavior | None = None):
        self.behavior = behavior or StubBehavior()
        self._server: _Server | None = None
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}"

    @property
    def request_count(self) -> int:
        return self._server.request_count

    def __enter__(self) -> "StubAuditorServer":
        self._server = _Server(("127.0.0.1", 0), self.behavior)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)
