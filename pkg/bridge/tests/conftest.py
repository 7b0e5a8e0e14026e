"""Shared fixtures: sample files and a controllable fake LLM endpoint."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.jsonl"
    records = [
        {"id": "p1", "text": "the solar corona is far hotter than the photosphere"},
        {"id": "p2", "text": "croissants are laminated with butter before baking"},
        {"id": "p3", "text": "suffix arrays support fast substring containment checks"},
    ]
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


@pytest.fixture
def queries_file(tmp_path):
    path = tmp_path / "queries.jsonl"
    records = [
        {"query_id": "q1", "text": "why is the solar corona so hot"},
        {"query_id": "q2", "text": "how are croissants made"},
    ]
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


class _FakeLlmState:
    def __init__(self):
        self.fail_next = 0          # respond 503 this many times, then succeed
        self.always_fail = False
        self.requests_seen = 0
        self.prompts: list[str] = []


class _Handler(BaseHTTPRequestHandler):
    state: _FakeLlmState

    def do_POST(self):
        state = self.state
        state.requests_seen += 1
        length = int(self.headers.get("Content-Length", "0"))
        payload = json.loads(self.rfile.read(length))
        state.prompts.append(payload["messages"][0]["content"])
        if state.always_fail or state.fail_next > 0:
            if state.fail_next > 0:
                state.fail_next -= 1
            self.send_response(503)
            self.end_headers()
            return
        # deterministic completion: echo a few passage words back
        prompt = payload["messages"][0]["content"]
        last_passage = prompt.rsplit("Passage:", 1)[1].replace("Query:", " ")
        words = [w for w in last_passage.split() if w.isalpha()][:6]
        body = json.dumps(
            {"choices": [{"message": {"content": "about " + " ".join(words)}}]}
        ).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def fake_llm(monkeypatch):
    state = _FakeLlmState()
    handler = type("Handler", (_Handler,), {"state": state})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    port = server.server_address[1]
    monkeypatch.setenv("RETFIT_LLM_BASE_URL", f"http://127.0.0.1:{port}")
    monkeypatch.setenv("RETFIT_LLM_MODEL", "fake-model")
    monkeypatch.setenv("RETFIT_LLM_MAX_RETRIES", "2")
    monkeypatch.setenv("RETFIT_LLM_BACKOFF_BASE", "0.01")
    yield state
    server.shutdown()
    server.server_close()
