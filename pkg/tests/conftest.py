"""テスト共通のフィクスチャ（OpenAI 互換のローカル HTTP サーバーなど）。"""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Dict, List, Optional

import pytest

from moa_gossip.simulator import Injection, MoAConfig


class FixtureState:
    """サーバーの応答を制御し、受け取ったリクエストを記録する。"""

    def __init__(self) -> None:
        self.lock = threading.Lock()
        self.requests: List[Dict[str, Any]] = []
        self.completion = "fixture completion"
        self.models: Optional[List[str]] = ["fixture-model"]
        # 先頭から順に返すステータス (status, headers, body)。空なら正常応答
        self.script: List[tuple] = []
        self.delay = 0.0

    def chat_requests(self) -> List[Dict[str, Any]]:
        with self.lock:
            return [r["body"] for r in self.requests if r["path"].endswith("/chat/completions")]


def _make_handler(state: FixtureState):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, format: str, *args: Any) -> None:  # noqa: A002
            pass

        def _send(self, status: int, body: Any, headers: Optional[Dict[str, str]] = None) -> None:
            payload = body if isinstance(body, bytes) else json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            for key, value in (headers or {}).items():
                self.send_header(key, value)
            self.end_headers()
            self.wfile.write(payload)

        def do_GET(self) -> None:
            with state.lock:
                state.requests.append({"path": self.path, "body": None, "headers": dict(self.headers)})
            if self.path.endswith("/models") and state.models is not None:
                self._send(200, {"object": "list", "data": [{"id": m} for m in state.models]})
            else:
                self._send(404, {"error": "not found"})

        def do_POST(self) -> None:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length) or b"{}")
            with state.lock:
                state.requests.append({"path": self.path, "body": body, "headers": dict(self.headers)})
                scripted = state.script.pop(0) if state.script else None
            if state.delay:
                time.sleep(state.delay)
            if scripted is not None:
                status, headers, payload = scripted
                self._send(status, payload, headers)
                return
            self._send(
                200,
                {
                    "id": "cmpl-fixture",
                    "object": "chat.completion",
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": state.completion}}],
                },
            )

    return Handler


@pytest.fixture
def fixture_server():
    state = FixtureState()
    server = ThreadingHTTPServer(("127.0.0.1", 0), _make_handler(state))
    server.daemon_threads = True
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    state.base_url = f"http://127.0.0.1:{server.server_address[1]}/v1"
    try:
        yield state
    finally:
        server.shutdown()
        server.server_close()


@pytest.fixture
def isolated_config() -> MoAConfig:
    """到着過程を止め、時刻 0 にノード 0 へ 1 件だけ投入する決定的な設定。"""
    return MoAConfig.create(
        n=4,
        k=1,
        M=1,
        lam=1.0,
        alpha=1.0,
        service_dist="deterministic",
        arrival_dist="none",
        horizon=100.0,
        warmup=0.0,
        injections=(Injection(0.0, 0),),
    )


@pytest.fixture
def write_config(tmp_path):
    def _write(text: str, name: str = "config.yaml"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return _write
