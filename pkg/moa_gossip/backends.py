"""推論バックエンド（モックと OpenAI 互換 HTTP クライアント）。

どちらも ``infer(request) -> InferenceResult`` と ``health() -> HealthReport``
を持つ。モックはシミュレーション向けに決定的な応答を返し、HTTP 版は
``POST {base_url}/chat/completions`` を叩いてライブ実行に使う。

環境変数:
    MOA_API_KEY: Bearer トークン（未設定なら Authorization ヘッダーを付けない）
    MOA_API_BASE: base_url 未指定時のエンドポイント
"""

from __future__ import annotations

import hashlib
import logging
import os
import time
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import requests

from .errors import (
    BackendConnectionError,
    BackendDecodeError,
    BackendError,
    BackendHTTPError,
    BackendTimeout,
    ConfigurationError,
)
from .protocol import MessageBundle, count_response_blocks
from .rng import RandomStreams
from .sampling import DELAY_DISTS, sample_duration

logger = logging.getLogger("moa_gossip.backends")

DEFAULT_TEMPERATURE = 0.7
DEFAULT_TIMEOUT = 120.0
DEFAULT_MAX_RETRIES = 3
DEFAULT_BACKOFF_BASE = 0.5
BACKOFF_FACTOR = 2.0
BACKOFF_JITTER = 0.2
RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})
MOCK_TRANSFORMS = ("digest", "echo")
BACKEND_KINDS = ("mock", "http")


@dataclass(frozen=True)
class InferenceRequest:
    """chat-completions 形式のリクエスト。system メッセージは高々 1 つで先頭。"""

    messages: Tuple[Dict[str, str], ...]
    temperature: float = DEFAULT_TEMPERATURE
    model: str = "mock"
    max_tokens: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ConfigurationError("messages", "request must contain at least one message")
        roles = [m.get("role") for m in self.messages]
        if roles.count("system") > 1 or ("system" in roles and roles[0] != "system"):
            raise ConfigurationError("messages", "at most one system message is allowed and it must come first")
        for message in self.messages:
            if message.get("role") not in ("system", "user"):
                raise ConfigurationError("messages", f"unsupported role {message.get('role')!r}")
            if not message.get("content"):
                raise ConfigurationError("messages", "message content must be non-empty")

    @classmethod
    def from_bundle(
        cls,
        bundle: MessageBundle,
        model: str,
        temperature: float = DEFAULT_TEMPERATURE,
        max_tokens: Optional[int] = None,
    ) -> "InferenceRequest":
        messages = tuple({"role": m["role"], "content": m["content"]} for m in bundle.to_messages())
        return cls(messages=messages, temperature=temperature, model=model, max_tokens=max_tokens)

    @property
    def system_text(self) -> Optional[str]:
        first = self.messages[0]
        return first["content"] if first["role"] == "system" else None

    @property
    def user_text(self) -> str:
        return "\n\n".join(m["content"] for m in self.messages if m["role"] == "user")

    def to_body(self) -> Dict[str, Any]:
        body: Dict[str, Any] = {
            "model": self.model,
            "messages": [dict(m) for m in self.messages],
            "temperature": self.temperature,
        }
        if self.max_tokens is not None:
            body["max_tokens"] = self.max_tokens
        return body


@dataclass(frozen=True)
class InferenceResult:
    text: str
    measured_latency: float
    backend_id: str
    attempts: int = 1


@dataclass(frozen=True)
class BackendSpec:
    """ノード 1 台分のバックエンド設定。

    Attributes:
        kind: "mock" または "http"
        delay_dist / delay_mean: モックの応答遅延分布（秒）
        transform: モックの出力形式（digest: ダイジェスト、echo: 入力をそのまま返す）
        realtime: True ならモックが実際にスリープする
        base_url / model / timeout / max_retries / backoff_base: HTTP 用
        temperature / max_tokens: 生成パラメータ（ノードごとに上書き可）
    """

    kind: str = "mock"
    delay_dist: str = "zero"
    delay_mean: float = 0.0
    transform: str = "digest"
    realtime: bool = False
    base_url: Optional[str] = None
    model: str = "mock"
    timeout: float = DEFAULT_TIMEOUT
    max_retries: int = DEFAULT_MAX_RETRIES
    backoff_base: float = DEFAULT_BACKOFF_BASE
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ConfigurationError("backend.kind", f"must be one of {BACKEND_KINDS}, got {self.kind!r}")
        if not self.timeout > 0:
            raise ConfigurationError("backend.timeout", f"must be > 0, got {self.timeout}")
        if self.max_retries < 0:
            raise ConfigurationError("backend.max_retries", f"must be >= 0, got {self.max_retries}")
        if self.backoff_base < 0:
            raise ConfigurationError("backend.backoff_base", f"must be >= 0, got {self.backoff_base}")
        if self.delay_dist not in DELAY_DISTS:
            raise ConfigurationError("backend.delay_dist", f"must be one of {DELAY_DISTS}, got {self.delay_dist!r}")
        if self.delay_dist != "zero" and not self.delay_mean > 0:
            raise ConfigurationError("backend.delay_mean", f"must be > 0 for {self.delay_dist}, got {self.delay_mean}")
        if self.transform not in MOCK_TRANSFORMS:
            raise ConfigurationError("backend.transform", f"must be one of {MOCK_TRANSFORMS}, got {self.transform!r}")
        if self.max_tokens is not None and self.max_tokens < 1:
            raise ConfigurationError("backend.max_tokens", f"must be >= 1, got {self.max_tokens}")

    @property
    def identity(self) -> str:
        if self.kind == "mock":
            return f"mock:{self.model}"
        return f"{self.base_url}#{self.model}"


@dataclass(frozen=True)
class HealthReport:
    backend_id: str
    healthy: bool
    reachable: bool
    model_available: Optional[bool] = None
    rtt: Optional[float] = None
    cause: Optional[str] = None


def stable_digest(text: str) -> str:
    """入力テキストの 64 ビットダイジェスト（16 桁の 16 進）。"""
    return hashlib.blake2b(text.encode("utf-8"), digest_size=8).hexdigest()


class MockBackend:
    """乱数で遅延を決め、入力の決定的な変換を返すバックエンド。"""

    def __init__(self, spec: BackendSpec, node_id: int, seed: int = 0, sleep: Callable[[float], None] = time.sleep) -> None:
        self.spec = spec
        self.node_id = node_id
        self.rng = RandomStreams(seed).generator("mock-backend", node_id)
        self._sleep = sleep

    @property
    def backend_id(self) -> str:
        return f"mock[{self.node_id}]"

    def render(self, request: InferenceRequest) -> str:
        if self.spec.transform == "echo":
            return request.user_text
        text = f"MOCK[{self.node_id}]:{stable_digest(request.user_text)}"
        if request.system_text is not None:
            text += f" blocks={count_response_blocks(request.user_text)}"
        return text

    def infer(self, request: InferenceRequest) -> InferenceResult:
        delay = sample_duration(self.spec.delay_dist, self.spec.delay_mean, self.rng)
        if self.spec.realtime and delay > 0:
            self._sleep(delay)
        return InferenceResult(text=self.render(request), measured_latency=delay, backend_id=self.backend_id)

    def health(self) -> HealthReport:
        return HealthReport(backend_id=self.backend_id, healthy=True, reachable=True, model_available=True, rtt=0.0)


class HttpBackend:
    """OpenAI 互換の chat-completions クライアント。

    429 と 5xx、タイムアウト、接続エラーは指数バックオフ（base × 2^r、±20% の
    ジッター）で再試行する。429 で Retry-After があればバックオフとの大きい方を待つ。
    """

    def __init__(
        self,
        spec: BackendSpec,
        node_id: int = 0,
        seed: int = 0,
        session: Optional[requests.Session] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        base_url = spec.base_url or os.environ.get("MOA_API_BASE")
        if not base_url:
            raise ConfigurationError("backend.base_url", "http backend needs base_url (or MOA_API_BASE)")
        self.spec = spec
        self.node_id = node_id
        self.base_url = base_url.rstrip("/")
        self.session = session or requests.Session()
        api_key = os.environ.get("MOA_API_KEY")
        if api_key:
            self.session.headers["Authorization"] = f"Bearer {api_key}"
        self._jitter_rng = RandomStreams(seed).generator("http-backoff", node_id)
        self._sleep = sleep
        self.sleeps: List[float] = []

    @property
    def backend_id(self) -> str:
        return f"{self.base_url}#{self.spec.model}"

    def backoff_delay(self, attempt: int) -> float:
        bound = self.spec.backoff_base * BACKOFF_FACTOR ** attempt
        jitter = self._jitter_rng.uniform(1.0 - BACKOFF_JITTER, 1.0 + BACKOFF_JITTER)
        return float(bound * jitter)

    def _wait(self, attempt: int, retry_after: Optional[str] = None) -> None:
        wait_seconds = self.backoff_delay(attempt)
        if retry_after:
            try:
                wait_seconds = max(wait_seconds, float(retry_after))
            except ValueError:
                pass
        self.sleeps.append(wait_seconds)
        self._sleep(wait_seconds)

    def _post(self, body: Dict[str, Any]) -> Tuple[requests.Response, int]:
        url = f"{self.base_url}/chat/completions"
        attempt = 0
        while True:
            try:
                response = self.session.post(url, json=body, timeout=self.spec.timeout)
            except requests.Timeout as exc:
                if attempt >= self.spec.max_retries:
                    raise BackendTimeout(f"{url} timed out after {attempt + 1} attempt(s)") from exc
                logger.warning("Timeout calling %s (attempt %d); retrying.", url, attempt + 1)
                self._wait(attempt)
            except requests.ConnectionError as exc:
                if attempt >= self.spec.max_retries:
                    raise BackendConnectionError(f"cannot reach {url}: {exc}") from exc
                logger.warning("Connection error calling %s (attempt %d): %s", url, attempt + 1, exc)
                self._wait(attempt)
            except requests.RequestException as exc:
                # 不正な URL やストリーム途中の切断などは再試行しない
                raise BackendConnectionError(f"request to {url} failed: {type(exc).__name__}: {exc}") from exc
            else:
                status = response.status_code
                if status < 400:
                    return response, attempt + 1
                if status not in RETRYABLE_STATUS or attempt >= self.spec.max_retries:
                    raise BackendHTTPError(
                        f"{url} returned HTTP {status}: {response.text[:200]}", status_code=status
                    )
                logger.warning("HTTP %d from %s (attempt %d); retrying.", status, url, attempt + 1)
                self._wait(attempt, response.headers.get("Retry-After") if status == 429 else None)
            attempt += 1

    def infer(self, request: InferenceRequest) -> InferenceResult:
        started = time.perf_counter()
        response, attempts = self._post(request.to_body())
        elapsed = time.perf_counter() - started
        try:
            data = response.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendDecodeError(f"malformed chat-completion response: {response.text[:200]!r}") from exc
        if not isinstance(text, str) or not text:
            raise BackendDecodeError("chat-completion response has empty content")
        return InferenceResult(
            text=text,
            measured_latency=elapsed,
            backend_id=self.backend_id,
            attempts=attempts,
        )

    def _model_available(self) -> Optional[bool]:
        try:
            response = self.session.get(f"{self.base_url}/models", timeout=self.spec.timeout)
        except requests.RequestException:
            return None
        if response.status_code >= 400:
            return None
        try:
            listed = [entry.get("id") for entry in response.json().get("data", [])]
        except (ValueError, AttributeError):
            return None
        if not listed:
            return None
        return self.spec.model in listed

    def health(self) -> HealthReport:
        """GET /models でモデルの有無、1 トークンの生成で疎通と RTT を確認する。"""
        probe = InferenceRequest(
            messages=({"role": "user", "content": "ping"},),
            temperature=0.0,
            model=self.spec.model,
            max_tokens=1,
        )
        body = probe.to_body()
        url = f"{self.base_url}/chat/completions"
        started = time.perf_counter()
        try:
            response = self.session.post(url, json=body, timeout=self.spec.timeout)
        except requests.RequestException as exc:
            return HealthReport(self.backend_id, healthy=False, reachable=False, cause=f"connection error: {exc}")
        rtt = time.perf_counter() - started
        model_available = self._model_available()
        if response.status_code >= 400:
            return HealthReport(
                self.backend_id,
                healthy=False,
                reachable=True,
                model_available=model_available,
                rtt=rtt,
                cause=f"HTTP {response.status_code}",
            )
        if model_available is False:
            return HealthReport(
                self.backend_id,
                healthy=False,
                reachable=True,
                model_available=False,
                rtt=rtt,
                cause=f"model {self.spec.model!r} not listed by /models",
            )
        return HealthReport(self.backend_id, healthy=True, reachable=True, model_available=model_available, rtt=rtt)


Backend = Union[MockBackend, HttpBackend]


def build_backend(spec: BackendSpec, node_id: int = 0, seed: int = 0, **kwargs: Any) -> Backend:
    if spec.kind == "mock":
        return MockBackend(spec, node_id, seed, **kwargs)
    return HttpBackend(spec, node_id, seed, **kwargs)


def infer(request: InferenceRequest, backend: Union[BackendSpec, Backend]) -> InferenceResult:
    """BackendSpec でもバックエンドオブジェクトでも受け付ける。"""
    if isinstance(backend, BackendSpec):
        backend = build_backend(backend)
    return backend.infer(request)


def validate_backend(backend: Union[BackendSpec, Backend]) -> HealthReport:
    try:
        if isinstance(backend, BackendSpec):
            backend = build_backend(backend)
    except ConfigurationError as exc:
        return HealthReport(backend_id="-", healthy=False, reachable=False, cause=str(exc))
    report = backend.health()
    if report.healthy:
        logger.info("Backend %s healthy (rtt=%s).", report.backend_id, report.rtt)
    else:
        logger.warning("Backend %s unhealthy: %s", report.backend_id, report.cause)
    return report


__all__ = [
    "BackendError",
    "BackendSpec",
    "HealthReport",
    "HttpBackend",
    "InferenceRequest",
    "InferenceResult",
    "MockBackend",
    "build_backend",
    "infer",
    "validate_backend",
    "stable_digest",
]
