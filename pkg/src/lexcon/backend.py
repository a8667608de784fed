"""Text-generation backends behind one ``generate(request)`` interface."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Protocol, Union

import httpx

logger = logging.getLogger(__name__)

API_KEY_ENV = "LEXCON_API_KEY"
ROLES = ("system", "user", "assistant")

# Grid minimum; the chat-completions wire format has no true greedy switch.
GREEDY_TEMPERATURE = 0.05


class BackendError(RuntimeError):
    """Base class for generation failures. ``payload`` holds the raw upstream body."""

    def __init__(self, message: str, payload: Any = None):
        super().__init__(message)
        self.payload = payload


class AuthenticationError(BackendError):
    pass


class RateLimitError(BackendError):
    pass


class MalformedResponseError(BackendError):
    pass


class TransportError(BackendError):
    pass


class QueueExhaustedError(BackendError):
    pass


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 1.0
    top_k: Optional[int] = None
    top_p: float = 1.0
    max_tokens: int = 256
    seed: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.temperature <= 1:
            raise ValueError(f"temperature must be in (0, 1], got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError(f"top_k must be a positive integer, got {self.top_k}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")

    @classmethod
    def greedy(cls, **kw) -> "DecodingParams":
        return cls(temperature=GREEDY_TEMPERATURE, top_k=1, **kw)

    def replace(self, **changes) -> "DecodingParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        """Set fields only; unset ``top_k``/``seed`` are omitted."""
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "DecodingParams":
        return cls(**d)


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class GenerationRequest:
    """One chat call.

    ``keywords``, ``attempt``, ``purpose`` and ``source_text`` are local
    metadata, never sent upstream: the keyword surfaces in prompt order (used
    by the synthetic model), the 0-based call index within a strategy run,
    ``"generate"`` or ``"rewrite"``, and the text a rewrite starts from.
    """

    messages: tuple[Message, ...]
    params: DecodingParams = DecodingParams()
    model_id: str = ""
    keywords: tuple[str, ...] = ()
    attempt: int = 0
    purpose: str = "generate"
    source_text: str = ""

    def __post_init__(self):
        if not self.messages:
            raise ValueError("request needs at least one message")
        if self.messages[-1].role != "user":
            raise ValueError("last message must have role 'user'")

    @classmethod
    def from_prompt(cls, prompt: str, **kw) -> "GenerationRequest":
        return cls(messages=(Message("user", prompt),), **kw)

    @property
    def prompt(self) -> str:
        return self.messages[-1].content

    def cache_key(self) -> str:
        body = {
            "model_id": self.model_id,
            "messages": [[m.role, m.content] for m in self.messages],
            "params": self.params.to_dict(),
            "attempt": self.attempt,
            "purpose": self.purpose,
        }
        blob = json.dumps(body, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class GenerationResult:
    text: str
    latency_ms: float = 0.0
    prompt_tokens: Optional[int] = None
    completion_tokens: Optional[int] = None
    backend_id: str = ""
    attempt: int = 0
    cached: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationResult":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Backend(Protocol):
    backend_id: str
    supports_top_k: bool

    def generate(self, request: GenerationRequest) -> GenerationResult: ...


class ScriptedBackend:
    """Replays queued responses in order.

    Items may be strings or exceptions (raised when reached). With ``echo`` set,
    an empty queue falls back to echoing the request's keywords instead of
    raising.
    """

    supports_top_k = True

    def __init__(self, responses: Iterable[Union[str, BaseException]] = (), *, echo: bool = False,
                 backend_id: str = "scripted"):
        self._queue = deque(responses)
        self._lock = threading.Lock()
        self.echo = echo
        self.backend_id = backend_id
        self.requests: list[GenerationRequest] = []

    def push(self, *responses: Union[str, BaseException]) -> None:
        with self._lock:
            self._queue.extend(responses)

    @property
    def remaining(self) -> int:
        return len(self._queue)

    @property
    def calls(self) -> int:
        return len(self.requests)

    def generate(self, request: GenerationRequest) -> GenerationResult:
        with self._lock:
            self.requests.append(request)
            if self._queue:
                item = self._queue.popleft()
            elif self.echo:
                item = echo_text(request)
            else:
                raise QueueExhaustedError("scripted backend has no queued responses")
        if isinstance(item, BaseException):
            raise item
        return GenerationResult(text=item, backend_id=self.backend_id, attempt=request.attempt)


def echo_text(request: GenerationRequest) -> str:
    if request.purpose != "generate":
        return request.source_text
    return "This text mentions " + ", ".join(request.keywords) + "."


class HTTPBackend:
    """Client for an OpenAI-compatible ``/v1/chat/completions`` endpoint.

    Transport errors, 429 and 5xx responses are retried with exponential
    backoff; 401/403 fail immediately. ``max_in_flight`` bounds concurrent
    requests when one instance is shared across worker threads.
    """

    def __init__(
        self,
        base_url: str,
        model_id: str,
        api_key: Optional[str] = None,
        *,
        supports_top_k: bool = False,
        max_retries: int = 4,
        backoff_s: float = 0.5,
        max_backoff_s: float = 30.0,
        timeout_s: float = 60.0,
        max_in_flight: int = 8,
        client: Optional[httpx.Client] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_id = model_id
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.supports_top_k = supports_top_k
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.max_backoff_s = max_backoff_s
        self.backend_id = f"http:{model_id}"
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._client = client or httpx.Client(timeout=timeout_s)

    @property
    def url(self) -> str:
        if self.base_url.endswith("/v1"):
            return self.base_url + "/chat/completions"
        return self.base_url + "/v1/chat/completions"

    def payload(self, request: GenerationRequest) -> dict:
        p = request.params
        body: dict[str, Any] = {
            "model": request.model_id or self.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": p.temperature,
            "top_p": p.top_p,
            "max_tokens": p.max_tokens,
        }
        if p.top_k is not None and self.supports_top_k:
            body["top_k"] = p.top_k
        if p.seed is not None:
            # distinct attempts must be able to differ under a fixed seed
            body["seed"] = p.seed + request.attempt
        return body

    def _headers(self) -> dict:
        h = {"Content-Type": "application/json"}
        if self.api_key:
            h["Authorization"] = f"Bearer {self.api_key}"
        return h

    def _sleep(self, attempt: int, retry_after: Optional[str] = None) -> None:
        delay = min(self.max_backoff_s, self.backoff_s * 2 ** attempt)
        if retry_after:
            try:
                delay = min(self.max_backoff_s, max(delay, float(retry_after)))
            except ValueError:
                pass
        time.sleep(delay)

    def generate(self, request: GenerationRequest) -> GenerationResult:
        body = self.payload(request)
        last: Optional[BackendError] = None
        with self._slots:
            for attempt in range(self.max_retries + 1):
                t0 = time.perf_counter()
                try:
                    resp = self._client.post(self.url, json=body, headers=self._headers())
                except httpx.TransportError as e:
                    last = TransportError(f"transport failure: {e}")
                    if attempt < self.max_retries:
                        self._sleep(attempt)
                    continue
                latency = (time.perf_counter() - t0) * 1000
                status = resp.status_code
                if status in (401, 403):
                    raise AuthenticationError(f"upstream rejected credentials ({status})", resp.text)
                if status == 429 or status >= 500:
                    cls = RateLimitError if status == 429 else TransportError
                    last = cls(f"upstream returned {status} after {attempt + 1} attempts", resp.text)
                    if attempt < self.max_retries:
                        self._sleep(attempt, resp.headers.get("retry-after"))
                    continue
                if status >= 400:
                    raise BackendError(f"upstream returned {status}", resp.text)
                return self._parse(resp, latency, request)
        assert last is not None
        raise last

    def _parse(self, resp: httpx.Response, latency: float, request: GenerationRequest) -> GenerationResult:
        try:
            data = resp.json()
            content = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise MalformedResponseError(f"malformed completion response: {e!r}", resp.text) from None
        if not isinstance(content, str):
            raise MalformedResponseError("completion content is not a string", resp.text)
        usage = data.get("usage") or {}
        return GenerationResult(
            text=content,
            latency_ms=latency,
            prompt_tokens=usage.get("prompt_tokens"),
            completion_tokens=usage.get("completion_tokens"),
            backend_id=self.backend_id,
            attempt=request.attempt,
        )

    def close(self) -> None:
        self._client.close()


class CachedBackend:
    """Content-addressed on-disk cache in front of another backend.

    One JSON file per request key. Unreadable entries count as misses and are
    overwritten. Writes go to a temp file that is renamed into place.
    """

    def __init__(self, inner: Backend, cache_dir: str | Path):
        self.inner = inner
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.backend_id = inner.backend_id
        self.supports_top_k = getattr(inner, "supports_top_k", False)
        self.hits = 0
        self.misses = 0

    def path_for(self, request: GenerationRequest) -> Path:
        return self.cache_dir / f"{request.cache_key()}.json"

    def generate(self, request: GenerationRequest) -> GenerationResult:
        path = self.path_for(request)
        if path.exists():
            try:
                stored = json.loads(path.read_text(encoding="utf-8"))
                result = GenerationResult.from_dict(stored["result"])
                self.hits += 1
                return dataclasses.replace(result, cached=True)
            except (ValueError, KeyError, TypeError) as e:
                logger.warning("corrupt cache entry %s (%s); refetching", path.name, e)
        self.misses += 1
        result = self.inner.generate(request)
        self._write(path, request, result)
        return result

    def _write(self, path: Path, request: GenerationRequest, result: GenerationResult) -> None:
        entry = {"model_id": request.model_id, "prompt": request.prompt, "result": result.to_dict()}
        fd, tmp = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(entry, f, ensure_ascii=False)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise


def with_cache(backend: Backend, cache_dir: str | Path) -> CachedBackend:
    return CachedBackend(backend, cache_dir)
