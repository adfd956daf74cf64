"""Uniform chat-completion and embedding interface over remote providers.

One wire format (OpenAI-compatible ``/chat/completions`` and ``/embeddings``)
covers every remote model; a deterministic mock backend covers hermetic runs.
All calls go through a persistent content-addressed response cache.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import requests

from .domain import canonical_json

logger = logging.getLogger(__name__)

ENV_API_BASE = "CONQUER_API_BASE"
ENV_API_KEY = "CONQUER_API_KEY"
ENV_JUDGE_API_BASE = "CONQUER_JUDGE_API_BASE"
ENV_JUDGE_API_KEY = "CONQUER_JUDGE_API_KEY"

DEFAULT_API_BASE = "https://api.openai.com/v1"

RETRYABLE_STATUSES = frozenset({408, 429, 500, 502, 503, 504})


class GatewayError(Exception):
    pass


class ProviderUnreachable(GatewayError):
    """Provider could not be reached after the configured retry budget."""


class ProviderRejected(GatewayError):
    """Provider answered with a non-retryable error status."""


class EmptyCompletion(GatewayError):
    pass


class DimensionMismatch(GatewayError):
    """Provider returned embedding vectors of inconsistent lengths."""


@dataclass(frozen=True)
class ChatRequest:
    model: str
    user_prompt: str
    system_prompt: str | None = None
    temperature: float = 0.0
    max_output_tokens: int = 1024

    def __post_init__(self) -> None:
        if not self.user_prompt:
            raise ValueError("user_prompt must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    provider_model: str
    cached: bool


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    model: str

    def __post_init__(self) -> None:
        if not self.values:
            raise ValueError("embedding must be non-empty")
        if all(v == 0.0 for v in self.values):
            raise ValueError("embedding must not be all-zero")


def cache_key(req: ChatRequest) -> str:
    """Content digest identifying a chat request, stable across runs."""
    payload = canonical_json(
        {
            "model": req.model,
            "system_prompt": req.system_prompt,
            "user_prompt": req.user_prompt,
            "temperature": req.temperature,
        }
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def embedding_cache_key(model: str, text: str) -> str:
    payload = canonical_json({"kind": "embedding", "model": model, "text": text})
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _safe_dir_name(model: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in model) or "_"


class ResponseCache:
    """On-disk cache: ``<root>/<model>/<first-2-hex>/<digest>.json``.

    Concurrent writers may race on one key; values for identical keys are
    identical by construction, so last-writer-wins is safe.
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)

    def _path(self, model: str, digest: str) -> Path:
        return self.root / _safe_dir_name(model) / digest[:2] / f"{digest}.json"

    def get(self, model: str, digest: str) -> dict | None:
        path = self._path(model, digest)
        try:
            with open(path, encoding="utf-8") as fh:
                return json.load(fh)
        except (FileNotFoundError, json.JSONDecodeError):
            return None

    def put(self, model: str, digest: str, payload: dict) -> None:
        path = self._path(model, digest)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp-{os.getpid()}-{threading.get_ident()}")
        tmp.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")
        os.replace(tmp, path)


class RateLimiter:
    """Token bucket gating outbound provider calls (requests per minute)."""

    def __init__(self, requests_per_minute: int, clock=time.monotonic, sleep=time.sleep):
        self.rate = requests_per_minute / 60.0
        self.capacity = float(max(requests_per_minute, 1))
        self.tokens = self.capacity
        self.clock = clock
        self.sleep = sleep
        self.unlimited = requests_per_minute <= 0
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if self.unlimited:
            return
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self._last) * self.rate)
                self._last = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self.sleep(wait)


class OpenAIBackend:
    """OpenAI-compatible HTTP backend with exponential-backoff retries."""

    def __init__(
        self,
        base_url: str,
        api_key: str,
        *,
        session: requests.Session | None = None,
        max_attempts: int = 4,
        backoff_base: float = 0.5,
        sleep=time.sleep,
        timeout: float = 120.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.session = session or requests.Session()
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.sleep = sleep
        self.timeout = timeout

    def _post(self, path: str, body: dict) -> dict:
        url = f"{self.base_url}{path}"
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_error: str = "no attempt made"
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self.session.post(url, json=body, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = str(exc)
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()
                    except ValueError:
                        # Garbled body from a proxy or truncated response.
                        last_error = "unparseable response body"
                elif resp.status_code not in RETRYABLE_STATUSES:
                    raise ProviderRejected(
                        f"{url} returned {resp.status_code}: {resp.text[:200]}"
                    )
                else:
                    last_error = f"status {resp.status_code}"
            if attempt < self.max_attempts:
                delay = self.backoff_base * (2 ** (attempt - 1))
                logger.warning("retrying %s after %s (attempt %d)", path, last_error, attempt)
                self.sleep(delay)
        raise ProviderUnreachable(
            f"{url} failed after {self.max_attempts} attempts: {last_error}"
        )

    def complete(self, req: ChatRequest) -> str:
        messages = []
        if req.system_prompt:
            messages.append({"role": "system", "content": req.system_prompt})
        messages.append({"role": "user", "content": req.user_prompt})
        data = self._post(
            "/chat/completions",
            {
                "model": req.model,
                "messages": messages,
                "temperature": req.temperature,
                "max_tokens": req.max_output_tokens,
            },
        )
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise EmptyCompletion(f"malformed completion payload: {exc}") from exc
        if not (text or "").strip():
            raise EmptyCompletion("provider returned an empty completion")
        return text

    def embed(self, texts: list[str], model: str) -> list[list[float]]:
        data = self._post("/embeddings", {"model": model, "input": texts})
        try:
            items = sorted(data["data"], key=lambda item: item["index"])
            return [list(map(float, item["embedding"])) for item in items]
        except (KeyError, TypeError) as exc:
            raise EmptyCompletion(f"malformed embedding payload: {exc}") from exc


class LlmGateway:
    """Cached, rate-limited front door for chat and embedding calls."""

    def __init__(
        self,
        backend,
        cache_dir: Path | str,
        *,
        rate_limiter: RateLimiter | None = None,
        embed_batch_size: int = 100,
    ):
        self.backend = backend
        self.cache = ResponseCache(cache_dir)
        self.rate_limiter = rate_limiter
        self.embed_batch_size = embed_batch_size
        self._stats_lock = threading.Lock()
        self.lookups = 0
        self.cache_hits = 0

    def _count(self, hits: int, lookups: int) -> None:
        with self._stats_lock:
            self.cache_hits += hits
            self.lookups += lookups

    @property
    def cache_hit_rate(self) -> float:
        with self._stats_lock:
            return self.cache_hits / self.lookups if self.lookups else 0.0

    def chat(self, req: ChatRequest, *, force_refresh: bool = False) -> ChatResponse:
        """Complete a chat request, serving from cache when possible.

        ``force_refresh`` bypasses the cache lookup (used to regenerate after
        an unparseable completion) and overwrites the stored entry.
        """
        digest = cache_key(req)
        self._count(0, 1)
        if not force_refresh:
            entry = self.cache.get(req.model, digest)
            if entry is not None:
                self._count(1, 0)
                return ChatResponse(text=entry["text"], provider_model=req.model, cached=True)
        if self.rate_limiter is not None:
            self.rate_limiter.acquire()
        text = self.backend.complete(req)
        if not text.strip():
            raise EmptyCompletion("backend returned an empty completion")
        self.cache.put(
            req.model,
            digest,
            {
                "request": {
                    "model": req.model,
                    "system_prompt": req.system_prompt,
                    "user_prompt": req.user_prompt,
                    "temperature": req.temperature,
                },
                "text": text,
                "timestamp": time.time(),
            },
        )
        return ChatResponse(text=text, provider_model=req.model, cached=False)

    def embed(self, texts: list[str], model: str) -> list[EmbeddingVector]:
        """Embed texts, order-preserving, with per-text caching and batching."""
        if not texts:
            raise ValueError("texts must be non-empty")
        if any(not t for t in texts):
            raise ValueError("every text must be non-empty")

        values: list[list[float] | None] = [None] * len(texts)
        missing: list[int] = []
        for i, text in enumerate(texts):
            digest = embedding_cache_key(model, text)
            self._count(0, 1)
            entry = self.cache.get(model, digest)
            if entry is not None:
                self._count(1, 0)
                values[i] = entry["values"]
            else:
                missing.append(i)

        for start in range(0, len(missing), self.embed_batch_size):
            batch = missing[start : start + self.embed_batch_size]
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            batch_values = self.backend.embed([texts[i] for i in batch], model)
            if len(batch_values) != len(batch):
                raise DimensionMismatch(
                    f"expected {len(batch)} vectors, got {len(batch_values)}"
                )
            for i, vec in zip(batch, batch_values):
                values[i] = vec
                self.cache.put(
                    model,
                    embedding_cache_key(model, texts[i]),
                    {
                        "request": {"kind": "embedding", "model": model, "text": texts[i]},
                        "values": vec,
                        "timestamp": time.time(),
                    },
                )

        lengths = {len(v) for v in values}  # type: ignore[arg-type]
        if len(lengths) != 1:
            raise DimensionMismatch(f"inconsistent embedding lengths: {sorted(lengths)}")
        return [EmbeddingVector(values=tuple(v), model=model) for v in values]  # type: ignore[arg-type]


def resolve_credentials(*, judge: bool = False) -> tuple[str, str | None]:
    """Resolve (base_url, api_key) from the environment.

    Judge credentials fall back to the generator credentials when unset.
    """
    if judge:
        base = os.environ.get(ENV_JUDGE_API_BASE) or os.environ.get(ENV_API_BASE)
        key = os.environ.get(ENV_JUDGE_API_KEY) or os.environ.get(ENV_API_KEY)
    else:
        base = os.environ.get(ENV_API_BASE)
        key = os.environ.get(ENV_API_KEY)
    return base or DEFAULT_API_BASE, key
