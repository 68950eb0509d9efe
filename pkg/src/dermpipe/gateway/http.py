"""OpenAI-compatible chat-completions client for vision models."""

from __future__ import annotations

import logging
import os
import threading
import time
from typing import Any, Callable

import httpx

from ..errors import ConfigError, RateLimited, TransportError
from .backends import ChatRequest, GatewayConfig
from .messages import ChatMessage, Conversation, Image, Text

log = logging.getLogger(__name__)

TOKEN_ENV = "AUTH_TOKEN"
_RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


class TokenBucket:
    """Allows bursts of up to ``capacity`` requests, refilled continuously."""

    def __init__(
        self,
        per_minute: float,
        capacity: float | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.rate = per_minute / 60.0
        self.capacity = float(capacity if capacity is not None else per_minute)
        self.tokens = self.capacity
        self.clock = clock
        self.sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def _refill(self) -> None:
        now = self.clock()
        self.tokens = min(self.capacity, self.tokens + (now - self._last) * self.rate)
        self._last = now

    def acquire(self) -> None:
        while True:
            with self._lock:
                self._refill()
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self.sleep(wait)


def message_payload(message: ChatMessage, detail: str = "auto") -> dict[str, Any]:
    if all(isinstance(p, Text) for p in message.parts):
        content: Any = message.text
    else:
        content = []
        for part in message.parts:
            if isinstance(part, Text):
                content.append({"type": "text", "text": part.text})
            elif isinstance(part, Image):
                content.append(
                    {
                        "type": "image_url",
                        "image_url": {"url": part.image.data_uri, "detail": detail},
                    }
                )
    payload: dict[str, Any] = {"role": message.role.value, "content": content}
    if message.speaker_name:
        payload["name"] = _safe_name(message.speaker_name)
    return payload


def _safe_name(name: str) -> str:
    # the API restricts name to [A-Za-z0-9_-]{1,64}
    cleaned = "".join(ch if ch.isalnum() or ch in "_-" else "_" for ch in name)
    return cleaned[:64] or "agent"


def build_payload(request: ChatRequest, config: GatewayConfig) -> dict[str, Any]:
    payload: dict[str, Any] = {
        "model": request.model_name,
        "messages": [message_payload(m, config.image_detail) for m in request.conversation],
        "temperature": request.temperature,
        "seed": request.seed,
    }
    if config.max_tokens is not None:
        payload["max_tokens"] = config.max_tokens
    return payload


class HttpBackend:
    def __init__(
        self,
        config: GatewayConfig,
        token: str | None = None,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        bucket: TokenBucket | None = None,
    ) -> None:
        token = token if token is not None else os.environ.get(TOKEN_ENV)
        if not token:
            raise ConfigError(f"live backend needs the {TOKEN_ENV} environment variable")
        self.config = config
        self.sleep = sleep
        self.bucket = bucket or TokenBucket(config.rate_limit, sleep=sleep)
        self.client = httpx.Client(
            transport=transport,
            timeout=config.timeout,
            headers={"Authorization": f"Bearer {token}"},
        )
        self.calls = 0

    def close(self) -> None:
        self.client.close()

    def send(self, request: ChatRequest) -> str:
        payload = build_payload(request, self.config)
        last_error: Exception | None = None
        rate_limited = False
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                delay = self.config.backoff_base * 2 ** (attempt - 1)
                log.warning("retry %d/%d in %.1fs: %s", attempt, self.config.max_retries, delay, last_error)
                self.sleep(delay)
            self.bucket.acquire()
            self.calls += 1
            try:
                resp = self.client.post(self.config.endpoint_url, json=payload)
            except httpx.TransportError as exc:
                last_error, rate_limited = exc, False
                continue
            if resp.status_code in _RETRY_STATUS:
                last_error = TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                rate_limited = resp.status_code == 429
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            return _extract_text(resp)
        if rate_limited:
            raise RateLimited(f"rate limited after {self.config.max_retries} retries")
        raise TransportError(f"request failed after {self.config.max_retries} retries: {last_error}")


def _extract_text(resp: httpx.Response) -> str:
    try:
        body = resp.json()
        content = body["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"malformed completion body: {resp.text[:200]}") from exc
    if content is None:
        return ""
    if isinstance(content, list):
        return "".join(p.get("text", "") for p in content if isinstance(p, dict))
    return str(content)


def conversation_payload(conversation: Conversation, detail: str = "auto") -> list[dict[str, Any]]:
    return [message_payload(m, detail) for m in conversation]
