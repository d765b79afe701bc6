"""Client for OpenAI-compatible chat-completion servers with image inputs and token logprobs."""

from __future__ import annotations

import base64
import hashlib
import io
import logging
import math
import os
import threading
import time
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import httpx

from .cache import ResponseCache, make_key
from .datamodel import StrategyId
from .prompts import ImagePart, MultimodalMessage, TextPart

log = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})


class GatewayError(RuntimeError):
    pass


class BackendUnavailable(GatewayError):
    """Network failure or timeout that persisted through every retry."""


class HttpStatusError(GatewayError):
    def __init__(self, status: int, body: str):
        self.status = status
        self.body = body
        super().__init__(f"HTTP {status}: {body[:500]}")


class MalformedResponse(GatewayError):
    pass


class MissingLogprobs(MalformedResponse):
    pass


@dataclass(frozen=True)
class BackendConfig:
    endpoint_url: str
    model_id: str
    auth_env_var: str = "VLM_API_KEY"
    temperature: float = 0.0
    max_output_tokens: int = 16
    logprob_top_n: int = 20
    max_in_flight: int = 4
    timeout: float = 120.0
    retry_max_attempts: int = 4
    retry_backoff: float = 1.0
    max_image_dim: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.retry_max_attempts < 1:
            raise ValueError("retry_max_attempts must be >= 1")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")

    def check_for(self, strategy: StrategyId | str) -> None:
        """Raise ValueError if this config cannot serve ``strategy``."""
        strategy = StrategyId(strategy)
        if strategy.uses_logprobs and self.logprob_top_n < 5:
            raise ValueError(f"{strategy.value} needs logprob_top_n >= 5 (tokens '1'..'5'), got {self.logprob_top_n}")
        if not self.endpoint_url or not self.model_id:
            raise ValueError("http backend requires endpoint_url and model_id")


TopAlternatives = tuple[tuple[str, float], ...]


@dataclass(frozen=True)
class VlmResponse:
    text: str
    token_logprobs: tuple[TopAlternatives, ...] = ()
    latency: float = 0.0
    from_cache: bool = False
    retries: int = 0


@dataclass(frozen=True)
class TokenDistribution:
    probs: dict[str, float]
    position: int = 0

    def __post_init__(self):
        for label, p in self.probs.items():
            if not 0.0 <= p <= 1.0 + 1e-12:
                raise ValueError(f"probability for {label!r} out of range: {p}")
        if sum(self.probs.values()) > 1.0 + 1e-9:
            raise ValueError(f"label probabilities sum above 1: {sum(self.probs.values())}")

    def __getitem__(self, label: str) -> float:
        return self.probs.get(label, 0.0)


def extract_token_probs(resp: VlmResponse, target_labels: Iterable[str], position: int = 0) -> TokenDistribution:
    """Probability mass per label at one generated position.

    Alternatives match a label when, after stripping leading whitespace, they equal it
    case-insensitively; the exponentiated logprobs of all matching surfaces are summed.
    Labels that never appear get 0.
    """
    if not resp.token_logprobs:
        raise MalformedResponse("response has no token positions")
    if not 0 <= position < len(resp.token_logprobs):
        raise MalformedResponse(f"answer position {position} outside {len(resp.token_logprobs)} generated tokens")
    labels = list(target_labels)
    probs = {label: 0.0 for label in labels}
    canon = {label.lower(): label for label in labels}
    for surface, logprob in resp.token_logprobs[position]:
        label = canon.get(surface.lstrip().lower())
        if label is not None:
            probs[label] += math.exp(logprob)
    return TokenDistribution({k: min(v, 1.0) for k, v in probs.items()}, position)


@dataclass
class GatewayStats:
    http_requests: int = 0
    cache_hits: int = 0
    retries: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self, **deltas: int) -> None:
        with self._lock:
            for name, delta in deltas.items():
                setattr(self, name, getattr(self, name) + delta)


class VlmGateway:
    """Shared, thread-safe access to one VLM backend.

    At most ``cfg.max_in_flight`` HTTP requests are outstanding at any time. When a
    cache directory is given, :meth:`cached_complete` consults it before the network.
    """

    def __init__(
        self,
        cfg: BackendConfig,
        cache_dir: str | os.PathLike | None = None,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        self.cache = ResponseCache(cache_dir) if cache_dir is not None else None
        self.stats = GatewayStats()
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(cfg.max_in_flight)
        self._client = httpx.Client(timeout=cfg.timeout, transport=transport)
        self._image_memo: dict[tuple[str, int, int], tuple[str, bytes]] = {}
        self._memo_lock = threading.Lock()

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- images --------------------------------------------------------------------------

    def _image_payload(self, part: ImagePart) -> tuple[str, bytes | None]:
        """(content hash, bytes to send); bytes is None for references passed as URLs."""
        if part.ref.startswith(("http://", "https://", "data:")):
            return hashlib.sha256(part.ref.encode("utf-8")).hexdigest(), None
        st = os.stat(part.ref)
        memo_key = (part.ref, st.st_mtime_ns, st.st_size)
        with self._memo_lock:
            hit = self._image_memo.get(memo_key)
        if hit is not None:
            return hit
        data = Path(part.ref).read_bytes()
        digest = hashlib.sha256(data).hexdigest()
        if self.cfg.max_image_dim:
            data = _downscale(data, self.cfg.max_image_dim)
        with self._memo_lock:
            self._image_memo[memo_key] = (digest, data)
        return digest, data

    def image_hash(self, part: ImagePart) -> str:
        return self._image_payload(part)[0]

    # -- request building ----------------------------------------------------------------

    def cache_identity(self, messages: Sequence[MultimodalMessage], want_logprobs: bool) -> dict[str, Any]:
        turns = []
        for msg in messages:
            parts = []
            for p in msg.parts:
                if isinstance(p, TextPart):
                    parts.append({"text": p.text})
                else:
                    parts.append({"image_sha256": self.image_hash(p), "media_type": p.media_type})
            turns.append({"role": msg.role, "parts": parts})
        return {
            "model_id": self.cfg.model_id,
            "temperature": self.cfg.temperature,
            "max_output_tokens": self.cfg.max_output_tokens,
            "logprob_top_n": self.cfg.logprob_top_n,
            "want_logprobs": want_logprobs,
            "max_image_dim": self.cfg.max_image_dim,
            "messages": turns,
        }

    def request_body(self, messages: Sequence[MultimodalMessage], want_logprobs: bool) -> dict[str, Any]:
        wire = []
        for msg in messages:
            if msg.role != "user" and not msg.images:
                wire.append({"role": msg.role, "content": msg.text})
                continue
            content = []
            for p in msg.parts:
                if isinstance(p, TextPart):
                    content.append({"type": "text", "text": p.text})
                    continue
                _, data = self._image_payload(p)
                url = p.ref if data is None else f"data:{p.media_type};base64,{base64.b64encode(data).decode('ascii')}"
                content.append({"type": "image_url", "image_url": {"url": url}})
            wire.append({"role": msg.role, "content": content})
        body: dict[str, Any] = {
            "model": self.cfg.model_id,
            "messages": wire,
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_output_tokens,
        }
        if want_logprobs:
            body["logprobs"] = True
            body["top_logprobs"] = self.cfg.logprob_top_n
        return body

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.cfg.auth_env_var) if self.cfg.auth_env_var else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    # -- calls ---------------------------------------------------------------------------

    def complete(
        self, message: MultimodalMessage | Sequence[MultimodalMessage], want_logprobs: bool = False
    ) -> VlmResponse:
        """One uncached chat completion, retrying transport errors, 408/429 and 5xx."""
        messages = (message,) if isinstance(message, MultimodalMessage) else tuple(message)
        body = self.request_body(messages, want_logprobs)
        attempts = self.cfg.retry_max_attempts
        last_error: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                self.stats.bump(retries=1)
                self._sleep(self.cfg.retry_backoff * 2 ** (attempt - 1))
            start = time.perf_counter()
            try:
                with self._slots:
                    self.stats.bump(http_requests=1)
                    reply = self._client.post(self.cfg.endpoint_url, json=body, headers=self._headers())
            except httpx.TransportError as exc:
                last_error = exc
                log.warning("request failed (%s), attempt %d/%d", exc, attempt + 1, attempts)
                continue
            latency = time.perf_counter() - start
            if reply.status_code in RETRYABLE_STATUS:
                last_error = HttpStatusError(reply.status_code, reply.text)
                log.warning("HTTP %d, attempt %d/%d", reply.status_code, attempt + 1, attempts)
                continue
            if reply.status_code >= 400:
                raise HttpStatusError(reply.status_code, reply.text)
            try:
                payload = reply.json()
            except ValueError:
                raise MalformedResponse(f"response is not JSON: {reply.text[:200]!r}") from None
            text, logprobs = parse_completion(payload, want_logprobs)
            return VlmResponse(text, logprobs, latency, False, attempt)
        raise BackendUnavailable(f"gave up after {attempts} attempts: {last_error}") from last_error

    def cached_complete(
        self, message: MultimodalMessage | Sequence[MultimodalMessage], want_logprobs: bool = False
    ) -> VlmResponse:
        if self.cache is None:
            return self.complete(message, want_logprobs)
        messages = (message,) if isinstance(message, MultimodalMessage) else tuple(message)
        key = make_key(self.cache_identity(messages, want_logprobs))
        stored = self.cache.get(key, required=("text", "token_logprobs", "latency"))
        if stored is not None:
            try:
                resp = _response_from_json(stored)
            except (TypeError, ValueError) as exc:
                log.warning("discarding unreadable cache entry %s (%s)", key, exc)
            else:
                self.stats.bump(cache_hits=1)
                return resp
        resp = self.complete(messages, want_logprobs)
        self.cache.put(key, _response_to_json(resp))
        return resp


def parse_completion(payload: Any, want_logprobs: bool) -> tuple[str, tuple[TopAlternatives, ...]]:
    """Pull ``choices[0].message.content`` and per-token top alternatives out of a reply."""
    try:
        choice = payload["choices"][0]
        content = choice["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise MalformedResponse("reply lacks choices[0].message.content") from None
    if content is None:
        content = ""
    if not isinstance(content, str):
        raise MalformedResponse("message content is not a string")
    if not want_logprobs:
        return content, ()
    positions = (choice.get("logprobs") or {}).get("content") if isinstance(choice, dict) else None
    if not positions:
        raise MissingLogprobs("logprobs were requested but the reply carries none")
    out = []
    try:
        for pos in positions:
            alts = pos.get("top_logprobs") or [{"token": pos["token"], "logprob": pos["logprob"]}]
            out.append(tuple((str(a["token"]), min(float(a["logprob"]), 0.0)) for a in alts))
    except (KeyError, TypeError, ValueError, AttributeError):
        raise MalformedResponse("unreadable logprobs entry") from None
    return content, tuple(out)


def _response_to_json(resp: VlmResponse) -> dict[str, Any]:
    return {
        "text": resp.text,
        "token_logprobs": [[[tok, lp] for tok, lp in pos] for pos in resp.token_logprobs],
        "latency": resp.latency,
    }


def _response_from_json(obj: dict[str, Any]) -> VlmResponse:
    if not isinstance(obj["text"], str):
        raise TypeError("text is not a string")
    logprobs = tuple(tuple((str(tok), float(lp)) for tok, lp in pos) for pos in obj["token_logprobs"])
    return VlmResponse(obj["text"], logprobs, float(obj["latency"]), True, 0)


def _downscale(data: bytes, max_dim: int) -> bytes:
    from PIL import Image  # optional dependency, only needed when max_image_dim is set

    with Image.open(io.BytesIO(data)) as img:
        if max(img.size) <= max_dim:
            return data
        fmt = img.format or "PNG"
        img.thumbnail((max_dim, max_dim))
        buf = io.BytesIO()
        img.save(buf, format=fmt)
        return buf.getvalue()
