"""Provider-agnostic chat-completion access with context guarding, retries,
rate limiting and a record/replay transcript store."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol

import httpx

from .jsonextract import extract_json_array
from .prompts import PromptBundle

log = logging.getLogger(__name__)

DEFAULT_RESERVED_OUTPUT_TOKENS = 2048


class ProviderKind(str, Enum):
    REMOTE = "RemoteChatEndpoint"
    REPLAY = "ReplayStore"


@dataclass(frozen=True)
class ModelProfile:
    model_name: str
    context_window: int
    provider_kind: ProviderKind = ProviderKind.REMOTE
    endpoint_url: str = ""
    temperature: float | None = None  # None: leave the provider default alone
    max_retries: int = 3
    request_timeout: float = 120.0
    api_key_env: str | None = "OPENAI_API_KEY"
    reserved_output_tokens: int = DEFAULT_RESERVED_OUTPUT_TOKENS
    requests_per_second: float | None = None

    def __post_init__(self) -> None:
        if self.context_window <= 0:
            raise ValueError("context_window must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.reserved_output_tokens < 0:
            raise ValueError("reserved_output_tokens must be >= 0")


# Context sizes of the evaluated models ("16k" read as 16,000 tokens).
KNOWN_CONTEXT_WINDOWS = {
    "gpt-3.5-turbo": 16_000,
    "gpt-4-turbo": 128_000,
    "gemini-1.0-pro": 128_000,
    "codellama-34b-instruct": 100_000,
    "deepseek-coder-33b-instruct": 16_000,
}


def known_profile(model_name: str, **overrides) -> ModelProfile:
    try:
        window = KNOWN_CONTEXT_WINDOWS[model_name]
    except KeyError:
        raise KeyError(f"unknown model {model_name!r}; known: {sorted(KNOWN_CONTEXT_WINDOWS)}") from None
    return ModelProfile(model_name=model_name, context_window=overrides.pop("context_window", window), **overrides)


class ResponseStatus(str, Enum):
    OK = "Ok"
    EMPTY = "Empty"
    REFUSAL = "Refusal"
    TRANSPORT_ERROR = "TransportError"


@dataclass(frozen=True)
class RawResponse:
    text: str
    status: ResponseStatus
    prompt_hash: str
    latency: float = 0.0
    query_index: int = 0
    error: str | None = None


@dataclass(frozen=True)
class ContextCheck:
    fits: bool
    by: int = 0

    def __str__(self) -> str:
        return "Fits" if self.fits else f"Exceeds(by {self.by})"


def guard_context(bundle: PromptBundle, profile: ModelProfile, reserved: int | None = None) -> ContextCheck:
    budget = profile.reserved_output_tokens if reserved is None else reserved
    over = bundle.token_estimate + budget - profile.context_window
    return ContextCheck(True) if over <= 0 else ContextCheck(False, over)


class ContextExceeded(ValueError):
    pass


class MissingRecording(LookupError):
    def __init__(self, prompt_hash: str, model_name: str):
        super().__init__(f"no recording for prompt {prompt_hash[:12]} on model {model_name}")
        self.prompt_hash = prompt_hash
        self.model_name = model_name


class TransientError(Exception):
    """Failure worth retrying (timeouts, connection errors, 429, 5xx)."""


class PermanentError(Exception):
    """Failure that retrying will not fix (auth, bad request)."""


def load_refusal_lexicon(path: str | Path | None = None) -> tuple[str, ...]:
    if path is None:
        text = resources.files("cryptoscan.data").joinpath("refusal_lexicon.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return tuple(
        line.strip().casefold() for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")
    )


_REFUSALS: tuple[str, ...] | None = None


def looks_like_refusal(text: str, lexicon: tuple[str, ...] | None = None) -> bool:
    global _REFUSALS
    if lexicon is None:
        if _REFUSALS is None:
            _REFUSALS = load_refusal_lexicon()
        lexicon = _REFUSALS
    folded = text.casefold().replace("’", "'")
    return any(phrase in folded for phrase in lexicon) and extract_json_array(text) is None


def classify_text(text: str, lexicon: tuple[str, ...] | None = None) -> ResponseStatus:
    if not text.strip():
        return ResponseStatus.EMPTY
    if looks_like_refusal(text, lexicon):
        return ResponseStatus.REFUSAL
    return ResponseStatus.OK


# --- providers ----------------------------------------------------------------


class Provider(Protocol):
    live: bool

    def send(self, bundle: PromptBundle, profile: ModelProfile, query_index: int) -> str: ...


RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


class RemoteChatProvider:
    """POSTs ``{model, messages[, temperature]}`` to a chat-completion endpoint."""

    live = True

    def __init__(self, client: httpx.Client | None = None, api_key: str | None = None):
        self._client = client
        self._api_key = api_key

    def _headers(self, profile: ModelProfile) -> dict[str, str]:
        key = self._api_key
        if key is None and profile.api_key_env:
            key = os.environ.get(profile.api_key_env)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def send(self, bundle: PromptBundle, profile: ModelProfile, query_index: int) -> str:
        if not profile.endpoint_url:
            raise PermanentError("profile has no endpoint_url")
        payload: dict = {"model": profile.model_name, "messages": bundle.messages()}
        if profile.temperature is not None:
            payload["temperature"] = profile.temperature
        client = self._client or httpx.Client()
        try:
            resp = client.post(
                profile.endpoint_url, json=payload, headers=self._headers(profile), timeout=profile.request_timeout
            )
        except (httpx.TimeoutException, httpx.TransportError) as exc:
            raise TransientError(f"{type(exc).__name__}: {exc}") from exc
        finally:
            if self._client is None:
                client.close()
        if resp.status_code in RETRYABLE_STATUS:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise PermanentError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        return _completion_text(resp)


def _completion_text(resp: httpx.Response) -> str:
    if not resp.content.strip():
        return ""
    try:
        data = resp.json()
    except ValueError:
        return resp.text
    if isinstance(data, dict):
        choices = data.get("choices")
        if isinstance(choices, list) and choices:
            first = choices[0] or {}
            message = first.get("message") or {}
            content = message.get("content") if isinstance(message, dict) else None
            if content is None:
                content = first.get("text")
            return content or ""
        message = data.get("message")
        if isinstance(message, dict):
            return message.get("content") or ""
        for key in ("content", "text", "output"):
            if isinstance(data.get(key), str):
                return data[key]
    return ""


# --- transcripts ---------------------------------------------------------------


@dataclass(frozen=True)
class TranscriptEntry:
    prompt_hash: str
    model_name: str
    variant_index: int
    text: str
    timestamp: str = ""

    def to_json(self) -> dict:
        return {
            "promptHash": self.prompt_hash,
            "modelName": self.model_name,
            "variantIndex": self.variant_index,
            "text": self.text,
            "timestamp": self.timestamp,
        }


class TranscriptStore:
    """Append-only file of length-prefixed UTF-8 JSON records.

    Each record is ``<byte length>\\n<json>\\n``. A torn trailing record (from
    an interrupted write) is ignored on load. Appends are serialized within a
    process.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._variants: dict[tuple[str, str], list[str]] = {}
        if self.path.exists():
            for entry in self._read():
                self._variants.setdefault((entry.prompt_hash, entry.model_name), []).append(entry.text)

    def _read(self) -> list[TranscriptEntry]:
        data = self.path.read_bytes()
        entries, pos = [], 0
        while pos < len(data):
            nl = data.find(b"\n", pos)
            if nl == -1:
                break
            try:
                length = int(data[pos:nl])
            except ValueError:
                raise ValueError(f"{self.path}: corrupt record header at byte {pos}") from None
            body = data[nl + 1 : nl + 1 + length]
            if len(body) < length:
                log.warning("%s: ignoring truncated trailing record", self.path)
                break
            d = json.loads(body.decode("utf-8"))
            entries.append(
                TranscriptEntry(d["promptHash"], d["modelName"], d["variantIndex"], d["text"], d.get("timestamp", ""))
            )
            pos = nl + 1 + length + 1
        return entries

    def entries(self) -> list[TranscriptEntry]:
        return self._read() if self.path.exists() else []

    def variants(self, prompt_hash: str, model_name: str) -> list[str]:
        with self._lock:
            return list(self._variants.get((prompt_hash, model_name), ()))

    def append(self, prompt_hash: str, model_name: str, text: str, timestamp: str | None = None) -> TranscriptEntry:
        with self._lock:
            bucket = self._variants.setdefault((prompt_hash, model_name), [])
            entry = TranscriptEntry(
                prompt_hash,
                model_name,
                len(bucket),
                text,
                timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds"),
            )
            body = json.dumps(entry.to_json(), ensure_ascii=False, sort_keys=True).encode("utf-8")
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "ab") as fh:
                fh.write(b"%d\n%s\n" % (len(body), body))
                fh.flush()
                os.fsync(fh.fileno())
            bucket.append(text)
            return entry


def record(
    bundle: PromptBundle, profile: ModelProfile, response: RawResponse, store: TranscriptStore
) -> TranscriptEntry:
    """Persist a live response; repeated recordings of a prompt become new variants."""
    return store.append(bundle.prompt_hash, profile.model_name, response.text)


class ReplayProvider:
    """Serves recorded variants, round-robin by query index."""

    live = False

    def __init__(self, store: TranscriptStore | str | Path):
        self.store = store if isinstance(store, TranscriptStore) else TranscriptStore(store)
        self._lock = threading.Lock()
        self.lookups: list[tuple[str, int]] = []

    def send(self, bundle: PromptBundle, profile: ModelProfile, query_index: int) -> str:
        with self._lock:
            self.lookups.append((bundle.prompt_hash, query_index))
        variants = self.store.variants(bundle.prompt_hash, profile.model_name)
        if not variants:
            raise MissingRecording(bundle.prompt_hash, profile.model_name)
        return variants[query_index % len(variants)]


# --- rate limiting and the gateway itself ------------------------------------------


class RateLimiter:
    """Spaces requests at least ``1/rate`` seconds apart."""

    def __init__(
        self,
        rate: float,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.interval = 1.0 / rate
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next = float("-inf")

    def acquire(self) -> float:
        with self._lock:
            now = self._clock()
            slot = max(now, self._next)
            self._next = slot + self.interval
            if slot > now:
                self._sleep(slot - now)
            return slot


@dataclass
class Gateway:
    profile: ModelProfile
    provider: Provider | None = None
    recorder: TranscriptStore | None = None
    rate_limiter: RateLimiter | None = None
    sleep: Callable[[float], None] = time.sleep
    clock: Callable[[], float] = time.monotonic
    backoff_base: float = 1.0
    backoff_cap: float = 30.0
    refusal_lexicon: tuple[str, ...] | None = None
    calls: int = field(default=0, init=False)

    def __post_init__(self) -> None:
        if self.provider is None:
            if self.profile.provider_kind is ProviderKind.REPLAY:
                raise ValueError("a replay profile needs an explicit ReplayProvider")
            self.provider = RemoteChatProvider()
        if self.rate_limiter is None and self.profile.requests_per_second:
            self.rate_limiter = RateLimiter(self.profile.requests_per_second, sleep=self.sleep)
        self._count_lock = threading.Lock()

    def backoff(self, attempt: int) -> float:
        return min(self.backoff_cap, self.backoff_base * 2**attempt)

    def complete(self, bundle: PromptBundle, query_index: int = 0) -> RawResponse:
        """Send one prompt; transport failures come back as a TransportError response.

        Raises ContextExceeded when the bundle does not fit the profile and
        MissingRecording when a replay store has no entry for the prompt.
        """
        check = guard_context(bundle, self.profile)
        if not check.fits:
            raise ContextExceeded(f"{bundle.unit_path}: {check}")
        prompt_hash = bundle.prompt_hash
        attempts = self.profile.max_retries + 1 if self.provider.live else 1
        error: Exception | None = None
        start = self.clock()
        for attempt in range(attempts):
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            with self._count_lock:
                self.calls += 1
            try:
                text = self.provider.send(bundle, self.profile, query_index)
            except TransientError as exc:
                error = exc
                log.info("%s q%d attempt %d failed: %s", bundle.unit_path, query_index, attempt + 1, exc)
                if attempt + 1 < attempts:
                    self.sleep(self.backoff(attempt))
                continue
            except PermanentError as exc:
                error = exc
                break
            response = RawResponse(
                text=text,
                status=classify_text(text, self.refusal_lexicon),
                prompt_hash=prompt_hash,
                latency=self.clock() - start,
                query_index=query_index,
            )
            if self.recorder is not None and self.provider.live:
                record(bundle, self.profile, response, self.recorder)
            return response
        return RawResponse(
            text="",
            status=ResponseStatus.TRANSPORT_ERROR,
            prompt_hash=prompt_hash,
            latency=self.clock() - start,
            query_index=query_index,
            error=str(error) if error else "unknown transport failure",
        )
