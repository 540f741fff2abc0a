"""Provider-agnostic chat and embedding access with record/replay transcripts.

Every request is identified by a stable digest of its normalized content, so
a recorded transcript makes the whole pipeline replayable offline and
byte-for-byte deterministic.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import requests

from .core import ConfigError, ProviderConfig, TaxoweaveError, stable_digest

log = logging.getLogger(__name__)

SCHEMA_TAGS = ("refine_definition", "isa_judgment", "rank_and_score", "penalty")
TRANSCRIPT_MODES = ("live", "record", "replay")

SCORE_EPS = 1e-6
PENALTY_MAX = 0.5
REPROMPT_INSTRUCTION = (
    "Your previous reply could not be parsed. "
    "Respond again with only one valid JSON object in the required format."
)


class GatewayError(TaxoweaveError):
    """Base class for chat/embedding transport and parsing failures."""


class TransportError(GatewayError):
    pass


class AuthError(GatewayError):
    pass


class MissingReplayEntry(GatewayError):
    pass


class DimensionMismatch(GatewayError):
    pass


class ParseError(GatewayError):
    pass


class SchemaError(GatewayError):
    pass


class VocabularyError(GatewayError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    """One chat call; `meta` is advisory only and never part of the digest."""

    model_id: str
    system_prompt: str
    user_prompt: str
    response_schema_tag: str
    temperature: float = 0.0
    max_output_tokens: int = 512
    meta: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.response_schema_tag not in SCHEMA_TAGS:
            raise ValueError(f"unknown response schema tag {self.response_schema_tag!r}")
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("prompts must be non-empty")


def chat_digest_payload(req: ChatRequest) -> dict[str, Any]:
    return {
        "kind": "chat",
        "model_id": req.model_id,
        "system_prompt": req.system_prompt,
        "user_prompt": req.user_prompt,
        "temperature": req.temperature,
        "max_output_tokens": req.max_output_tokens,
        "response_schema_tag": req.response_schema_tag,
    }


def request_digest(req: ChatRequest) -> str:
    return stable_digest(chat_digest_payload(req))


def embed_digest_payload(model: str, text: str) -> dict[str, Any]:
    return {"kind": "embed", "model": model, "text": text}


def embed_digest(model: str, text: str) -> str:
    return stable_digest(embed_digest_payload(model, text))


class Transcript:
    """Digest-keyed store of raw responses backing record and replay runs.

    File format: JSON lines of {"digest", "request", "response"}.  Writes are
    serialized; lookups are safe under concurrent readers.
    """

    def __init__(self, mode: str, path: str | Path | None = None):
        if mode not in TRANSCRIPT_MODES:
            raise ValueError(f"unknown transcript mode {mode!r}")
        self.mode = mode
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, str] = {}
        self._lock = threading.Lock()
        if mode == "replay":
            if self.path is None:
                raise ConfigError("replay mode requires a transcript path")
            if not self.path.exists():
                raise ConfigError(f"transcript file not found: {self.path}")
            self._load()
        elif mode == "record":
            if self.path is None:
                raise ConfigError("record mode requires a transcript path")
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if self.path.exists():
                self._load()

    def _load(self) -> None:
        with open(self.path, "r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = json.loads(line)
                    self._entries[entry["digest"]] = entry["response"]
                except (ValueError, KeyError, TypeError) as exc:
                    raise ConfigError(
                        f"malformed transcript line {line_no} in {self.path}: {exc}"
                    ) from exc

    def get(self, digest: str) -> str | None:
        with self._lock:
            return self._entries.get(digest)

    def put(self, digest: str, request_payload: Mapping[str, Any], response: str) -> None:
        if self.mode != "record":
            raise ValueError("transcript writes are only allowed in record mode")
        with self._lock:
            if digest in self._entries:
                return
            self._entries[digest] = response
            line = json.dumps(
                {"digest": digest, "request": request_payload, "response": response},
                ensure_ascii=False,
            )
            with open(self.path, "a", encoding="utf-8") as handle:
                handle.write(line + "\n")

    def file_digest(self) -> str | None:
        if self.path is None or not self.path.exists():
            return None
        from .core import file_digest

        return file_digest(self.path)

    def __len__(self) -> int:
        return len(self._entries)


class Backend(Protocol):
    def complete(self, req: ChatRequest) -> str: ...

    def embed_batch(self, model: str, texts: Sequence[str]) -> list[list[float]]: ...


class HttpBackend:
    """OpenAI-compatible chat-completions and embeddings client with retry.

    Transient failures (connection errors, timeouts, HTTP 429/5xx) are retried
    with exponential backoff up to the configured limit; auth rejections and
    other client errors fail immediately.
    """

    def __init__(
        self,
        provider: ProviderConfig,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._provider = provider
        self._session = session or requests.Session()
        self._sleep = sleep

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self._provider.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, url: str, payload: Mapping[str, Any]) -> Mapping[str, Any]:
        last_error: GatewayError | None = None
        for attempt in range(self._provider.max_retries + 1):
            if attempt:
                self._sleep(self._provider.backoff_base * (2 ** (attempt - 1)))
            try:
                resp = self._session.post(
                    url,
                    json=payload,
                    headers=self._headers(),
                    timeout=self._provider.request_timeout,
                )
            except requests.RequestException as exc:
                last_error = TransportError(f"transport failure calling {url}: {exc}")
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"authentication rejected by {url} (HTTP {resp.status_code})")
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = TransportError(f"HTTP {resp.status_code} from {url}")
                continue
            if resp.status_code >= 400:
                raise TransportError(
                    f"HTTP {resp.status_code} from {url}: {resp.text[:200]}"
                )
            try:
                return resp.json()
            except ValueError as exc:
                raise TransportError(f"non-JSON response from {url}: {exc}") from exc
        assert last_error is not None
        raise last_error

    def complete(self, req: ChatRequest) -> str:
        payload = {
            "model": req.model_id,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        data = self._post(self._provider.chat_endpoint, payload)
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed chat completion response: {exc}") from exc
        if not isinstance(content, str):
            raise TransportError("chat completion content is not text")
        return content

    def embed_batch(self, model: str, texts: Sequence[str]) -> list[list[float]]:
        payload = {"model": model, "input": list(texts)}
        data = self._post(self._provider.embed_endpoint, payload)
        try:
            items = sorted(data["data"], key=lambda item: item.get("index", 0))
            vectors = [[float(x) for x in item["embedding"]] for item in items]
        except (KeyError, TypeError, ValueError) as exc:
            raise TransportError(f"malformed embedding response: {exc}") from exc
        return vectors


def extract_json_object(raw: str) -> dict[str, Any]:
    """First JSON object in `raw`, tolerating surrounding prose and code fences."""
    decoder = json.JSONDecoder()
    for idx, char in enumerate(raw):
        if char != "{":
            continue
        try:
            value, _ = decoder.raw_decode(raw, idx)
        except ValueError:
            continue
        if isinstance(value, dict):
            return value
    raise ParseError(f"no JSON object found in response: {raw[:200]!r}")


def clamp_confidence(value: float) -> float:
    """Clamp a confidence into the open interval (0, 1) by epsilon."""
    return min(max(float(value), SCORE_EPS), 1.0 - SCORE_EPS)


def clamp_penalty(value: float) -> float:
    """Clamp a penalty into [0, 0.5]."""
    return min(max(float(value), 0.0), PENALTY_MAX)


def _require_number(item: Mapping[str, Any], key: str, where: str) -> float:
    value = item.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{where}: field {key!r} must be a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise SchemaError(f"{where}: field {key!r} must be finite")
    return value


def _require_name(item: Mapping[str, Any], key: str, where: str) -> str:
    value = item.get(key)
    if not isinstance(value, str) or not value.strip():
        raise SchemaError(f"{where}: field {key!r} must be a non-empty string")
    return value.strip()


def parse_structured(
    raw: str,
    tag: str,
    vocabulary: frozenset[str] | set[str] | None = None,
    on_unknown: str = "error",
):
    """Parse and validate a raw LLM reply against the schema for `tag`.

    Numeric fields are clamped to their legal ranges (confidences to the open
    (0, 1) interval, penalties to [0, 0.5]).  When a vocabulary is supplied,
    entries referencing terms outside it either raise VocabularyError
    (on_unknown="error") or are dropped (on_unknown="drop").
    """
    if tag not in SCHEMA_TAGS:
        raise ValueError(f"unknown response schema tag {tag!r}")
    if on_unknown not in ("error", "drop"):
        raise ValueError(f"on_unknown must be 'error' or 'drop', got {on_unknown!r}")
    obj = extract_json_object(raw)

    if tag == "refine_definition":
        definition = obj.get("definition")
        if not isinstance(definition, str) or not definition.strip():
            raise SchemaError("refine_definition: 'definition' must be a non-empty string")
        return definition.strip()

    if tag == "isa_judgment":
        answer = obj.get("answer")
        if not isinstance(answer, str):
            raise SchemaError("isa_judgment: 'answer' must be a string")
        verdict = answer.strip().strip(".!").casefold()
        if verdict == "yes":
            return True
        if verdict == "no":
            return False
        raise SchemaError(f"isa_judgment: 'answer' must be yes or no, got {answer!r}")

    if tag == "rank_and_score":
        entries = obj.get("parents")
        if not isinstance(entries, list):
            raise SchemaError("rank_and_score: 'parents' must be a list")
        parsed: list[tuple[str, float]] = []
        seen: set[str] = set()
        for item in entries:
            if not isinstance(item, Mapping):
                raise SchemaError(f"rank_and_score: entry must be an object, got {item!r}")
            name = _require_name(item, "parent", "rank_and_score")
            score = _require_number(item, "score", "rank_and_score")
            if vocabulary is not None and name not in vocabulary:
                if on_unknown == "drop":
                    log.warning("dropping unknown parent %r from ranking reply", name)
                    continue
                raise VocabularyError(f"unknown term {name!r} in rank_and_score response")
            if name in seen:
                continue
            seen.add(name)
            parsed.append((name, clamp_confidence(score)))
        return parsed

    entries = obj.get("penalties")
    if not isinstance(entries, list):
        raise SchemaError("penalty: 'penalties' must be a list")
    penalties: dict[str, float] = {}
    for item in entries:
        if not isinstance(item, Mapping):
            raise SchemaError(f"penalty: entry must be an object, got {item!r}")
        name = _require_name(item, "parent", "penalty")
        value = _require_number(item, "penalty", "penalty")
        if vocabulary is not None and name not in vocabulary:
            if on_unknown == "drop":
                log.warning("dropping unknown parent %r from penalty reply", name)
                continue
            raise VocabularyError(f"unknown term {name!r} in penalty response")
        if name not in penalties:
            penalties[name] = clamp_penalty(value)
    return penalties


class Gateway:
    """Single seam for all chat and embedding traffic.

    In replay mode every request must resolve through the transcript and no
    network access happens.  In record mode responses are memoized into the
    transcript; identical requests always return the stored response.
    """

    def __init__(
        self,
        backend: Backend | None,
        transcript: Transcript,
        provider: ProviderConfig | None = None,
    ):
        self._backend = backend
        self._transcript = transcript
        self._provider = provider or ProviderConfig()
        self._memo: dict[str, str] = {}
        self._lock = threading.Lock()
        self.counters = {
            "chat_requests": 0,
            "embed_texts": 0,
            "backend_chat_calls": 0,
            "backend_embed_calls": 0,
        }

    @property
    def mode(self) -> str:
        return self._transcript.mode

    @property
    def provider(self) -> ProviderConfig:
        return self._provider

    @property
    def max_in_flight(self) -> int:
        return self._provider.max_in_flight

    def _count(self, key: str, amount: int = 1) -> None:
        with self._lock:
            self.counters[key] += amount

    def _cached(self, digest: str) -> str | None:
        if self.mode == "live":
            with self._lock:
                return self._memo.get(digest)
        return self._transcript.get(digest)

    def chat(self, req: ChatRequest) -> str:
        digest = request_digest(req)
        self._count("chat_requests")
        if self.mode == "replay":
            text = self._transcript.get(digest)
            if text is None:
                raise MissingReplayEntry(
                    f"transcript has no entry for digest {digest} "
                    f"(tag={req.response_schema_tag})"
                )
            return text
        cached = self._cached(digest)
        if cached is not None:
            return cached
        if self._backend is None:
            raise TransportError("no backend configured for live requests")
        self._count("backend_chat_calls")
        text = self._backend.complete(req)
        if not isinstance(text, str):
            raise TransportError("backend returned a non-text chat response")
        if self.mode == "record":
            self._transcript.put(digest, chat_digest_payload(req), text)
        else:
            with self._lock:
                self._memo[digest] = text
        return text

    def chat_structured(
        self,
        req: ChatRequest,
        vocabulary: frozenset[str] | set[str] | None = None,
        on_unknown: str = "error",
    ):
        """Chat plus schema validation, with one bounded reprompt on failure."""
        raw = self.chat(req)
        try:
            return parse_structured(raw, req.response_schema_tag, vocabulary, on_unknown)
        except (ParseError, SchemaError, VocabularyError) as first:
            log.warning("structured parse failed (%s); reprompting once", first)
            retry = replace(req, user_prompt=req.user_prompt + "\n\n" + REPROMPT_INSTRUCTION)
            raw = self.chat(retry)
            try:
                return parse_structured(raw, req.response_schema_tag, vocabulary, on_unknown)
            except (ParseError, SchemaError, VocabularyError) as second:
                raise type(second)(
                    f"{second} after reprompt; raw response: {raw[:500]!r}"
                ) from second

    def embed(self, texts: Sequence[str]) -> list[tuple[float, ...]]:
        """Unit-norm embeddings for `texts`, one per input, in input order.

        Vectors are L2-normalized gateway-side regardless of provider
        behavior.  Each text is cached under its own digest, so batching
        never affects replay identity.
        """
        texts = list(texts)
        if not texts:
            raise ValueError("texts must be non-empty")
        for text in texts:
            if not isinstance(text, str) or not text:
                raise ValueError("every text must be a non-empty string")
        model = self._provider.embed_model
        digests = [embed_digest(model, text) for text in texts]
        self._count("embed_texts", len(texts))

        misses: list[tuple[str, str]] = []
        seen_missing: set[str] = set()
        for digest, text in zip(digests, texts):
            if self._cached(digest) is None and digest not in seen_missing:
                seen_missing.add(digest)
                misses.append((digest, text))
        if misses and self.mode == "replay":
            digest, text = misses[0]
            raise MissingReplayEntry(
                f"transcript has no embedding for digest {digest} (text={text[:80]!r})"
            )
        if misses:
            if self._backend is None:
                raise TransportError("no backend configured for embedding requests")
            batch_size = max(1, self._provider.embed_batch_size)
            for start in range(0, len(misses), batch_size):
                batch = misses[start : start + batch_size]
                self._count("backend_embed_calls")
                vectors = self._backend.embed_batch(model, [text for _, text in batch])
                if len(vectors) != len(batch):
                    raise DimensionMismatch(
                        f"provider returned {len(vectors)} vectors for {len(batch)} inputs"
                    )
                for (digest, text), vector in zip(batch, vectors):
                    raw = json.dumps([float(x) for x in vector], separators=(",", ":"))
                    if self.mode == "record":
                        self._transcript.put(digest, embed_digest_payload(model, text), raw)
                    else:
                        with self._lock:
                            self._memo[digest] = raw

        out: list[tuple[float, ...]] = []
        dim: int | None = None
        for digest, text in zip(digests, texts):
            raw = self._cached(digest)
            if raw is None:
                raise MissingReplayEntry(f"embedding for {text[:80]!r} is unavailable")
            try:
                values = [float(x) for x in json.loads(raw)]
            except (ValueError, TypeError) as exc:
                raise TransportError(f"malformed stored embedding: {exc}") from exc
            if not values:
                raise DimensionMismatch("provider returned an empty embedding")
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise DimensionMismatch(
                    f"embedding dimensions differ: {len(values)} vs {dim}"
                )
            # fsum keeps the norm independent of summation order across platforms
            norm = math.sqrt(math.fsum(x * x for x in values))
            if norm < 1e-12:
                raise TransportError("embedding provider returned a zero vector")
            out.append(tuple(x / norm for x in values))
        return out


def map_concurrent(fn: Callable, items: Sequence, max_workers: int) -> list:
    """Apply `fn` over `items`, results in input order; serial when workers <= 1."""
    items = list(items)
    if max_workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, items))
