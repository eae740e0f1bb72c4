"""Completion backends: a real HTTP chat endpoint and a deterministic mock.

Both share one front door, complete(), which consults the disk cache,
invokes the concrete backend on a miss, prices the call, and updates the
cost ledger exactly once per non-cache call. Cache writes go through a
temp file plus rename so concurrent workers never see half a record.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass

import requests

from .errors import (
    AuthError,
    MockMissFixture,
    RateLimitedExhausted,
    TransportError,
)
from .prompting import PromptPayload

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.0
DEFAULT_TOP_P = 0.95
# not dictated by any provider; plain configuration
DEFAULT_MAX_TOKENS = 1024

_BACKOFF_BASE_S = 1.0
_BACKOFF_CAP_S = 30.0


@dataclass(frozen=True)
class CompletionRequest:
    model_id: str
    payload: PromptPayload
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency_ms: int
    cost_usd: float
    from_cache: bool


def cache_key(request: CompletionRequest) -> str:
    """Stable digest of everything that can change a completion."""
    blob = json.dumps(
        {
            "model_id": request.model_id,
            "system": request.payload.system,
            "user": request.payload.user,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class DiskCache:
    """One JSON record per key under a directory."""

    def __init__(self, directory):
        self.directory = str(directory)
        os.makedirs(self.directory, exist_ok=True)

    def _path(self, key):
        return os.path.join(self.directory, f"{key}.json")

    def get(self, key):
        try:
            with open(self._path(key), "r", encoding="utf-8") as fh:
                return json.load(fh)
        except FileNotFoundError:
            return None

    def put(self, key, record):
        path = self._path(key)
        tmp = f"{path}.tmp.{os.getpid()}.{threading.get_ident()}"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(record, fh, sort_keys=True, ensure_ascii=False)
        os.replace(tmp, path)

    def stats(self):
        count = 0
        total = 0
        for name in os.listdir(self.directory):
            if name.endswith(".json"):
                count += 1
                total += os.path.getsize(os.path.join(self.directory, name))
        return {"records": count, "bytes": total}

    def clear(self):
        removed = 0
        for name in os.listdir(self.directory):
            if name.endswith(".json"):
                os.remove(os.path.join(self.directory, name))
                removed += 1
        return removed


class CostLedger:
    """Per-model call and token accounting; safe for concurrent writers."""

    def __init__(self):
        self._lock = threading.Lock()
        self._rows = {}

    def record(self, model_id, tokens_in, tokens_out, cost_usd):
        with self._lock:
            row = self._rows.setdefault(
                model_id, {"calls": 0, "tokens_in": 0, "tokens_out": 0, "cost_usd": 0.0}
            )
            row["calls"] += 1
            row["tokens_in"] += tokens_in
            row["tokens_out"] += tokens_out
            row["cost_usd"] += cost_usd

    def rows(self):
        with self._lock:
            snapshot = [(model, dict(row)) for model, row in self._rows.items()]
        snapshot.sort(key=lambda item: (-item[1]["cost_usd"], item[0]))
        return snapshot

    @property
    def total_usd(self):
        with self._lock:
            return sum(row["cost_usd"] for row in self._rows.values())

    def to_dict(self):
        return {
            "models": {model: row for model, row in self.rows()},
            "total_usd": self.total_usd,
        }


def ledger_report(ledger: CostLedger) -> str:
    """Plain-text table, most expensive model first, total last."""
    lines = [f"{'model':40s} {'calls':>7s} {'tok_in':>10s} {'tok_out':>10s} {'cost_usd':>10s}"]
    for model, row in ledger.rows():
        lines.append(
            f"{model:40s} {row['calls']:>7d} {row['tokens_in']:>10d} "
            f"{row['tokens_out']:>10d} {row['cost_usd']:>10.4f}"
        )
    lines.append(f"{'TOTAL':40s} {'':7s} {'':10s} {'':10s} {ledger.total_usd:>10.4f}")
    return "\n".join(lines)


class CompletionBackend:
    """Shared cache/ledger/pricing plumbing; subclasses implement _invoke."""

    backend_id = "abstract"

    def __init__(self, pricing=None, cache=None, ledger=None):
        # pricing maps model_id to per-million-token USD rates
        self._pricing = pricing or {}
        self._cache = cache
        self._ledger = ledger

    @property
    def ledger(self):
        return self._ledger

    @property
    def cache(self):
        return self._cache

    def _cost(self, model_id, prompt_tokens, completion_tokens):
        rates = self._pricing.get(model_id, {})
        rate_in = rates.get("input", 0.0)
        rate_out = rates.get("output", 0.0)
        return (prompt_tokens * rate_in + completion_tokens * rate_out) / 1e6

    def complete(self, request: CompletionRequest) -> CompletionResult:
        key = cache_key(request)
        if self._cache is not None:
            record = self._cache.get(key)
            if record is not None:
                return CompletionResult(
                    text=record["text"],
                    prompt_tokens=record["prompt_tokens"],
                    completion_tokens=record["completion_tokens"],
                    latency_ms=0,
                    cost_usd=self._cost(
                        request.model_id, record["prompt_tokens"], record["completion_tokens"]
                    ),
                    from_cache=True,
                )
        text, prompt_tokens, completion_tokens, latency_ms = self._invoke(request)
        cost = self._cost(request.model_id, prompt_tokens, completion_tokens)
        if self._ledger is not None:
            self._ledger.record(request.model_id, prompt_tokens, completion_tokens, cost)
        if self._cache is not None:
            self._cache.put(
                key,
                {
                    "key": key,
                    "model_id": request.model_id,
                    "temperature": request.temperature,
                    "top_p": request.top_p,
                    "max_tokens": request.max_tokens,
                    "system_sha256": hashlib.sha256(
                        request.payload.system.encode("utf-8")
                    ).hexdigest(),
                    "user_sha256": hashlib.sha256(
                        request.payload.user.encode("utf-8")
                    ).hexdigest(),
                    "text": text,
                    "prompt_tokens": prompt_tokens,
                    "completion_tokens": completion_tokens,
                },
            )
        return CompletionResult(
            text=text,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            latency_ms=latency_ms,
            cost_usd=cost,
            from_cache=False,
        )

    def _invoke(self, request):
        raise NotImplementedError


class HttpBackend(CompletionBackend):
    """Chat-completions client with retries and capped jittered backoff.

    Transient failures (timeouts, connection drops, HTTP 429 and 5xx) are
    retried up to `retries` attempts total. 401/403 fail immediately as
    AuthError. Any other non-200, or an unreadable body, fails immediately
    as TransportError since repeating it would change nothing.
    """

    def __init__(
        self,
        endpoint,
        api_key_env="EHRQA_API_KEY",
        retries=4,
        timeout_s=60.0,
        pricing=None,
        cache=None,
        ledger=None,
        session=None,
        sleeper=None,
        rng=None,
    ):
        super().__init__(pricing=pricing, cache=cache, ledger=ledger)
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.retries = retries
        self.timeout_s = timeout_s
        self.backend_id = f"http:{endpoint}"
        self._session = session if session is not None else requests.Session()
        self._sleep = sleeper if sleeper is not None else time.sleep
        self._rng = rng if rng is not None else random.Random()
        self.network_calls = 0

    def _backoff(self, attempt):
        delay = min(_BACKOFF_BASE_S * (2 ** attempt), _BACKOFF_CAP_S)
        self._sleep(delay * self._rng.random())

    def _invoke(self, request):
        api_key = os.environ.get(self.api_key_env)
        if not api_key:
            raise AuthError(f"environment variable {self.api_key_env} is not set")
        body = {
            "model": request.model_id,
            "messages": [
                {"role": "system", "content": request.payload.system},
                {"role": "user", "content": request.payload.user},
            ],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }
        headers = {"Authorization": f"Bearer {api_key}"}
        rate_limited = False
        last_error = "no attempts made"
        for attempt in range(self.retries):
            if attempt > 0:
                self._backoff(attempt - 1)
            self.network_calls += 1
            started = time.monotonic()
            try:
                response = self._session.post(
                    self.endpoint, json=body, headers=headers, timeout=self.timeout_s
                )
            except requests.RequestException as exc:
                last_error = f"transport: {exc}"
                log.warning("attempt %d/%d failed: %s", attempt + 1, self.retries, last_error)
                continue
            if response.status_code in (401, 403):
                raise AuthError(f"HTTP {response.status_code} from {self.endpoint}")
            if response.status_code == 429:
                rate_limited = True
                last_error = "HTTP 429"
                log.warning("attempt %d/%d rate limited", attempt + 1, self.retries)
                continue
            if response.status_code >= 500:
                rate_limited = False
                last_error = f"HTTP {response.status_code}"
                log.warning("attempt %d/%d failed: %s", attempt + 1, self.retries, last_error)
                continue
            if response.status_code != 200:
                raise TransportError(f"HTTP {response.status_code} from {self.endpoint}")
            latency_ms = int((time.monotonic() - started) * 1000)
            try:
                data = response.json()
                text = data["choices"][0]["message"]["content"]
                usage = data.get("usage", {})
                prompt_tokens = int(usage.get("prompt_tokens", 0))
                completion_tokens = int(usage.get("completion_tokens", 0))
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise TransportError(f"malformed completion body: {exc}") from exc
            return text, prompt_tokens, completion_tokens, latency_ms
        if rate_limited:
            raise RateLimitedExhausted(f"gave up after {self.retries} attempts")
        raise TransportError(f"gave up after {self.retries} attempts: {last_error}")


_QUERY_STEMS = (
    "What is the cause of",
    "Why was",
    "Should the patient continue",
    "What explains",
    "Is further testing needed for",
)
_QUERY_TOPICS = (
    "the elevated creatinine",
    "the intermittent chest pain",
    "the recent medication change",
    "the persistent dizziness",
    "the abnormal imaging finding",
)
_QUERY_TAILS = (
    "after discharge",
    "given the current regimen",
    "based on the documented history",
    "at this time",
)

_ANSWER_OPENERS = (
    "The care team reviewed the findings described in your note.",
    "Your recent results were compared against the earlier visit.",
    "The note explains what changed since your last appointment.",
    "Your symptoms were considered together with the test results.",
)
_ANSWER_MIDDLES = (
    "The medication was adjusted because of the findings described there.",
    "The imaging did not show anything that needs urgent treatment.",
    "The laboratory values are moving back toward the expected range.",
    "The plan is to repeat the measurements at the next visit.",
)
_ANSWER_CLOSERS = (
    "Contact your clinician if the symptoms return or get worse.",
    "Keep taking the current medicines unless you are told otherwise.",
    "A follow-up appointment will confirm that things stay stable.",
    "Bring an updated medication list to the next appointment.",
)

_REFUSAL = "I'm sorry, I cannot determine that from the provided information."

_NOTE_ID_RE = re.compile(r"^\[N?(\d+)\]", re.MULTILINE)
_ANSWER_IDX_RE = re.compile(r"\[S(\d+)\]")
_CANDIDATE_RE = re.compile(r"^Candidate ([A-Z]):", re.MULTILINE)
# follow-up alignment payloads name the still-uncited sentences on one line
_UNCITED_RE = re.compile(r"Remaining uncited answer sentences: (.+)")


def scripted_responder(request: CompletionRequest) -> str:
    """Deterministic stand-in model.

    Looks at the rendered payload to decide which subtask is being asked,
    then fabricates a plausible reply seeded by (model_id, user text), so
    different models disagree with each other but never with themselves.
    A small deterministic slice of replies is intentionally unparseable.
    """
    user = request.payload.user
    digest = hashlib.sha256(
        (request.model_id + "\x00" + user).encode("utf-8")
    ).digest()
    rng = random.Random(int.from_bytes(digest[:8], "big"))

    if '"choice"' in user:
        letters = sorted(set(_CANDIDATE_RE.findall(user))) or ["A"]
        return json.dumps({"choice": rng.choice(letters)})

    uncited = _UNCITED_RE.search(user)
    if uncited:
        answer_indices = sorted(set(int(m) for m in _ANSWER_IDX_RE.findall(uncited.group(1))))
    else:
        answer_indices = sorted(set(int(m) for m in _ANSWER_IDX_RE.findall(user)))
    if answer_indices:
        if digest[0] < 16:
            return _REFUSAL
        note_ids = sorted(set(int(m) for m in _NOTE_ID_RE.findall(user)))
        entries = {}
        for idx in answer_indices:
            if note_ids and rng.random() > 0.3:
                picked = sorted(rng.sample(note_ids, k=rng.randint(1, min(2, len(note_ids)))))
            else:
                picked = []
            entries[f"S{idx}"] = picked
        return json.dumps(entries)

    if '"label"' in user:
        roll = rng.random()
        label = "essential" if roll < 0.4 else ("supplementary" if roll < 0.6 else "not-relevant")
        return json.dumps({"label": label})

    if '"sentence_ids"' in user:
        if digest[0] < 16:
            return _REFUSAL
        note_ids = sorted(set(int(m) for m in _NOTE_ID_RE.findall(user)))
        k = rng.randint(0, max(1, len(note_ids) // 2)) if note_ids else 0
        picked = sorted(rng.sample(note_ids, k=k)) if k else []
        reply = json.dumps({"sentence_ids": picked})
        if "step by step" in user:
            return f"Let me work through the note. The key sentences stand out.\n{reply}"
        return reply

    if '"query"' in user:
        if digest[0] < 16:
            return _REFUSAL
        query = f"{rng.choice(_QUERY_STEMS)} {rng.choice(_QUERY_TOPICS)} {rng.choice(_QUERY_TAILS)}"
        if digest[1] < 24:
            # occasionally blow the length limit on purpose
            query += " considering the full history and all prior laboratory results reviewed"
        return json.dumps({"query": query})

    if digest[0] < 8:
        return ""
    return " ".join(
        (rng.choice(_ANSWER_OPENERS), rng.choice(_ANSWER_MIDDLES), rng.choice(_ANSWER_CLOSERS))
    )


class MockBackend(CompletionBackend):
    """Offline backend: fixture lookup first, scripted responder otherwise.

    Fixtures map cache keys to either a reply string or a record with
    text and token counts. strict=True turns responder fallback off.
    """

    backend_id = "mock"

    def __init__(self, fixtures=None, strict=False, responder=scripted_responder,
                 pricing=None, cache=None, ledger=None):
        super().__init__(pricing=pricing, cache=cache, ledger=ledger)
        self._fixtures = fixtures or {}
        self._strict = strict
        self._responder = responder

    def _invoke(self, request):
        key = cache_key(request)
        entry = self._fixtures.get(key)
        if entry is not None:
            if isinstance(entry, str):
                entry = {"text": entry}
            text = entry["text"]
            prompt_tokens = entry.get("prompt_tokens", _approx_tokens(request.payload))
            completion_tokens = entry.get("completion_tokens", max(1, len(text) // 4))
            return text, prompt_tokens, completion_tokens, 0
        if self._strict:
            raise MockMissFixture(key)
        text = self._responder(request)
        return text, _approx_tokens(request.payload), max(1, len(text) // 4), 0


def _approx_tokens(payload: PromptPayload) -> int:
    return max(1, (len(payload.system) + len(payload.user)) // 4)
