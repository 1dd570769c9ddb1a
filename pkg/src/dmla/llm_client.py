"""Prompt assembly, seller masking, service transports and ``<final>`` parsing."""

from __future__ import annotations

import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

from dmla.errors import (
    AmbiguousFinalError,
    ConfigurationError,
    FinalParseError,
    FinalTagError,
    MissingFinalError,
    PredictionUnavailableError,
    ServiceError,
)
from dmla.prompts import SYSTEM_PROMPTS

KINDS = ("price", "feedback_score")
MAX_IMAGE_LINKS = 12
API_KEY_ENV = "DMLA_API_KEY"
DEFAULT_MODEL_ID = "gpt-5-mini-2025-08-07"

# Field labels as they appear in listing text. Matching during masking is
# case-insensitive. No label occurs verbatim in the system prompts.
DEFAULT_BLOCKLIST = (
    "Feedback Score",
    "FeedbackScore",
    "Positive Feedback Percent",
    "PositiveFeedbackPercent",
    "Feedback Rating Star",
    "FeedbackRatingStar",
    "Seller ID",
    "SellerID",
    "UserID",
    "Seller",
)


def _check_kind(kind: str) -> str:
    if kind not in KINDS:
        raise ConfigurationError(f"unknown prompt kind {kind!r}; expected one of {KINDS}")
    return kind


def mask_seller_fields(text: str, blocklist: Sequence[str] = DEFAULT_BLOCKLIST) -> str:
    """Strip blocklisted ``label: value`` pairs and any bare label occurrences.

    Lines left empty by the removal are dropped. Repeats until no label
    remains, so removal cannot splice a new occurrence together.
    """
    if not blocklist:
        raise ConfigurationError("masking requested with an empty blocklist")
    # Longest labels first so "Seller ID" is consumed before "Seller".
    labels = sorted(set(blocklist), key=len, reverse=True)
    pair = re.compile(
        r"[\"']?(?:" + "|".join(re.escape(b) for b in labels) + r")[\"']?\s*[:=]\s*"
        r"(?:\"[^\"\n]*\"|'[^'\n]*'|[^,;\n]*)[,;]?",
        re.IGNORECASE,
    )
    bare = re.compile("|".join(re.escape(b) for b in labels), re.IGNORECASE)
    out_lines = []
    for line in text.splitlines():
        cleaned = line
        while True:
            nxt = bare.sub("", pair.sub("", cleaned))
            if nxt == cleaned:
                break
            cleaned = nxt
        if cleaned != line and not cleaned.strip(" \t,;:"):
            continue
        out_lines.append(cleaned)
    return "\n".join(out_lines)


@dataclass(frozen=True)
class PromptRequest:
    kind: str
    listing_text: str
    image_links: tuple
    system_prompt: str
    listing_id: Optional[str] = None
    masked: bool = True


def build_prompt(
    kind: str,
    listing_text: str,
    image_links: Sequence[str] = (),
    mask: bool = True,
    blocklist: Sequence[str] = DEFAULT_BLOCKLIST,
    listing_id: Optional[str] = None,
) -> PromptRequest:
    """Request for one listing. Seller fields are masked for both kinds by default."""
    _check_kind(kind)
    if not listing_text or not listing_text.strip():
        raise ConfigurationError("listing_text must be non-empty")
    text = mask_seller_fields(listing_text, blocklist) if mask else listing_text
    return PromptRequest(
        kind=kind,
        listing_text=text,
        image_links=tuple(image_links)[:MAX_IMAGE_LINKS],
        system_prompt=SYSTEM_PROMPTS[kind],
        listing_id=listing_id,
        masked=mask,
    )


_FINAL = re.compile(r"<final>(.*?)</final>", re.DOTALL)
_DECIMAL = re.compile(r"\d+(?:\.\d+)?|\.\d+")
_INTEGER = re.compile(r"\d+")


def parse_final_tag(raw: str, kind: str):
    """Number inside the single ``<final>...</final>`` tag of ``raw``.

    Prices must be positive plain decimals; feedback scores must be plain
    non-negative integers. No signs, currency symbols or thousands separators.
    """
    _check_kind(kind)
    matches = _FINAL.findall(raw)
    opens = raw.count("<final>")
    if not matches:
        raise MissingFinalError("response has no <final>...</final> tag")
    if len(matches) > 1 or opens > 1:
        raise AmbiguousFinalError(f"response has {max(len(matches), opens)} <final> tags; expected exactly one")
    body = matches[0].strip()
    if kind == "feedback_score":
        if not _INTEGER.fullmatch(body):
            raise FinalParseError(f"feedback score must be a non-negative integer, got {body!r}")
        return int(body)
    if not _DECIMAL.fullmatch(body):
        raise FinalParseError(f"price must be a plain positive decimal, got {body!r}")
    value = float(body)
    if not value > 0:
        raise FinalParseError(f"price must be > 0, got {body!r}")
    return value


def build_payload(req: PromptRequest, model_id: str, extra_messages: Sequence[dict] = ()) -> dict:
    content = [{"type": "text", "text": req.listing_text}]
    content += [{"type": "image_url", "image_url": {"url": url}} for url in req.image_links]
    return {
        "model": model_id,
        "messages": [
            {"role": "system", "content": req.system_prompt},
            {"role": "user", "content": content},
            *extra_messages,
        ],
    }


def serialize_payload(payload: dict) -> bytes:
    return json.dumps(payload, ensure_ascii=False, sort_keys=True).encode("utf-8")


class Transport(Protocol):
    def send(self, payload: dict, request: PromptRequest) -> str: ...


class HttpTransport:
    """Chat-completions style JSON-over-HTTP endpoint authenticated with a bearer token."""

    def __init__(self, endpoint: str, api_key: Optional[str] = None, timeout: float = 120.0, client=None):
        import httpx

        if not endpoint:
            raise ConfigurationError("live transport needs an endpoint")
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not key:
            raise ConfigurationError(f"live transport needs {API_KEY_ENV} in the environment")
        self.endpoint = endpoint
        self._headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
        self._client = client or httpx.Client(timeout=timeout)
        self._httpx = httpx

    def send(self, payload: dict, request: PromptRequest) -> str:
        try:
            resp = self._client.post(self.endpoint, content=serialize_payload(payload), headers=self._headers)
        except self._httpx.HTTPError as exc:
            raise ServiceError(f"request to {self.endpoint} failed: {exc}") from exc
        if resp.status_code != 200:
            raise ServiceError(f"service returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ServiceError("unexpected response body shape") from exc


class MockTransport:
    """Replays canned responses and records every payload it receives.

    Transcripts live in ``<dir>/<listing_id>.<kind>.jsonl`` (falling back to
    ``<listing_id>.jsonl``); each line is ``{"request": ..., "response": "..."}``.
    Successive calls for one listing and kind get successive responses; the
    last one repeats once the file is exhausted.
    """

    def __init__(self, responses: dict):
        self._responses = {key: list(val) for key, val in responses.items()}
        self._cursor: dict = {}
        self._lock = threading.Lock()
        self.sent: list[bytes] = []

    @classmethod
    def from_dir(cls, directory) -> "MockTransport":
        directory = Path(directory)
        if not directory.is_dir():
            raise ConfigurationError(f"mock transcript directory {directory} does not exist")
        responses = {}
        for path in sorted(directory.glob("*.jsonl")):
            stem = path.name[: -len(".jsonl")]
            lines = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
            responses[stem] = [entry["response"] for entry in lines]
        return cls(responses)

    def _script(self, request: PromptRequest):
        for key in (f"{request.listing_id}.{request.kind}", str(request.listing_id)):
            if key in self._responses and self._responses[key]:
                return key
        return None

    def send(self, payload: dict, request: PromptRequest) -> str:
        with self._lock:
            self.sent.append(serialize_payload(payload))
            key = self._script(request)
            if key is None:
                raise ServiceError(f"no mock transcript for listing {request.listing_id!r} ({request.kind})")
            idx = self._cursor.get(key, 0)
            script = self._responses[key]
            self._cursor[key] = idx + 1
            return script[min(idx, len(script) - 1)]


def write_transcript(directory, listing_id: str, kind: str, exchanges: Sequence[tuple]) -> Path:
    """Write ``(request_payload, response_text)`` pairs in the mock transcript format."""
    path = Path(directory) / f"{listing_id}.{kind}.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for req, resp in exchanges:
            fh.write(json.dumps({"request": req, "response": resp}, ensure_ascii=False) + "\n")
    return path


class RateLimiter:
    """Token bucket shared across threads; ``rate`` tokens per second, burst of ``capacity``."""

    def __init__(self, rate: float, capacity: float = 1.0, clock: Callable = time.monotonic, sleep=time.sleep):
        if not rate > 0:
            raise ConfigurationError("rate must be > 0")
        self.rate = rate
        self.capacity = capacity
        self._tokens = capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self):
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


@dataclass(frozen=True)
class RetryPolicy:
    max: int = 2
    backoff: float = 0.0

    def __post_init__(self):
        if self.max < 0:
            raise ConfigurationError("retry max must be >= 0")


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass(frozen=True)
class PredictionRecord:
    request: PromptRequest
    raw_response: str
    parsed_value: float
    attempts: int
    model_id: str
    timestamp: str
    transcript: tuple = field(default=(), repr=False)  # every raw response, in order

    def to_dict(self) -> dict:
        return {
            "id": self.request.listing_id,
            "kind": self.request.kind,
            "value": self.parsed_value,
            "attempts": self.attempts,
            "model_id": self.model_id,
            "timestamp": self.timestamp,
            "masked": self.request.masked,
            "raw_response": self.raw_response,
        }


def _corrective_turn(raw: str, err: FinalTagError, kind: str) -> list[dict]:
    expect = "an integer" if kind == "feedback_score" else "a plain number"
    return [
        {"role": "assistant", "content": raw},
        {
            "role": "user",
            "content": f"Your answer could not be read: {err}. Reply again, ending with exactly one "
            f"<final>...</final> tag containing {expect}.",
        },
    ]


def predict(
    req: PromptRequest,
    transport: Transport,
    retry_policy: RetryPolicy = RetryPolicy(),
    rate_limiter: Optional[RateLimiter] = None,
    model_id: str = DEFAULT_MODEL_ID,
    clock: Callable[[], str] = _utc_now,
) -> PredictionRecord:
    """Query the service, retrying with the parse error fed back as a user turn.

    Raises ``ServiceError`` if the final attempt failed in transport and
    ``PredictionUnavailableError`` if it returned an unreadable answer.
    """
    extra: list[dict] = []
    transcript = []
    last_exc: Optional[Exception] = None
    total = retry_policy.max + 1
    for attempt in range(1, total + 1):
        if attempt > 1 and retry_policy.backoff:
            time.sleep(retry_policy.backoff * 2 ** (attempt - 2))
        if rate_limiter is not None:
            rate_limiter.acquire()
        payload = build_payload(req, model_id, extra)
        try:
            raw = transport.send(payload, req)
        except ServiceError as exc:
            last_exc = exc
            continue
        transcript.append(raw)
        try:
            value = parse_final_tag(raw, req.kind)
        except FinalTagError as exc:
            last_exc = exc
            extra = extra + _corrective_turn(raw, exc, req.kind)
            continue
        return PredictionRecord(
            request=req,
            raw_response=raw,
            parsed_value=value,
            attempts=attempt,
            model_id=model_id,
            timestamp=clock(),
            transcript=tuple(transcript),
        )
    if isinstance(last_exc, ServiceError):
        raise ServiceError(f"service failed after {total} attempts: {last_exc}") from last_exc
    raise PredictionUnavailableError(
        f"no readable prediction after {total} attempts: {last_exc}",
        attempts=total,
        last_response=transcript[-1] if transcript else None,
    )


@dataclass(frozen=True)
class PredictionFailure:
    index: int
    listing_id: Optional[str]
    error: str
    error_type: str

    def to_dict(self) -> dict:
        return {"index": self.index, "id": self.listing_id, "error_type": self.error_type, "error": self.error}


@dataclass(frozen=True)
class BatchResult:
    records: list
    failures: list


def _listing_fields(listing):
    if isinstance(listing, dict):
        return listing.get("id"), listing.get("text"), listing.get("image_links", ())
    return listing.id, listing.text, listing.image_links


def predict_batch(
    listings: Sequence,
    kind: str,
    transport: Transport,
    parallelism: int = 1,
    rate_limit: Optional[float] = None,
    retry_policy: RetryPolicy = RetryPolicy(),
    model_id: str = DEFAULT_MODEL_ID,
    mask: bool = True,
    blocklist: Sequence[str] = DEFAULT_BLOCKLIST,
    clock: Callable[[], str] = _utc_now,
) -> BatchResult:
    """Predict every listing; records keep input order and failures never abort the batch."""
    if parallelism < 1:
        raise ConfigurationError("parallelism must be >= 1")
    limiter = RateLimiter(rate_limit) if rate_limit else None

    def one(idx_listing):
        idx, listing = idx_listing
        lid, text, links = _listing_fields(listing)
        try:
            req = build_prompt(kind, text or "", links, mask=mask, blocklist=blocklist, listing_id=lid)
            return predict(req, transport, retry_policy, limiter, model_id, clock)
        except (ServiceError, PredictionUnavailableError, ConfigurationError) as exc:
            return PredictionFailure(idx, lid, str(exc), type(exc).__name__)

    items = list(enumerate(listings))
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(one, items))
    else:
        outcomes = [one(item) for item in items]
    records = [o for o in outcomes if isinstance(o, PredictionRecord)]
    failures = [o for o in outcomes if isinstance(o, PredictionFailure)]
    return BatchResult(records=records, failures=failures)
