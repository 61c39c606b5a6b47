"""Agent call contract: requests, pricing, a shared dollar ledger, retries and backends.

Every agent in the system (judge, match agent, prompt optimizer, understanding
model) goes through :func:`complete`, which projects the cost of a call,
reserves it against a :class:`CostLedger`, retries transport failures, and
charges the actual usage once on success.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence, Union

from .assets import asset_path

logger = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 32000
DEFAULT_RETRIES = 3
DEFAULT_BACKOFF_S = 0.5
MEDIA_KINDS = ("image", "audio", "video")


class BackendError(Exception):
    pass


class BudgetExhausted(BackendError):
    """The shared budget cannot cover the next call. Callers stop gracefully."""


class TransportError(BackendError):
    """The provider could not be reached (retryable)."""


class ProtocolError(BackendError):
    """The provider answered with a payload we cannot interpret."""


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class MediaPart:
    kind: str
    uri: str

    def __post_init__(self) -> None:
        if self.kind not in MEDIA_KINDS:
            raise ValueError(f"media kind must be one of {MEDIA_KINDS}, got {self.kind!r}")


Part = Union[TextPart, MediaPart]


@dataclass(frozen=True)
class ModelRequest:
    system_prompt: str
    user_parts: tuple[Part, ...]
    temperature: float = 0.0
    max_tokens: int = DEFAULT_MAX_TOKENS
    seed: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "user_parts", tuple(self.user_parts))
        if not self.user_parts:
            raise ValueError("a request needs at least one user part")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    def to_dict(self) -> dict[str, Any]:
        parts = []
        for p in self.user_parts:
            if isinstance(p, TextPart):
                parts.append({"type": "text", "text": p.text})
            else:
                parts.append({"type": p.kind, "uri": p.uri})
        return {
            "system_prompt": self.system_prompt,
            "user_parts": parts,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "seed": self.seed,
        }

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def user_text(self) -> str:
        return "\n".join(p.text for p in self.user_parts if isinstance(p, TextPart))

    def media(self, kind: str | None = None) -> list[str]:
        return [p.uri for p in self.user_parts if isinstance(p, MediaPart) and (kind is None or p.kind == kind)]


@dataclass(frozen=True)
class ModelResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int


def count_tokens(text: str) -> int:
    """Whitespace token estimate used by the stub backend."""
    return len(text.split())


def estimate_prompt_tokens(req: ModelRequest, per_media: int = 1) -> int:
    n = count_tokens(req.system_prompt)
    for p in req.user_parts:
        n += count_tokens(p.text) if isinstance(p, TextPart) else per_media
    return n


@dataclass(frozen=True)
class Pricing:
    usd_per_1M_input_tokens: float
    usd_per_1M_output_tokens: float

    def cost(self, prompt_tokens: int, completion_tokens: int) -> float:
        return (
            prompt_tokens * self.usd_per_1M_input_tokens + completion_tokens * self.usd_per_1M_output_tokens
        ) / 1_000_000


def load_pricing(path: str | Path | None = None) -> dict[str, Pricing]:
    path = Path(path) if path is not None else asset_path("pricing.json")
    data = json.loads(path.read_text(encoding="utf-8"))
    return {
        name: Pricing(float(v["usd_per_1M_input_tokens"]), float(v["usd_per_1M_output_tokens"]))
        for name, v in data.items()
    }


@dataclass(frozen=True)
class LedgerEntry:
    tag: str
    prompt_tokens: int
    completion_tokens: int
    usd: float

    @property
    def tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


class CostLedger:
    """Shared dollar budget. Thread-safe; updates are serialized by a lock."""

    def __init__(self, budget_usd: float):
        if not budget_usd > 0:
            raise ValueError("budget_usd must be > 0")
        self.budget_usd = float(budget_usd)
        self.entries: list[LedgerEntry] = []
        self.exhausted = False
        self._reserved = 0.0
        self._lock = threading.Lock()

    @property
    def spent_usd(self) -> float:
        return math.fsum(e.usd for e in self.entries)

    def spent_by_tag(self, tag: str) -> float:
        return math.fsum(e.usd for e in self.entries if e.tag == tag)

    def reserve(self, usd: float) -> None:
        with self._lock:
            if self.exhausted:
                raise BudgetExhausted("budget already exhausted")
            free = self.budget_usd - self.spent_usd - self._reserved
            if usd > free + 1e-12:
                self.exhausted = True
                raise BudgetExhausted(f"projected cost ${usd:.6f} exceeds remaining ${max(free, 0.0):.6f}")
            self._reserved += usd

    def release(self, usd: float) -> None:
        with self._lock:
            self._reserved = max(self._reserved - usd, 0.0)

    def commit(self, reserved: float, entry: LedgerEntry) -> LedgerEntry:
        with self._lock:
            self._reserved = max(self._reserved - reserved, 0.0)
            room = self.budget_usd - self.spent_usd
            if entry.usd > room:
                # actual usage beat the projection; clip so spent never exceeds budget
                logger.warning("call tagged %r cost $%.6f, only $%.6f left; clipping", entry.tag, entry.usd, room)
                entry = LedgerEntry(entry.tag, entry.prompt_tokens, entry.completion_tokens, max(room, 0.0))
                self.exhausted = True
            self.entries.append(entry)
            return entry

    def record(self, tag: str, prompt_tokens: int, completion_tokens: int, usd: float) -> LedgerEntry:
        """Charge a call made outside :func:`complete`."""
        self.reserve(usd)
        return self.commit(usd, LedgerEntry(tag, prompt_tokens, completion_tokens, usd))

    def to_dict(self) -> dict[str, Any]:
        return {
            "budget_usd": self.budget_usd,
            "spent_usd": self.spent_usd,
            "exhausted": self.exhausted,
            "entries": [
                {"tag": e.tag, "prompt_tokens": e.prompt_tokens, "completion_tokens": e.completion_tokens, "usd": e.usd}
                for e in self.entries
            ],
        }


def remaining_budget(ledger: CostLedger) -> float:
    return ledger.budget_usd - ledger.spent_usd


class Backend(Protocol):
    name: str
    pricing: Pricing

    def project_tokens(self, req: ModelRequest) -> tuple[int, int]:
        """Upper estimate of (prompt, completion) tokens, used to reserve budget."""

    def send(self, req: ModelRequest) -> ModelResponse:
        """Perform the call. Raise TransportError for retryable failures."""


def complete(
    backend: Backend,
    req: ModelRequest,
    ledger: CostLedger,
    tag: str,
    *,
    retries: int = DEFAULT_RETRIES,
    backoff_s: float = DEFAULT_BACKOFF_S,
    sleep: Callable[[float], None] = time.sleep,
) -> ModelResponse:
    projected = backend.pricing.cost(*backend.project_tokens(req))
    ledger.reserve(projected)
    try:
        for attempt in range(retries + 1):
            try:
                response = backend.send(req)
                break
            except TransportError as exc:
                if attempt == retries:
                    raise TransportError(f"{backend.name}: giving up after {retries} retries: {exc}") from exc
                delay = backoff_s * 2**attempt
                logger.info("%s: transport error (%s); retry %d in %.2fs", backend.name, exc, attempt + 1, delay)
                sleep(delay)
    except BaseException:
        ledger.release(projected)
        raise
    usd = backend.pricing.cost(response.prompt_tokens, response.completion_tokens)
    ledger.commit(projected, LedgerEntry(tag, response.prompt_tokens, response.completion_tokens, usd))
    return response


Responder = Callable[[ModelRequest], str]


class ScriptedBackend:
    """Deterministic stub.

    Resolution order for a request: exact fingerprint match, then the
    ``responder`` callable, then substring ``rules`` (first match wins, checked
    against the system prompt plus user text), then the ordered ``queue``,
    then ``default``. Token counts use the whitespace estimate.
    """

    def __init__(
        self,
        name: str = "stub",
        *,
        responses: Mapping[str, str] | None = None,
        responder: Responder | None = None,
        rules: Sequence[tuple[str, str]] = (),
        queue: Iterable[str] = (),
        default: str | None = None,
        pricing: Pricing | None = None,
    ):
        self.name = name
        self.responses = dict(responses or {})
        self.responder = responder
        self.rules = list(rules)
        self.queue = deque(queue)
        self.default = default
        self.pricing = pricing or Pricing(1.0, 4.0)
        self.calls: list[ModelRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_script(cls, script: Mapping[str, Any], name: str = "stub", pricing: Pricing | None = None) -> "ScriptedBackend":
        rules = [(r["contains"], r["response"]) for r in script.get("rules", [])]
        return cls(
            name,
            responses=script.get("responses"),
            rules=rules,
            queue=script.get("queue", []),
            default=script.get("default"),
            pricing=pricing,
        )

    def _resolve(self, req: ModelRequest, consume: bool) -> str:
        fp = req.fingerprint()
        if fp in self.responses:
            return self.responses[fp]
        if self.responder is not None:
            return self.responder(req)
        if self.rules:
            haystack = req.system_prompt + "\n" + req.user_text()
            for needle, text in self.rules:
                if needle in haystack:
                    return text
        with self._lock:
            if self.queue:
                return self.queue.popleft() if consume else self.queue[0]
        if self.default is not None:
            return self.default
        raise ProtocolError(f"{self.name}: no scripted response for request {fp[:12]}")

    def project_tokens(self, req: ModelRequest) -> tuple[int, int]:
        return estimate_prompt_tokens(req), count_tokens(self._resolve(req, consume=False))

    def send(self, req: ModelRequest) -> ModelResponse:
        text = self._resolve(req, consume=True)
        with self._lock:
            self.calls.append(req)
        return ModelResponse(text, estimate_prompt_tokens(req), count_tokens(text))


class HTTPBackend:
    """OpenAI-compatible chat-completions client.

    The API key is read from ``AVE_API_KEY`` and the base URL from
    ``AVE_API_BASE`` unless given explicitly. Media parts are sent as
    ``<kind>_url`` content items.
    """

    def __init__(
        self,
        model: str,
        pricing: Pricing,
        *,
        base_url: str | None = None,
        api_key: str | None = None,
        timeout_s: float = 600.0,
        client: Any = None,
        media_token_estimate: int = 2000,
    ):
        import httpx

        self.name = model
        self.model = model
        self.pricing = pricing
        self.base_url = (base_url or os.environ.get("AVE_API_BASE", "https://api.openai.com/v1")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("AVE_API_KEY", "")
        self.media_token_estimate = media_token_estimate
        self._client = client or httpx.Client(timeout=timeout_s)

    def project_tokens(self, req: ModelRequest) -> tuple[int, int]:
        # whitespace words undercount subword tokens; double them
        return 2 * estimate_prompt_tokens(req, per_media=self.media_token_estimate // 2), req.max_tokens

    def payload(self, req: ModelRequest) -> dict[str, Any]:
        content: list[dict[str, Any]] = []
        for p in req.user_parts:
            if isinstance(p, TextPart):
                content.append({"type": "text", "text": p.text})
            else:
                content.append({"type": f"{p.kind}_url", f"{p.kind}_url": {"url": p.uri}})
        body: dict[str, Any] = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": content},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        if req.seed is not None:
            body["seed"] = req.seed
        return body

    def send(self, req: ModelRequest) -> ModelResponse:
        import httpx

        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            r = self._client.post(f"{self.base_url}/chat/completions", json=self.payload(req), headers=headers)
        except httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        if r.status_code == 429 or r.status_code >= 500:
            raise TransportError(f"HTTP {r.status_code}")
        if r.status_code >= 400:
            raise ProtocolError(f"HTTP {r.status_code}: {r.text[:200]}")
        try:
            data = r.json()
            text = data["choices"][0]["message"]["content"]
            usage = data.get("usage") or {}
            prompt_tokens = int(usage.get("prompt_tokens", estimate_prompt_tokens(req)))
            completion_tokens = int(usage.get("completion_tokens", count_tokens(text or "")))
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion payload: {exc!r}") from exc
        if not isinstance(text, str):
            raise ProtocolError("completion content is not text")
        return ModelResponse(text, prompt_tokens, completion_tokens)


@dataclass
class Agents:
    """Backends per role. Roles that a command does not use may stay None."""

    judge: Any
    match: Any
    optimizer: Any = None
    understanding: Any = None
