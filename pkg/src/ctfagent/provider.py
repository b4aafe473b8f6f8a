"""Chat-completion backends, the tiered model registry and cost accounting.

Every model call in the framework goes through :class:`Provider.complete`,
which resolves the model, enforces its context limit, retries transport
failures a bounded number of times and appends one :class:`LedgerEntry`
per successful call.

Costs are kept in integer micro-currency units (1 unit = 1e-6 currency) so
that the ledger total is an exact sum of its entries.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from enum import Enum
from pathlib import Path
from typing import Any, Protocol

import httpx

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant", "tool")
MAX_ATTEMPTS = 3
RETRY_BACKOFF_S = 1.0


class Tier(str, Enum):
    MID = "MID"
    TOP = "TOP"


class ProviderError(Exception):
    """Base class for model call failures."""


class UnknownModelError(ProviderError):
    pass


class DuplicateModelError(ProviderError):
    pass


class MissingTierError(ProviderError):
    pass


class TransportError(ProviderError):
    """Retryable backend failure (connection reset, 5xx, timeout)."""


class ContextOverflowError(ProviderError):
    """Request does not fit the model's context window. Not retryable."""


class ScriptError(ProviderError):
    """Malformed mock script."""


class ScriptExhaustedError(ProviderError):
    """The mock script has no entry left for a request."""


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    tier: Tier
    input_rate: Decimal  # currency per 1e6 input tokens
    output_rate: Decimal  # currency per 1e6 output tokens
    context_limit: int = 128_000
    base_url: str | None = None
    path: str = "/v1/chat/completions"
    api_key_env: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "tier", Tier(self.tier))
        object.__setattr__(self, "input_rate", Decimal(str(self.input_rate)))
        object.__setattr__(self, "output_rate", Decimal(str(self.output_rate)))
        if self.input_rate < 0 or self.output_rate < 0:
            raise ValueError(f"{self.model_id}: rates must be non-negative")
        if self.context_limit <= 0:
            raise ValueError(f"{self.model_id}: context_limit must be positive")

    def cost_micro(self, input_tokens: int, output_tokens: int) -> int:
        # tokens * (currency / 1e6 tokens) == micro-currency
        exact = input_tokens * self.input_rate + output_tokens * self.output_rate
        return int(exact.to_integral_value(rounding=ROUND_HALF_EVEN))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            model_id=d["model_id"],
            tier=Tier(d["tier"]),
            input_rate=Decimal(str(d.get("input_rate", 0))),
            output_rate=Decimal(str(d.get("output_rate", 0))),
            context_limit=int(d.get("context_limit", 128_000)),
            base_url=d.get("base_url"),
            path=d.get("path", "/v1/chat/completions"),
            api_key_env=d.get("api_key_env"),
        )


@dataclass
class ToolCall:
    name: str
    arguments: dict[str, Any] = field(default_factory=dict)
    id: str | None = None

    def to_dict(self) -> dict:
        return {"id": self.id, "name": self.name, "arguments": self.arguments}

    @classmethod
    def from_dict(cls, d: dict) -> "ToolCall":
        return cls(name=d["name"], arguments=dict(d.get("arguments") or {}), id=d.get("id"))


@dataclass
class Message:
    role: str
    content: str
    tool_calls: list[ToolCall] = field(default_factory=list)
    tool_call_id: str | None = None
    name: str | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_calls:
            d["tool_calls"] = [c.to_dict() for c in self.tool_calls]
        if self.tool_call_id is not None:
            d["tool_call_id"] = self.tool_call_id
        if self.name is not None:
            d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Message":
        return cls(
            role=d["role"],
            content=d.get("content", ""),
            tool_calls=[ToolCall.from_dict(c) for c in d.get("tool_calls", [])],
            tool_call_id=d.get("tool_call_id"),
            name=d.get("name"),
        )


@dataclass
class ChatRequest:
    model_id: str
    messages: list[Message]
    sampling_seed: int | None = None
    temperature: float | None = None
    # Routes mock playback; ignored by live backends.
    session_label: str | None = None
    tools: list[dict] | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("request needs at least one message")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message must be a system or user message")


@dataclass
class ChatResponse:
    content: str
    tool_calls: list[ToolCall]
    input_tokens: int
    output_tokens: int
    model_id: str

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")


def count_tokens(text: str) -> int:
    """Whitespace word count; the token approximation used offline."""
    return len(text.split())


def estimate_tokens(messages: list[Message]) -> int:
    total = 0
    for m in messages:
        total += count_tokens(m.content)
        for call in m.tool_calls:
            total += count_tokens(call.name) + count_tokens(json.dumps(call.arguments))
    return total


class ModelRegistry:
    def __init__(self, specs: list[ModelSpec] | None = None):
        self._models: dict[str, ModelSpec] = {}
        self._lock = threading.Lock()
        for spec in specs or []:
            self.register(spec)

    def register(self, spec: ModelSpec) -> ModelSpec:
        with self._lock:
            if spec.model_id in self._models:
                raise DuplicateModelError(f"model id {spec.model_id!r} is already registered")
            self._models[spec.model_id] = spec
        return spec

    def get(self, model_id: str) -> ModelSpec:
        try:
            return self._models[model_id]
        except KeyError:
            raise UnknownModelError(f"model {model_id!r} is not registered") from None

    def __contains__(self, model_id: str) -> bool:
        return model_id in self._models

    def __iter__(self):
        return iter(list(self._models.values()))

    def __len__(self):
        return len(self._models)

    def by_tier(self, tier: Tier | str) -> ModelSpec:
        """First registered model of ``tier``."""
        tier = Tier(tier)
        for spec in self._models.values():
            if spec.tier is tier:
                return spec
        raise MissingTierError(f"no {tier.value} model registered")

    def check_ready(self) -> None:
        for tier in Tier:
            self.by_tier(tier)


@dataclass(frozen=True)
class LedgerEntry:
    timestamp: float
    model_id: str
    input_tokens: int
    output_tokens: int
    cost_micro: int
    purpose: str = "agent"
    tag: str | None = None  # usually the session id

    @property
    def cost(self) -> Decimal:
        return Decimal(self.cost_micro).scaleb(-6)

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "model_id": self.model_id,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "cost_micro": self.cost_micro,
            "purpose": self.purpose,
            "tag": self.tag,
        }


class CostLedger:
    def __init__(self):
        self._entries: list[LedgerEntry] = []
        self._total_micro = 0
        self._lock = threading.Lock()

    def append(self, entry: LedgerEntry) -> None:
        with self._lock:
            self._entries.append(entry)
            self._total_micro += entry.cost_micro

    @property
    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return list(self._entries)

    @property
    def running_total_micro(self) -> int:
        return self._total_micro

    @property
    def running_total(self) -> Decimal:
        return Decimal(self._total_micro).scaleb(-6)

    def count(self, purpose: str | None = None) -> int:
        with self._lock:
            if purpose is None:
                return len(self._entries)
            return sum(1 for e in self._entries if e.purpose == purpose)

    def total_micro(self, tag: str | None = None) -> int:
        with self._lock:
            if tag is None:
                return self._total_micro
            return sum(e.cost_micro for e in self._entries if e.tag == tag)

    def __len__(self):
        return self.count()


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


class Provider:
    """Uniform entry point for model calls.

    ``backends`` maps model ids to dedicated backends; every other model is
    served by ``default_backend``.
    """

    def __init__(
        self,
        registry: ModelRegistry,
        default_backend: Backend | None = None,
        *,
        backends: dict[str, Backend] | None = None,
        ledger: CostLedger | None = None,
        max_attempts: int = MAX_ATTEMPTS,
        backoff_s: float = RETRY_BACKOFF_S,
        sleep=time.sleep,
    ):
        self.registry = registry
        self.default_backend = default_backend
        self.backends = dict(backends or {})
        self.ledger = ledger if ledger is not None else CostLedger()
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self._sleep = sleep
        self.attempts = 0  # every backend invocation, failed ones included

    def _backend_for(self, model_id: str) -> Backend:
        backend = self.backends.get(model_id, self.default_backend)
        if backend is None:
            raise UnknownModelError(f"no backend configured for {model_id!r}")
        return backend

    def complete(self, request: ChatRequest, *, purpose: str = "agent", tag: str | None = None) -> ChatResponse:
        spec = self.registry.get(request.model_id)
        needed = estimate_tokens(request.messages)
        if needed > spec.context_limit:
            raise ContextOverflowError(
                f"request needs ~{needed} tokens, {spec.model_id} allows {spec.context_limit}"
            )
        backend = self._backend_for(spec.model_id)
        last_error: TransportError | None = None
        for attempt in range(1, self.max_attempts + 1):
            self.attempts += 1
            try:
                response = backend.complete(request)
            except TransportError as exc:
                last_error = exc
                logger.warning("transport failure on %s (attempt %d/%d): %s",
                               spec.model_id, attempt, self.max_attempts, exc)
                if attempt < self.max_attempts and self.backoff_s:
                    self._sleep(self.backoff_s)
                continue
            self.ledger.append(LedgerEntry(
                timestamp=time.time(),
                model_id=spec.model_id,
                input_tokens=response.input_tokens,
                output_tokens=response.output_tokens,
                cost_micro=spec.cost_micro(response.input_tokens, response.output_tokens),
                purpose=purpose,
                tag=tag,
            ))
            return response
        raise TransportError(f"{spec.model_id}: gave up after {self.max_attempts} attempts: {last_error}")


# --- mock backend -----------------------------------------------------------

NEXT = "next"


@dataclass
class ScriptEntry:
    contains: str | None  # None means next-in-order
    content: str = ""
    tool_calls: list[dict] = field(default_factory=list)
    usage: tuple[int, int] | None = None
    error: str | None = None
    repeat: bool = False

    @classmethod
    def parse(cls, raw: Any, where: str) -> "ScriptEntry":
        if not isinstance(raw, dict):
            raise ScriptError(f"{where}: entry must be an object")
        match = raw.get("match", NEXT)
        if match == NEXT:
            contains = None
        elif isinstance(match, dict) and isinstance(match.get("contains"), str) and match["contains"]:
            contains = match["contains"]
        else:
            raise ScriptError(f"{where}: match must be 'next' or {{'contains': <text>}}")
        error = raw.get("error")
        response = raw.get("response")
        if error is None and not isinstance(response, dict):
            raise ScriptError(f"{where}: entry needs a response object or an error")
        response = response or {}
        content = response.get("content", "")
        if not isinstance(content, str):
            raise ScriptError(f"{where}: response content must be text")
        calls = response.get("tool_calls", [])
        if not isinstance(calls, list) or not all(isinstance(c, dict) and "name" in c for c in calls):
            raise ScriptError(f"{where}: tool_calls must be a list of objects with a name")
        usage = response.get("usage")
        if usage is not None:
            try:
                usage = (int(usage["input_tokens"]), int(usage["output_tokens"]))
            except (KeyError, TypeError, ValueError):
                raise ScriptError(f"{where}: usage needs input_tokens and output_tokens") from None
        if error is not None and error not in ("transport", "overflow"):
            raise ScriptError(f"{where}: unknown error kind {error!r}")
        return cls(contains, content, calls, usage, error, bool(raw.get("repeat", False)))


def _last_observation(messages: list[Message]) -> str:
    # Tool results count as observations alongside user turns.
    for m in reversed(messages):
        if m.role in ("user", "tool"):
            return m.content
    return ""


class MockBackend:
    """Deterministic scripted backend.

    The script maps session labels to ordered entry lists. A request's label
    is resolved hierarchically: ``a/b/c`` falls back to ``a/b``, then ``a``,
    then ``*``. Within a label, an unconsumed ``contains`` entry whose text
    occurs in the latest user/tool message wins; otherwise the first
    unconsumed ``next`` entry is played.
    """

    def __init__(self, script: dict[str, list[ScriptEntry]]):
        self._script = script
        self._consumed: dict[str, set[int]] = {label: set() for label in script}
        self._locks: dict[str, threading.Lock] = {label: threading.Lock() for label in script}
        self._call_ids: dict[str, int] = {label: 0 for label in script}

    @classmethod
    def from_document(cls, doc: Any) -> "MockBackend":
        if not isinstance(doc, dict):
            raise ScriptError("script must be an object mapping session labels to entry lists")
        script: dict[str, list[ScriptEntry]] = {}
        for label, entries in doc.items():
            if label.startswith("_"):
                continue  # comments
            if not isinstance(entries, list):
                raise ScriptError(f"{label}: entries must be a list")
            script[label] = [ScriptEntry.parse(e, f"{label}[{i}]") for i, e in enumerate(entries)]
        return cls(script)

    @classmethod
    def from_file(cls, path: str | Path) -> "MockBackend":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ScriptError(f"{path}: {exc}") from None
        return cls.from_document(doc)

    def resolve_label(self, label: str | None) -> str:
        label = label or "*"
        parts = label.split("/")
        for i in range(len(parts), 0, -1):
            candidate = "/".join(parts[:i])
            if candidate in self._script:
                return candidate
        if "*" in self._script:
            return "*"
        raise ScriptExhaustedError(f"no script for session label {label!r}")

    def remaining(self, label: str) -> int:
        return len(self._script[label]) - len(self._consumed[label])

    def complete(self, request: ChatRequest) -> ChatResponse:
        label = self.resolve_label(request.session_label)
        with self._locks[label]:
            entry, idx = self._pick(label, request.messages)
            if not entry.repeat:
                self._consumed[label].add(idx)
            call_base = self._call_ids[label]
            self._call_ids[label] += len(entry.tool_calls)
        if entry.error == "transport":
            raise TransportError(f"scripted transport failure ({label}[{idx}])")
        if entry.error == "overflow":
            raise ContextOverflowError(f"scripted context overflow ({label}[{idx}])")
        calls = []
        for k, raw in enumerate(entry.tool_calls):
            call = ToolCall.from_dict(copy.deepcopy(raw))
            if call.id is None:
                call.id = f"call_{call_base + k}"
            calls.append(call)
        if entry.usage is not None:
            in_tok, out_tok = entry.usage
        else:
            in_tok = estimate_tokens(request.messages)
            out_tok = count_tokens(entry.content)
        return ChatResponse(entry.content, calls, in_tok, out_tok, request.model_id)

    def _pick(self, label: str, messages: list[Message]) -> tuple[ScriptEntry, int]:
        entries = self._script[label]
        consumed = self._consumed[label]
        observed = _last_observation(messages)
        for i, e in enumerate(entries):
            if i not in consumed and e.contains is not None and e.contains in observed:
                return e, i
        for i, e in enumerate(entries):
            if i not in consumed and e.contains is None:
                return e, i
        raise ScriptExhaustedError(f"script for {label!r} is exhausted")


# --- live backend -----------------------------------------------------------

class HttpBackend:
    """OpenAI-compatible chat-completions endpoint."""

    def __init__(self, spec: ModelSpec, *, timeout_s: float = 300.0, client: httpx.Client | None = None):
        if not spec.base_url:
            raise ValueError(f"{spec.model_id}: base_url required for a live backend")
        self.spec = spec
        self.timeout_s = timeout_s
        self._client = client or httpx.Client(timeout=timeout_s)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.spec.api_key_env:
            token = os.environ.get(self.spec.api_key_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    @staticmethod
    def _wire_message(m: Message) -> dict:
        d: dict[str, Any] = {"role": m.role, "content": m.content}
        if m.tool_calls:
            d["tool_calls"] = [
                {"id": c.id, "type": "function",
                 "function": {"name": c.name, "arguments": json.dumps(c.arguments)}}
                for c in m.tool_calls
            ]
        if m.tool_call_id is not None:
            d["tool_call_id"] = m.tool_call_id
        return d

    def complete(self, request: ChatRequest) -> ChatResponse:
        body: dict[str, Any] = {
            "model": request.model_id,
            "messages": [self._wire_message(m) for m in request.messages],
        }
        if request.temperature is not None:
            body["temperature"] = request.temperature
        if request.sampling_seed is not None:
            body["seed"] = request.sampling_seed
        if request.tools:
            body["tools"] = request.tools
        url = self.spec.base_url.rstrip("/") + self.spec.path
        try:
            resp = self._client.post(url, json=body, headers=self._headers())
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            msg = data["choices"][0]["message"]
        except (ValueError, KeyError, IndexError) as exc:
            raise TransportError(f"unparseable response: {exc}") from exc
        calls = []
        for raw in msg.get("tool_calls") or []:
            fn = raw.get("function", {})
            try:
                args = json.loads(fn.get("arguments") or "{}")
            except json.JSONDecodeError:
                args = {"_raw": fn.get("arguments")}
            calls.append(ToolCall(name=fn.get("name", ""), arguments=args, id=raw.get("id")))
        usage = data.get("usage") or {}
        return ChatResponse(
            content=msg.get("content") or "",
            tool_calls=calls,
            input_tokens=int(usage.get("prompt_tokens", 0)),
            output_tokens=int(usage.get("completion_tokens", 0)),
            model_id=request.model_id,
        )
