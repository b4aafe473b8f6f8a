"""Per-step model routing.

Difficulty is estimated through a fixed fallback chain: the agent's own
routing block, then a single grader call, then a keyword/length heuristic.
Levels L1-L2 go to the mid tier, L3-L5 to the top tier.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from ctfagent.governance import Difficulty, RoutingBlock, extract_routing_block
from ctfagent.provider import (
    ChatRequest,
    Message,
    ModelRegistry,
    Provider,
    ProviderError,
    Tier,
    estimate_tokens,
)

logger = logging.getLogger(__name__)


class RatingSource(str, Enum):
    SELF_ASSESSMENT = "SELF_ASSESSMENT"
    GRADER_AGENT = "GRADER_AGENT"
    HEURISTIC = "HEURISTIC"


@dataclass(frozen=True)
class DifficultyRating:
    level: Difficulty
    source: RatingSource


@dataclass(frozen=True)
class RoutingDecision:
    rating: DifficultyRating
    tier: Tier
    model_id: str

    def to_dict(self) -> dict:
        return {
            "level": self.rating.level.value,
            "source": self.rating.source.value,
            "tier": self.tier.value,
            "model_id": self.model_id,
        }


class GraderFailure(Exception):
    pass


def tier_for(level: Difficulty) -> Tier:
    return Tier.MID if level.rank <= 2 else Tier.TOP


@dataclass(frozen=True)
class HeuristicTable:
    keyword_rules: tuple[tuple[str, Difficulty], ...]
    length_thresholds: tuple[tuple[int, Difficulty], ...]
    default_level: Difficulty
    _compiled: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        # Keywords match case-insensitively at a word start ("rsa" must not hit
        # "conversation"); trailing letters are allowed ("lattices").
        compiled = tuple(
            (re.compile(r"(?<![A-Za-z0-9])" + re.escape(kw), re.I), Difficulty(level))
            for kw, level in self.keyword_rules
        )
        object.__setattr__(self, "_compiled", compiled)

    @classmethod
    def from_dict(cls, d: dict) -> "HeuristicTable":
        keywords = []
        for rule in d.get("keyword_rules", []):
            level = Difficulty(rule["level"])
            for kw in rule["keywords"]:
                keywords.append((kw, level))
        thresholds = [(int(t["min_chars"]), Difficulty(t["level"])) for t in d.get("length_thresholds", [])]
        return cls(tuple(keywords), tuple(thresholds), Difficulty(d.get("default_level", "L2")))

    def to_dict(self) -> dict:
        rules: list[dict] = []
        for kw, level in self.keyword_rules:
            if rules and rules[-1]["level"] == level.value:
                rules[-1]["keywords"].append(kw)
            else:
                rules.append({"keywords": [kw], "level": level.value})
        return {
            "keyword_rules": rules,
            "length_thresholds": [{"min_chars": n, "level": lv.value} for n, lv in self.length_thresholds],
            "default_level": self.default_level.value,
        }


DEFAULT_HEURISTICS = HeuristicTable.from_dict({
    "keyword_rules": [
        {"keywords": ["lattice", "coppersmith", "LWE", "HNP", "isogeny", "MT19937"], "level": "L4"},
        {"keywords": ["rsa", "xor", "base64", "caesar"], "level": "L2"},
    ],
    "length_thresholds": [{"min_chars": 8000, "level": "L3"}],
    "default_level": "L2",
})


def heuristic_grade(text: str, table: HeuristicTable = DEFAULT_HEURISTICS) -> Difficulty:
    for pattern, level in table._compiled:
        if pattern.search(text):
            return level
    best = None
    for min_chars, level in table.length_thresholds:
        if len(text) >= min_chars and (best is None or min_chars > best[0]):
            best = (min_chars, level)
    return best[1] if best else table.default_level


_LEVEL_TOKEN = re.compile(r"(?<![A-Za-z0-9])L([1-5])(?![0-9])")


def parse_level(reply: str) -> Difficulty | None:
    m = _LEVEL_TOKEN.search(reply)
    return Difficulty(f"L{m.group(1)}") if m else None


def route(rating: DifficultyRating, registry: ModelRegistry) -> RoutingDecision:
    tier = tier_for(rating.level)
    spec = registry.by_tier(tier)
    decision = RoutingDecision(rating, tier, spec.model_id)
    logger.info("route %s (%s) -> %s %s", rating.level.value, rating.source.value, tier.value, spec.model_id)
    return decision


def handoff_context(
    transcript: list[Message],
    from_tier: Tier | None,
    to_tier: Tier,
    context_limit: int | None = None,
) -> list[Message]:
    """Carry the whole transcript into the next request, whatever the tiers.

    If ``context_limit`` is given and the transcript does not fit, the oldest
    non-system messages are dropped first; system messages always stay.
    """
    if not transcript:
        raise ValueError("transcript is empty")
    messages = list(transcript)
    if context_limit is None or estimate_tokens(messages) <= context_limit:
        return messages
    system = [m for m in messages if m.role == "system"]
    rest = [m for m in messages if m.role != "system"]
    while rest and estimate_tokens(system + rest) > context_limit:
        rest.pop(0)
        # a tool result without its assistant call is meaningless to the model
        while rest and rest[0].role == "tool":
            rest.pop(0)
    logger.info("handoff %s->%s truncated %d -> %d messages",
                from_tier.value if from_tier else "-", to_tier.value,
                len(messages), len(system) + len(rest))
    return system + rest


class Router:
    """Stateful front end over the fallback chain; holds the grader setup."""

    def __init__(
        self,
        provider: Provider,
        rubric: str,
        *,
        table: HeuristicTable = DEFAULT_HEURISTICS,
        grader_model_id: str | None = None,
    ):
        self.provider = provider
        self.rubric = rubric
        self.table = table
        self.grader_model_id = grader_model_id

    def grade_with_agent(self, context: str, *, session_label: str | None = None, tag: str | None = None) -> Difficulty:
        model_id = self.grader_model_id or self.provider.registry.by_tier(Tier.MID).model_id
        request = ChatRequest(
            model_id=model_id,
            messages=[
                Message("system", self.rubric),
                Message("user", "Rate the difficulty of the next step.\n\n" + context),
            ],
            temperature=0,
            session_label="grader/" + session_label if session_label else "grader",
        )
        try:
            reply = self.provider.complete(request, purpose="grader", tag=tag)
        except ProviderError as exc:
            raise GraderFailure(str(exc)) from exc
        level = parse_level(reply.content)
        if level is None:
            raise GraderFailure(f"no level token in grader reply {reply.content[:80]!r}")
        return level

    def estimate_difficulty(
        self, last_agent_output: str, context: str = "", *,
        session_label: str | None = None, tag: str | None = None,
    ) -> DifficultyRating:
        block = extract_routing_block(last_agent_output)
        if isinstance(block, RoutingBlock):
            return DifficultyRating(block.difficulty, RatingSource.SELF_ASSESSMENT)
        grader_context = (context + "\n\n" + last_agent_output).strip()
        try:
            level = self.grade_with_agent(grader_context, session_label=session_label, tag=tag)
            return DifficultyRating(level, RatingSource.GRADER_AGENT)
        except GraderFailure as exc:
            logger.info("grader failed (%s); using heuristic", exc)
        return DifficultyRating(heuristic_grade(grader_context, self.table), RatingSource.HEURISTIC)

    def decide(self, last_agent_output: str, context: str = "", *,
               session_label: str | None = None, tag: str | None = None) -> RoutingDecision:
        rating = self.estimate_difficulty(last_agent_output, context, session_label=session_label, tag=tag)
        return route(rating, self.provider.registry)


class RoutingLog:
    """Append-only JSON-lines log, one object per routed step."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        self._lock = threading.Lock()

    def append(self, turn: int, decision: RoutingDecision, **extra) -> dict:
        record = {"turn": turn, **decision.to_dict(), **extra}
        with self._lock:
            self.records.append(record)
            if self.path:
                with self.path.open("a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
        return record
