"""Prompt bundle assembly and the machine-checked output contract."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from ctfagent.challenge import ChallengeDescriptor

logger = logging.getLogger(__name__)

PROMPT_FILES = {
    "main_sop": "ctf_main.md",
    "solve_workflow": "solve_challenge.md",
    "difficulty_rubric": "router_difficulty.md",
    "research_instructions": "deep_research.md",
}
REFERENCE_FILE = "reference_repos.json"

SURRENDER_TOKEN = "[[GIVE_UP]]"


class Difficulty(str, Enum):
    L1 = "L1"
    L2 = "L2"
    L3 = "L3"
    L4 = "L4"
    L5 = "L5"

    @property
    def rank(self) -> int:
        return int(self.value[1])


class SolveStage(int, Enum):
    RECON = 1
    ANALYSIS = 2
    KNOWLEDGE = 3
    EXPLOIT_BUILD = 4
    FLAG_VALIDATE = 5


class ParseFailure(Enum):
    ABSENT = "ABSENT"
    MALFORMED = "MALFORMED"


ABSENT = ParseFailure.ABSENT
MALFORMED = ParseFailure.MALFORMED


class BundleError(ValueError):
    pass


@dataclass(frozen=True)
class RoutingBlock:
    difficulty: Difficulty
    rationale: str = ""
    next_action: str | None = None
    extras: tuple = ()


@dataclass(frozen=True)
class PromptBundle:
    main_sop: str
    solve_workflow: str
    difficulty_rubric: str
    reference_library_list: tuple[tuple[str, str], ...]
    research_instructions: str

    def validate(self) -> None:
        empty = [name for name in ("main_sop", "solve_workflow", "difficulty_rubric",
                                   "research_instructions")
                 if not getattr(self, name).strip()]
        if not self.reference_library_list:
            empty.append("reference_library_list")
        if empty:
            raise BundleError(f"prompt bundle has empty fields: {', '.join(empty)}")

    @classmethod
    def from_directory(cls, path: str | Path) -> "PromptBundle":
        path = Path(path)
        texts = {field: (path / name).read_text() for field, name in PROMPT_FILES.items()}
        refs = json.loads((path / REFERENCE_FILE).read_text())
        return cls(reference_library_list=_parse_refs(refs), **texts)


def _parse_refs(refs) -> tuple[tuple[str, str], ...]:
    if not isinstance(refs, list):
        raise BundleError("reference list must be a JSON array")
    out = []
    for r in refs:
        if not isinstance(r, dict) or not r.get("name"):
            raise BundleError(f"bad reference entry: {r!r}")
        out.append((r["name"], r.get("purpose", "")))
    return tuple(out)


def default_bundle() -> PromptBundle:
    """The prompt bundle shipped with the package."""
    root = resources.files("ctfagent") / "prompts"
    texts = {field: (root / name).read_text() for field, name in PROMPT_FILES.items()}
    refs = json.loads((root / REFERENCE_FILE).read_text())
    return PromptBundle(reference_library_list=_parse_refs(refs), **texts)


ROUTING_REQUIREMENT = """\
# Output contract

End EVERY reply with a fenced JSON block rating the difficulty of your next step:

```json
{"difficulty": "L2", "rationale": "one short reason", "next_action": "optional hint"}
```

`difficulty` must be one of L1, L2, L3, L4, L5 (L1 trivial bookkeeping ... L5
research-grade cryptanalysis). Only the last JSON block in a reply is read."""


def render_challenge_context(challenge: ChallengeDescriptor, endpoint: tuple[str, int] | None = None) -> str:
    lines = [
        "# Challenge",
        f"name: {challenge.name}",
        f"category: {challenge.category}",
    ]
    if challenge.points:
        lines.append(f"points: {challenge.points}")
    if challenge.description:
        lines += ["", challenge.description.strip()]
    lines += ["", "files (copied to files/):"]
    lines += [f"- files/{f}" for f in challenge.files] or ["- (none)"]
    if endpoint is not None:
        lines += ["", f"service: {endpoint[0]} {endpoint[1]} (line-oriented TCP)"]
    return "\n".join(lines)


def assemble_system_prompt(
    bundle: PromptBundle,
    challenge: ChallengeDescriptor,
    workspace_summary: str,
    *,
    tool_section: str = "",
    endpoint: tuple[str, int] | None = None,
) -> str:
    """Build the system prompt. Pure: identical inputs give identical text."""
    bundle.validate()
    refs = "\n".join(f"- {name}: {purpose}" for name, purpose in bundle.reference_library_list)
    parts = [
        bundle.main_sop.strip(),
        bundle.solve_workflow.strip(),
        "# Tools and libraries",
    ]
    if tool_section:
        parts.append(tool_section.strip())
    parts += [
        "## Reference implementations\n" + refs,
        bundle.research_instructions.strip(),
        ROUTING_REQUIREMENT,
        render_challenge_context(challenge, endpoint),
        "# Workspace\n" + (workspace_summary.strip() or "(empty)"),
    ]
    return "\n\n".join(parts) + "\n"


_FENCE = re.compile(r"```[ \t]*json[ \t]*\r?\n(.*?)```", re.S | re.I)


def extract_routing_block(agent_output: str) -> RoutingBlock | ParseFailure:
    """Parse the last fenced ``json`` block. Never raises."""
    if not isinstance(agent_output, str):
        return ABSENT
    blocks = _FENCE.findall(agent_output)
    if not blocks:
        return ABSENT
    try:
        data = json.loads(blocks[-1])
    except (ValueError, RecursionError):
        return MALFORMED
    if not isinstance(data, dict):
        return MALFORMED
    raw = data.get("difficulty")
    if not isinstance(raw, str) or raw not in Difficulty.__members__:
        return MALFORMED
    rationale = data.get("rationale", "")
    next_action = data.get("next_action")
    extras = tuple(sorted((k, json.dumps(v, sort_keys=True)) for k, v in data.items()
                          if k not in ("difficulty", "rationale", "next_action")))
    return RoutingBlock(
        difficulty=Difficulty(raw),
        rationale=rationale if isinstance(rationale, str) else json.dumps(rationale),
        next_action=next_action if isinstance(next_action, str) else None,
        extras=extras,
    )


# Session directory layout: (relative path, kind). report.json appears once
# the session is terminal, so it is optional here.
LAYOUT_RULES = (
    ("transcript.jsonl", "file"),
    ("routing.jsonl", "file"),
    ("tools.jsonl", "file"),
    ("sandbox", "dir"),
    ("sandbox/files", "dir"),
    ("sandbox/notes", "dir"),
)
OPTIONAL_ENTRIES = {"report.json", "workers"}


@dataclass(frozen=True)
class Violation:
    path: str
    rule: str


def validate_workspace_layout(session_dir: str | Path) -> list[Violation]:
    session_dir = Path(session_dir)
    if not session_dir.is_dir():
        raise NotADirectoryError(session_dir)
    violations = []
    for rel, kind in LAYOUT_RULES:
        p = session_dir / rel
        if not p.exists():
            violations.append(Violation(rel, f"missing required {kind}"))
        elif kind == "dir" and not p.is_dir():
            violations.append(Violation(rel, "must be a directory"))
        elif kind == "file" and not p.is_file():
            violations.append(Violation(rel, "must be a regular file"))
    known = {rel for rel, _ in LAYOUT_RULES if "/" not in rel} | OPTIONAL_ENTRIES
    for child in sorted(session_dir.iterdir()):
        if child.name not in known:
            logger.warning("unexpected entry in session dir: %s", child.name)
    return violations
