"""Challenge descriptors and flag contracts, as parsed from ``challenge.json``."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path


@dataclass(frozen=True)
class FlagContract:
    """Exactly one of ``literal`` or ``pattern`` is set."""

    literal: str | None = None
    pattern: str | None = None
    # Regex used to spot flag candidates in agent text.
    detect: str | None = None

    def __post_init__(self):
        if (self.literal is None) == (self.pattern is None):
            raise ValueError("flag contract needs exactly one of literal or pattern")
        if self.pattern is not None:
            re.compile(self.pattern)

    def accepts(self, flag: str) -> bool:
        if self.literal is not None:
            if flag.endswith("\n"):
                flag = flag[:-1]
            return flag == self.literal
        return re.fullmatch(self.pattern, flag) is not None

    def detection_regex(self) -> re.Pattern:
        if self.detect:
            return re.compile(self.detect)
        if self.pattern is not None:
            # fullmatch anchors would stop it matching inside prose
            return re.compile(self.pattern.removeprefix("^").removesuffix("$"))
        m = re.match(r"^([A-Za-z0-9_]+)\{.*\}$", self.literal, re.S)
        if m:
            return re.compile(re.escape(m.group(1)) + r"\{[^{}\s]*\}")
        return re.compile(re.escape(self.literal))

    def to_dict(self) -> dict:
        d = {"literal": self.literal} if self.literal is not None else {"pattern": self.pattern}
        if self.detect:
            d["detect"] = self.detect
        return d


@dataclass(frozen=True)
class ServiceSpec:
    script: Path
    line_protocol: bool = True


@dataclass(frozen=True)
class ChallengeDescriptor:
    id: str
    name: str
    category: str
    root: Path
    files: tuple[str, ...]
    flag: FlagContract
    service: ServiceSpec | None = None
    points: int = 0
    description: str = ""
    metadata: dict = field(default_factory=dict, compare=False, hash=False)

    def file_paths(self) -> list[Path]:
        return [self.root / f for f in self.files]
