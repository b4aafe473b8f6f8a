"""Discover challenges from ``challenge.json`` files under a root directory.

``challenge.json``::

    {
      "id": "toy-xor", "name": "Toy XOR", "category": "crypto",
      "files": ["output.txt", "chall.py"],
      "service": {"script": "server.py", "line_protocol": true},   # optional
      "flag": {"literal": "flag{...}"} | {"pattern": "flag\\{[0-9a-f]{8}\\}"},
      "points": 100, "description": "optional text shown to the agent"
    }
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from ctfagent.challenge import ChallengeDescriptor, FlagContract, ServiceSpec

CONFIG_NAME = "challenge.json"


class ChallengeConfigError(ValueError):
    pass


@dataclass
class ChallengeIndex:
    challenges: dict[str, ChallengeDescriptor] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.challenges)

    def __iter__(self):
        return iter(self.challenges.values())

    def __getitem__(self, challenge_id: str) -> ChallengeDescriptor:
        return self.challenges[challenge_id]

    def get(self, challenge_id: str) -> ChallengeDescriptor | None:
        return self.challenges.get(challenge_id)

    def ids(self) -> list[str]:
        return list(self.challenges)


def parse_challenge(directory: Path) -> ChallengeDescriptor:
    path = directory / CONFIG_NAME
    try:
        cfg = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ChallengeConfigError(f"{path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ChallengeConfigError(f"{path}: top level must be an object")
    problems = [f"missing {k}" for k in ("id", "name", "category", "flag") if k not in cfg]
    if problems:
        raise ChallengeConfigError(f"{path}: " + ", ".join(problems))
    files = cfg.get("files", [])
    if not isinstance(files, list) or not all(isinstance(f, str) for f in files):
        raise ChallengeConfigError(f"{path}: files must be a list of paths")
    root = directory.resolve()
    for f in files:
        fp = (root / f).resolve()
        if root not in fp.parents or not fp.is_file():
            raise ChallengeConfigError(f"{path}: listed file {f!r} does not exist")
    flag = cfg["flag"]
    if not isinstance(flag, dict) or ("literal" in flag) == ("pattern" in flag):
        raise ChallengeConfigError(f"{path}: flag needs exactly one of literal or pattern")
    try:
        contract = FlagContract(literal=flag.get("literal"), pattern=flag.get("pattern"), detect=flag.get("detect"))
    except Exception as exc:
        raise ChallengeConfigError(f"{path}: bad flag contract: {exc}") from None
    service = None
    if cfg.get("service"):
        svc = cfg["service"]
        if not isinstance(svc, dict) or not isinstance(svc.get("script"), str):
            raise ChallengeConfigError(f"{path}: service needs a script path")
        service = ServiceSpec(root / svc["script"], bool(svc.get("line_protocol", True)))
    try:
        points = int(cfg.get("points", 0))
    except (TypeError, ValueError):
        raise ChallengeConfigError(f"{path}: points must be an integer") from None
    known = {"id", "name", "category", "files", "service", "flag", "points", "description"}
    return ChallengeDescriptor(
        id=str(cfg["id"]),
        name=str(cfg["name"]),
        category=str(cfg["category"]),
        root=root,
        files=tuple(files),
        flag=contract,
        service=service,
        points=points,
        description=str(cfg.get("description", "")),
        metadata={k: v for k, v in cfg.items() if k not in known},
    )


def scan(root: str | Path) -> ChallengeIndex:
    """Walk ``root``; malformed and duplicate challenges become diagnostics."""
    root = Path(root)
    if not root.is_dir() or not os.access(root, os.R_OK | os.X_OK):
        raise NotADirectoryError(f"cannot read challenge root {root}")
    found: list[ChallengeDescriptor] = []
    index = ChallengeIndex()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        if CONFIG_NAME not in filenames:
            continue
        try:
            found.append(parse_challenge(Path(dirpath)))
        except ChallengeConfigError as exc:
            index.diagnostics.append(str(exc))
    # walk order is sorted, so "second" is well defined for duplicates
    for desc in found:
        if desc.id in index.challenges:
            index.diagnostics.append(
                f"{desc.root}: duplicate id {desc.id!r} (already defined in {index.challenges[desc.id].root})")
            continue
        index.challenges[desc.id] = desc
    index.challenges = dict(sorted(index.challenges.items()))
    return index
