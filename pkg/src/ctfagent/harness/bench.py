"""Benchmark runs: one session per indexed challenge, aggregated into a report.

Report (``bench_report.json``)::

    {"profile": {...}, "rows": [{"id", "outcome", "turns", "seconds", "cost", ...}],
     "aggregate": {"solved", "total", "solve_rate", "mean_turns", "mean_seconds", "total_cost"}}
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from ctfagent.harness.scan import ChallengeIndex
from ctfagent.harness.service import ServiceHost

logger = logging.getLogger(__name__)

REPORT_NAME = "bench_report.json"


@dataclass(frozen=True)
class BenchmarkProfile:
    name: str
    budget: int
    mode: str = "auto"  # "auto" | "heavythink"
    workers: int = 1
    iterations: int = 1

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError(f"profile {self.name}: budget must be positive")
        if self.mode not in ("auto", "heavythink"):
            raise ValueError(f"profile {self.name}: unknown mode {self.mode!r}")
        if self.workers < 1 or self.iterations < 1:
            raise ValueError(f"profile {self.name}: workers and iterations must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkProfile":
        return cls(**{k: d[k] for k in ("name", "budget", "mode", "workers", "iterations") if k in d})

    def to_dict(self) -> dict:
        return asdict(self)


PROFILES = {
    "intercode30": BenchmarkProfile("intercode30", 30),
    "nyu50": BenchmarkProfile("nyu50", 50),
}


@dataclass
class BenchRow:
    id: str
    outcome: str
    turns: int
    seconds: float
    cost: float
    session_id: str | None = None
    flag: str | None = None
    reason: str | None = None


def _aggregate(rows: list[BenchRow]) -> dict:
    n = len(rows)
    solved = sum(r.outcome == "SOLVED" for r in rows)
    return {
        "solved": solved,
        "total": n,
        "solve_rate": solved / n if n else 0.0,
        "mean_turns": sum(r.turns for r in rows) / n if n else 0.0,
        "mean_seconds": sum(r.seconds for r in rows) / n if n else 0.0,
        "total_cost": sum(r.cost for r in rows),
    }


def run_benchmark(index: ChallengeIndex, solver, profile: BenchmarkProfile,
                  out_dir: str | Path | None = None) -> dict:
    """Run every challenge in ``index`` sequentially under ``profile``.

    A challenge that fails outside the session loop (service won't start,
    unexpected exception) becomes an ERRORED row; the run continues.
    """
    from ctfagent.orchestrator import HeavyThinkConfig  # avoid an import cycle

    if len(index) == 0:
        raise ValueError("benchmark needs a non-empty challenge index")
    rows: list[BenchRow] = []
    with ServiceHost() as host:
        for challenge in index:
            start = time.monotonic()
            try:
                endpoint = host.schedule(challenge) if challenge.service else None
                if profile.mode == "heavythink":
                    ht = HeavyThinkConfig(profile.workers, profile.iterations)
                    s = solver.run_heavythink(challenge, ht, profile.budget, endpoint=endpoint)
                else:
                    s = solver.run_autonomous(challenge, profile.budget, endpoint=endpoint)
                report = json.loads((s.directory / "report.json").read_text())
                rows.append(BenchRow(challenge.id, report["outcome"], report["turns"],
                                     report["wall_time_s"], report["total_cost"],
                                     s.session_id, report["flag"], report["reason"]))
            except Exception as exc:
                logger.exception("challenge %s failed", challenge.id)
                rows.append(BenchRow(challenge.id, "ERRORED", 0, round(time.monotonic() - start, 3), 0.0,
                                     reason=f"{type(exc).__name__}: {exc}"))
            finally:
                if challenge.service:
                    host.unschedule(challenge.id)
            logger.info("%s: %s in %d turns", challenge.id, rows[-1].outcome, rows[-1].turns)
    report = {
        "profile": profile.to_dict(),
        "rows": [asdict(r) for r in rows],
        "aggregate": _aggregate(rows),
        "diagnostics": list(index.diagnostics),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / REPORT_NAME).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
