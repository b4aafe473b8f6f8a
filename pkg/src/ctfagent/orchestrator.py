"""Solving sessions: the autonomous reason/act/observe loop and HeavyThink.

One turn is one primary model call. Tool dispatches, grader calls and
aggregator calls do not consume turns. Difficulty is re-estimated and the
model re-routed before every turn.

Session directory::

    sessions/<id>/transcript.jsonl  routing.jsonl  tools.jsonl  report.json
                  sandbox/files/    (challenge files)
                  sandbox/notes/    (agent notebook)
                  workers/          (HeavyThink only: one session dir per worker and round)
"""

from __future__ import annotations

import json
import logging
import re
import shutil
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from ctfagent.challenge import ChallengeDescriptor, FlagContract
from ctfagent.governance import (
    SURRENDER_TOKEN,
    PromptBundle,
    SolveStage,
    assemble_system_prompt,
    default_bundle,
)
from ctfagent.harness.arbitration import Arbiter, Verdict
from ctfagent.provider import ChatRequest, Message, Provider, ProviderError, Tier, ToolCall
from ctfagent.routing import Router, RoutingLog, handoff_context
from ctfagent.toolbox import SessionContext, ToolInvocation, Toolbox, builtin_toolbox
from ctfagent.workspace import DeferredWorkspace

logger = logging.getLogger(__name__)

CONTINUE_PROMPT = "Continue with the next step of the workflow. End with the routing JSON block."
CONTEXT_MESSAGES = 4
CONTEXT_CHARS = 4000
DIGEST_CHARS = 2000
DIGEST_LIMIT = 16000

AGGREGATOR_RUBRIC = """\
You compare candidate solving trajectories for the same CTF challenge.
Judge each candidate on:
(a) concrete progress toward recovering the flag,
(b) internal consistency of its reasoning and results,
(c) whether it ends with a clear, executable next step.
Reply with a JSON object: {"scores": [<one number per candidate, in order>],
"choice": <index of the best candidate>, "justification": "<one paragraph>"}.
Ties go to the lowest index."""


class OutcomeKind(str, Enum):
    SOLVED = "SOLVED"
    BUDGET_EXHAUSTED = "BUDGET_EXHAUSTED"
    AGENT_GAVE_UP = "AGENT_GAVE_UP"
    ERRORED = "ERRORED"


@dataclass(frozen=True)
class Outcome:
    kind: OutcomeKind
    flag: str | None = None
    reason: str | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "flag": self.flag, "reason": self.reason}


class SessionError(RuntimeError):
    pass


@dataclass
class SessionState:
    session_id: str
    challenge: ChallengeDescriptor
    transcript: list[Message]
    turn_budget: int
    context: SessionContext
    label: str
    directory: Path
    routing_log: RoutingLog
    turn_count: int = 0
    stage: SolveStage = SolveStage.RECON
    outcome: Outcome | None = None
    last_tier: Tier | None = None
    seed: int | None = None
    started_at: float = field(default_factory=time.monotonic)
    finished_at: float | None = None
    _persisted: int = 0

    @property
    def terminal(self) -> bool:
        return self.outcome is not None

    @property
    def wall_time_s(self) -> float:
        end = self.finished_at if self.finished_at is not None else time.monotonic()
        return end - self.started_at

    def finish(self, outcome: Outcome) -> None:
        if self.turn_count > self.turn_budget:
            raise SessionError("turn budget overrun")
        self.outcome = outcome
        self.finished_at = time.monotonic()


@dataclass(frozen=True)
class HeavyThinkConfig:
    workers: int = 3
    iterations: int = 2
    aggregator_tier: Tier = Tier.TOP
    vary_workers: bool = True

    def __post_init__(self):
        if self.workers < 1 or self.iterations < 1:
            raise ValueError("HeavyThink needs workers >= 1 and iterations >= 1")


@dataclass(frozen=True)
class AggregatorVerdict:
    index: int
    justification: str
    next_prompt: str
    fallback: bool = False

    def to_dict(self) -> dict:
        return {"index": self.index, "justification": self.justification, "fallback": self.fallback}


def detect_flag(content: str, contract: FlagContract) -> str | None:
    m = contract.detection_regex().search(content or "")
    return m.group(0) if m else None


_STAGE = re.compile(r"Stage:\s*(" + "|".join(s.name for s in SolveStage) + r")\b")


def _jsonl(messages: list[Message]) -> str:
    return "".join(json.dumps(m.to_dict(), sort_keys=True, ensure_ascii=False) + "\n" for m in messages)


def _parse_aggregator(reply: str, n: int) -> tuple[int | None, str]:
    """Worker index picked by the aggregator reply, or None."""
    data = None
    for blob in re.findall(r"\{.*\}", reply, re.S):
        try:
            data = json.loads(blob)
            break
        except ValueError:
            continue
    if isinstance(data, dict):
        justification = str(data.get("justification", ""))
        scores = data.get("scores")
        if isinstance(scores, list) and len(scores) == n and all(
                isinstance(x, (int, float)) and not isinstance(x, bool) for x in scores):
            best = max(scores)
            return scores.index(best), justification
        for key in ("choice", "chosen", "index"):
            v = data.get(key)
            if isinstance(v, int) and not isinstance(v, bool):
                return v, justification
    m = re.search(r"\bchoose\s+(?:worker\s+|candidate\s+)?#?(\d+)\b", reply, re.I)
    if m:
        return int(m.group(1)), reply.strip()
    return None, ""


class Solver:
    """Runs sessions for challenges against one provider and toolset."""

    def __init__(
        self,
        provider: Provider,
        *,
        sessions_root: str | Path,
        bundle: PromptBundle | None = None,
        router: Router | None = None,
        toolbox: Toolbox | None = None,
        arbiter=None,
        workspace=None,
        research=None,
        summarizer=None,
        crypto_endpoint: str | None = None,
        tool_timeout_s: float = 30.0,
        seed: int | None = None,
    ):
        self.provider = provider
        self.bundle = bundle or default_bundle()
        self.router = router or Router(provider, self.bundle.difficulty_rubric)
        self.toolbox = toolbox if toolbox is not None else builtin_toolbox()
        self.arbiter = arbiter if arbiter is not None else Arbiter()
        self.workspace = workspace
        self.research = research
        self.summarizer = summarizer
        self.crypto_endpoint = crypto_endpoint
        self.tool_timeout_s = tool_timeout_s
        self.seed = seed
        self.sessions_root = Path(sessions_root)
        self.sessions_root.mkdir(parents=True, exist_ok=True)
        provider.registry.check_ready()

    # -- session setup --

    def challenge_prompt(self, challenge: ChallengeDescriptor) -> str:
        return (f"Solve the challenge '{challenge.name}'. Start at stage RECON. "
                "The flag is accepted only through submit_flag.")

    def system_prompt(self, challenge: ChallengeDescriptor, endpoint, workspace=None) -> str:
        ws = workspace if workspace is not None else self.workspace
        summary = ws.summary_text() if ws is not None else "No workspace attached."
        return assemble_system_prompt(self.bundle, challenge, summary,
                                      tool_section=self.toolbox.render(), endpoint=endpoint)

    def new_session(
        self,
        challenge: ChallengeDescriptor,
        budget: int,
        *,
        endpoint: tuple[str, int] | None = None,
        directory: Path | None = None,
        label: str | None = None,
        user_prompt: str | None = None,
        seed: int | None = None,
        workspace=None,
    ) -> SessionState:
        if budget < 1:
            raise ValueError("turn budget must be positive")
        if isinstance(self.arbiter, Arbiter):
            self.arbiter.add(challenge)
        session_id = f"{challenge.id}-{uuid.uuid4().hex[:10]}"
        directory = Path(directory) if directory else self.sessions_root / session_id
        sandbox = directory / "sandbox"
        (sandbox / "files").mkdir(parents=True, exist_ok=True)
        (sandbox / "notes").mkdir(exist_ok=True)
        for rel in challenge.files:
            dst = sandbox / "files" / rel
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(challenge.root / rel, dst)
        for name in ("transcript.jsonl", "routing.jsonl", "tools.jsonl"):
            (directory / name).touch()
        ws = workspace if workspace is not None else self.workspace

        def submit(flag: str) -> str:
            return Verdict(self.arbiter.submit(challenge.id, flag, session_id)).value

        ctx = SessionContext(
            session_id=session_id,
            sandbox=sandbox,
            timeout_s=self.tool_timeout_s,
            endpoint=endpoint,
            workspace=ws,
            research=self.research,
            summarizer=self.summarizer,
            submit=submit,
            crypto_endpoint=self.crypto_endpoint,
            log_path=directory / "tools.jsonl",
        )
        transcript = [
            Message("system", self.system_prompt(challenge, endpoint, ws)),
            Message("user", user_prompt if user_prompt is not None else self.challenge_prompt(challenge)),
        ]
        state = SessionState(
            session_id=session_id,
            challenge=challenge,
            transcript=transcript,
            turn_budget=budget,
            context=ctx,
            label=label or challenge.id,
            directory=directory,
            routing_log=RoutingLog(directory / "routing.jsonl"),
            seed=seed if seed is not None else self.seed,
        )
        self._persist(state)
        return state

    def _persist(self, s: SessionState) -> None:
        new = s.transcript[s._persisted:]
        if new:
            with (s.directory / "transcript.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(_jsonl(new))
            s._persisted = len(s.transcript)

    def _routing_context(self, s: SessionState) -> str:
        tail = s.transcript[-CONTEXT_MESSAGES:]
        return "\n\n".join(f"[{m.role}] {m.content[:CONTEXT_CHARS]}" for m in tail if m.role != "system")

    # -- one turn --

    def step(self, s: SessionState) -> SessionState:
        if s.terminal:
            raise SessionError(f"session {s.session_id} is already terminal")
        if s.turn_count >= s.turn_budget:
            s.finish(Outcome(OutcomeKind.BUDGET_EXHAUSTED))
            return s
        last = next((m.content for m in reversed(s.transcript) if m.role == "assistant"), "")
        decision = self.router.decide(last, self._routing_context(s), session_label=s.label, tag=s.session_id)
        s.routing_log.append(s.turn_count + 1, decision)
        spec = self.provider.registry.get(decision.model_id)
        request = ChatRequest(
            model_id=decision.model_id,
            messages=handoff_context(s.transcript, s.last_tier, decision.tier, spec.context_limit),
            sampling_seed=s.seed,
            session_label=s.label,
            tools=self.toolbox.schemas() or None,
        )
        try:
            response = self.provider.complete(request, purpose="agent", tag=s.session_id)
        except ProviderError as exc:
            logger.error("session %s: model call failed: %s", s.session_id, exc)
            s.finish(Outcome(OutcomeKind.ERRORED, reason=str(exc)))
            self._persist(s)
            return s
        s.turn_count += 1
        s.last_tier = decision.tier

        calls = [ToolCall(c.name, c.arguments, c.id or f"t{s.turn_count}c{k}")
                 for k, c in enumerate(response.tool_calls)]
        s.transcript.append(Message("assistant", response.content, tool_calls=calls))
        m = _STAGE.search(response.content)
        if m:
            s.stage = SolveStage[m.group(1)]

        submitted_before = len(s.context.submissions)
        for call in calls:
            result = self.toolbox.dispatch(ToolInvocation(call.name, call.arguments, s.session_id), s.context)
            s.transcript.append(Message("tool", result.render(), tool_call_id=call.id, name=call.name))
        submissions = s.context.submissions[submitted_before:]

        if submissions:
            accepted = [flag for flag, verdict in submissions if verdict == Verdict.CORRECT.value]
            if accepted:
                s.finish(Outcome(OutcomeKind.SOLVED, flag=accepted[0]))
        else:
            candidate = detect_flag(response.content, s.challenge.flag)
            if candidate is not None:
                verdict = s.context.submit(candidate)
                s.context.submissions.append((candidate, verdict))
                if verdict == Verdict.CORRECT.value:
                    s.finish(Outcome(OutcomeKind.SOLVED, flag=candidate))
                else:
                    s.transcript.append(Message("user", f"Flag candidate {candidate} was judged {verdict}."))
        if not s.terminal and SURRENDER_TOKEN in response.content:
            s.finish(Outcome(OutcomeKind.AGENT_GAVE_UP))
        if not s.terminal and s.transcript[-1].role == "assistant":
            s.transcript.append(Message("user", CONTINUE_PROMPT))
        self._persist(s)
        return s

    def _drive(self, s: SessionState, cancel: threading.Event | None = None) -> SessionState:
        try:
            while not s.terminal:
                if cancel is not None and cancel.is_set():
                    s.finish(Outcome(OutcomeKind.ERRORED, reason="cancelled: another worker solved the challenge"))
                    break
                self.step(s)
        except Exception as exc:  # keep the session record consistent
            logger.exception("session %s crashed", s.session_id)
            if not s.terminal:
                s.finish(Outcome(OutcomeKind.ERRORED, reason=f"{type(exc).__name__}: {exc}"))
        finally:
            s.context.close()
            self._persist(s)
        return s

    # -- modes --

    def run_autonomous(
        self, challenge: ChallengeDescriptor, budget: int, *, endpoint: tuple[str, int] | None = None
    ) -> SessionState:
        s = self.new_session(challenge, budget, endpoint=endpoint)
        self._drive(s)
        self.write_report(s, mode="auto")
        return s

    def run_heavythink(
        self,
        challenge: ChallengeDescriptor,
        ht: HeavyThinkConfig,
        budget: int,
        *,
        endpoint: tuple[str, int] | None = None,
    ) -> SessionState:
        """Run ``ht.iterations`` rounds of ``ht.workers`` parallel workers.

        ``budget`` is the per-worker turn budget for each round.
        """
        top = self.new_session(challenge, budget, endpoint=endpoint)
        round_input = top.transcript[1].content
        vary = ht.vary_workers and ht.workers > 1
        rounds: list[dict] = []
        all_workers: list[SessionState] = []
        final: SessionState | None = None

        for r in range(ht.iterations):
            cancel = threading.Event()
            view = DeferredWorkspace(self.workspace) if self.workspace is not None else None
            workers = []
            for i in range(ht.workers):
                prompt = round_input + (f"\n\n(worker {i} of {ht.workers}: explore independently)" if vary else "")
                base_seed = self.seed if self.seed is not None else 0
                workers.append(self.new_session(
                    challenge, budget, endpoint=endpoint,
                    directory=top.directory / "workers" / f"r{r}w{i}",
                    label=f"{challenge.id}/r{r}/w{i}",
                    user_prompt=prompt,
                    seed=(base_seed + i) if vary else self.seed,
                    workspace=view,
                ))

            def work(w: SessionState) -> SessionState:
                self._drive(w, cancel)
                if w.outcome.kind is OutcomeKind.SOLVED:
                    cancel.set()
                return w

            if ht.workers == 1:
                work(workers[0])
            else:
                with ThreadPoolExecutor(max_workers=ht.workers, thread_name_prefix="heavythink") as pool:
                    list(pool.map(work, workers))
            all_workers += workers
            if view is not None:
                for doc_id in view.flush():
                    self.workspace.summarize(doc_id, self.summarizer)

            record = {"round": r, "workers": [{"index": i, "session_id": w.session_id, **w.outcome.to_dict(),
                                               "turns": w.turn_count} for i, w in enumerate(workers)]}
            rounds.append(record)
            solved = [w for w in workers if w.outcome.kind is OutcomeKind.SOLVED]
            if solved:
                final = solved[0]
                record["chosen"] = workers.index(final)
                break
            if all(w.outcome.kind is OutcomeKind.ERRORED for w in workers):
                top.finish(Outcome(OutcomeKind.ERRORED, reason=f"all workers errored in round {r}"))
                final = None
                break
            verdict = self.aggregate_candidates(workers, r, round_input=top.transcript[1].content,
                                               tier=ht.aggregator_tier, tag=top.session_id)
            record["chosen"] = verdict.index
            record["verdict"] = verdict.to_dict()
            final = workers[verdict.index]
            round_input = verdict.next_prompt

        if final is not None:
            top.transcript = list(final.transcript)
            top.turn_count = final.turn_count
            top.finish(final.outcome)
            shutil.copyfile(final.directory / "transcript.jsonl", top.directory / "transcript.jsonl")
            top._persisted = len(top.transcript)
        self._merge_logs(top, all_workers)
        self.write_report(top, mode="heavythink", ht=ht, rounds=rounds, workers=all_workers)
        return top

    def _merge_logs(self, top: SessionState, workers: list[SessionState]) -> None:
        for name in ("routing.jsonl", "tools.jsonl"):
            with (top.directory / name).open("w") as out:
                for w in workers:
                    for line in (w.directory / name).read_text().splitlines():
                        rec = json.loads(line)
                        rec["worker_session"] = w.session_id
                        out.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def digest(s: SessionState) -> str:
        parts = []
        for m in s.transcript[2:]:
            if m.role == "assistant":
                calls = "".join(f"\n-> {c.name}({json.dumps(c.arguments, sort_keys=True)})" for c in m.tool_calls)
                parts.append(f"[assistant] {m.content[:DIGEST_CHARS]}{calls}")
            elif m.role == "tool":
                parts.append(f"[{m.name} result] {m.content[:DIGEST_CHARS]}")
        text = "\n".join(parts)
        return text[-DIGEST_LIMIT:]

    def aggregate_candidates(
        self, workers: list[SessionState], round_index: int, *, round_input: str = "",
        tier: Tier = Tier.TOP, tag: str | None = None,
    ) -> AggregatorVerdict:
        alive = [i for i, w in enumerate(workers) if w.outcome is None or w.outcome.kind is not OutcomeKind.ERRORED]
        if not alive:
            raise SessionError("no non-errored candidate to aggregate")
        challenge = workers[0].challenge
        original = round_input or self.challenge_prompt(challenge)

        def verdict(i: int, why: str, fallback: bool = False) -> AggregatorVerdict:
            nxt = (f"{original}\n\n# Best trajectory so far (round {round_index + 1}, worker {i})\n"
                   f"{self.digest(workers[i])}\n\nContinue from this trajectory.")
            return AggregatorVerdict(i, why, nxt, fallback)

        if len(alive) == 1:
            return verdict(alive[0], "only one candidate")
        body = "\n\n".join(
            f"## Candidate {i} ({w.outcome.kind.value if w.outcome else 'RUNNING'}, {w.turn_count} turns)\n"
            + (self.digest(w) if i in alive else "(errored; not eligible)")
            for i, w in enumerate(workers)
        )
        spec = self.provider.registry.by_tier(tier)
        request = ChatRequest(
            model_id=spec.model_id,
            messages=[Message("system", AGGREGATOR_RUBRIC), Message("user", body)],
            temperature=0,
            session_label=f"aggregator/{challenge.id}/r{round_index}",
        )
        try:
            reply = self.provider.complete(request, purpose="aggregator", tag=tag).content
        except ProviderError as exc:
            logger.warning("aggregator call failed (%s); falling back to worker %d", exc, alive[0])
            return verdict(alive[0], f"aggregator failed: {exc}", fallback=True)
        index, why = _parse_aggregator(reply, len(workers))
        if index is None or index not in alive:
            logger.warning("unusable aggregator reply %r; falling back to worker %d", reply[:80], alive[0])
            return verdict(alive[0], "fallback: unusable aggregator reply", fallback=True)
        return verdict(index, why)

    # -- reports --

    def write_report(self, s: SessionState, *, mode: str, ht: HeavyThinkConfig | None = None,
                     rounds: list | None = None, workers: list[SessionState] | None = None) -> dict:
        tags = [s.session_id] + [w.session_id for w in workers or []]
        cost_micro = sum(self.provider.ledger.total_micro(t) for t in tags)
        tiers: dict[str, int] = {}
        for rec in s.routing_log.records if not workers else []:
            tiers[rec["tier"]] = tiers.get(rec["tier"], 0) + 1
        report = {
            "session_id": s.session_id,
            "challenge_id": s.challenge.id,
            "mode": mode,
            "outcome": s.outcome.kind.value if s.outcome else None,
            "flag": s.outcome.flag if s.outcome else None,
            "reason": s.outcome.reason if s.outcome else None,
            "turns": s.turn_count,
            "turn_budget": s.turn_budget,
            "wall_time_s": round(s.wall_time_s, 3),
            "cost_micro": cost_micro,
            "total_cost": cost_micro / 1e6,
            "stage": s.stage.name,
            "routing_tiers": tiers,
            "heavythink": None,
        }
        if ht is not None:
            report["heavythink"] = {
                "workers": ht.workers,
                "iterations": ht.iterations,
                "total_worker_turns": sum(w.turn_count for w in workers or []),
                "rounds": rounds or [],
            }
        (s.directory / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        return report
