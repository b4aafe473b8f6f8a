import json

import pytest

from conftest import block, reply
from ctfagent.challenge import ChallengeDescriptor, FlagContract
from ctfagent.governance import SURRENDER_TOKEN, SolveStage, validate_workspace_layout
from ctfagent.orchestrator import (
    CONTINUE_PROMPT,
    HeavyThinkConfig,
    Outcome,
    OutcomeKind,
    SessionError,
    _parse_aggregator,
    detect_flag,
)
from ctfagent.workspace import Workspace

FLAG = "flag{t3st_fl4g}"


@pytest.fixture
def chal(tmp_path):
    root = tmp_path / "chal"
    root.mkdir()
    (root / "data.txt").write_text("ciphertext")
    return ChallengeDescriptor("t", "Test", "crypto", root, ("data.txt",), FlagContract(literal=FLAG))


def script(*entries, grader="L2", **labels):
    doc = {"grader": [reply(grader, repeat=True)], "aggregator": [reply('{"choice": 0}', repeat=True)]}
    if entries:
        doc["t"] = list(entries)
    doc.update({k.replace("__", "/"): v for k, v in labels.items()})
    return doc


STALL = reply("Stage: ANALYSIS\nthinking" + block("L2"), repeat=True)


def lines(path):
    return [json.loads(x) for x in path.read_text().splitlines()]


# -- single turns --

def test_step_counts_one_turn_per_model_call(make_solver, chal):
    solver, prov = make_solver(script(reply("Stage: RECON\nlook" + block("L1"),
                                            [("list_dir", {"path": "files"}), ("read_file", {"path": "files/data.txt"})])))
    s = solver.new_session(chal, 5)
    solver.step(s)
    assert s.turn_count == 1 and not s.terminal
    roles = [m.role for m in s.transcript]
    assert roles == ["system", "user", "assistant", "tool", "tool"]
    assert s.transcript[-1].content == "ciphertext"
    assert [m.tool_call_id for m in s.transcript[3:]] == ["call_0", "call_1"]
    assert len(lines(s.directory / "transcript.jsonl")) == 5
    assert len(lines(s.directory / "tools.jsonl")) == 2
    (route,) = lines(s.directory / "routing.jsonl")
    assert route["turn"] == 1 and route["source"] == "GRADER_AGENT"  # turn 1 has no agent output yet
    assert prov.ledger.count("agent") == 1 and prov.ledger.count("grader") == 1


def test_second_turn_uses_self_assessment(make_solver, chal):
    solver, prov = make_solver(script(reply("a" + block("L4")), reply("b" + block("L1"))))
    s = solver.new_session(chal, 5)
    solver.step(s)
    solver.step(s)
    routes = lines(s.directory / "routing.jsonl")
    assert [(r["source"], r["tier"]) for r in routes] == [("GRADER_AGENT", "MID"), ("SELF_ASSESSMENT", "TOP")]
    assert prov.ledger.count("grader") == 1
    assert [e.model_id for e in prov.ledger.entries if e.purpose == "agent"] == ["mid-model", "top-model"]


def test_continue_prompt_after_bare_reply(make_solver, chal):
    solver, _ = make_solver(script(reply("Stage: KNOWLEDGE\nhmm")))
    s = solver.new_session(chal, 5)
    solver.step(s)
    assert s.transcript[-1].role == "user" and s.transcript[-1].content == CONTINUE_PROMPT
    assert s.stage is SolveStage.KNOWLEDGE


def test_explicit_submit_solves(make_solver, chal):
    solver, _ = make_solver(script(reply("Stage: FLAG_VALIDATE", [("submit_flag", {"flag": FLAG})])))
    s = solver.run_autonomous(chal, 5)
    assert s.outcome == Outcome(OutcomeKind.SOLVED, FLAG) and s.turn_count == 1
    assert s.transcript[-1].content == "CORRECT"


def test_explicit_submission_takes_precedence_over_passive_detection(make_solver, chal):
    solver, _ = make_solver(script(reply(f"maybe {FLAG}", [("submit_flag", {"flag": "flag{wrong}"})]), STALL))
    s = solver.new_session(chal, 1)
    solver.step(s)
    assert not s.terminal
    assert s.context.submissions == [("flag{wrong}", "INCORRECT")]


def test_passive_detection_submits(make_solver, chal):
    solver, _ = make_solver(script(reply(f"The flag is {FLAG}.")))
    s = solver.run_autonomous(chal, 3)
    assert s.outcome.kind is OutcomeKind.SOLVED and s.outcome.flag == FLAG


def test_wrong_passive_candidate_is_reported_back(make_solver, chal):
    solver, _ = make_solver(script(reply("Found flag{nope}"), STALL))
    s = solver.new_session(chal, 3)
    solver.step(s)
    assert s.transcript[-1].content == "Flag candidate flag{nope} was judged INCORRECT."
    assert not s.terminal


def test_surrender_token(make_solver, chal):
    solver, _ = make_solver(script(reply(f"No way forward. {SURRENDER_TOKEN}")))
    s = solver.run_autonomous(chal, 10)
    assert s.outcome.kind is OutcomeKind.AGENT_GAVE_UP and s.turn_count == 1


@pytest.mark.parametrize("budget", [1, 2, 7])
def test_budget_exhausted_exactly(make_solver, chal, budget):
    solver, prov = make_solver(script(STALL))
    s = solver.run_autonomous(chal, budget)
    assert s.outcome.kind is OutcomeKind.BUDGET_EXHAUSTED and s.turn_count == budget
    assert prov.ledger.count("agent") == budget
    report = json.loads((s.directory / "report.json").read_text())
    assert report["turns"] == budget and report["outcome"] == "BUDGET_EXHAUSTED"


def test_provider_failure_is_errored(make_solver, chal):
    solver, _ = make_solver(script(reply("one")))
    s = solver.run_autonomous(chal, 5)
    assert s.outcome.kind is OutcomeKind.ERRORED and s.turn_count == 1 and s.outcome.reason


def test_invalid_budget_and_terminal_step(make_solver, chal):
    solver, _ = make_solver(script(reply(FLAG)))
    with pytest.raises(ValueError):
        solver.new_session(chal, 0)
    s = solver.run_autonomous(chal, 2)
    with pytest.raises(SessionError):
        solver.step(s)
    s.turn_count = 3
    with pytest.raises(SessionError):
        s.finish(Outcome(OutcomeKind.SOLVED))


def test_detect_flag():
    contract = FlagContract(literal=FLAG)
    assert detect_flag(f"so {FLAG}, done", contract) == FLAG
    assert detect_flag("nothing", contract) is None
    assert detect_flag("ctf{a} flag{b}", FlagContract(pattern=r"ctf\{[a-z]\}")) == "ctf{a}"


def test_session_layout_and_report(make_solver, chal):
    solver, _ = make_solver(script(reply("go", [("write_file", {"path": "notes/n.md", "content": "x"})]),
                                   reply(FLAG)))
    s = solver.run_autonomous(chal, 5)
    assert validate_workspace_layout(s.directory) == []
    assert (s.directory / "sandbox" / "files" / "data.txt").read_text() == "ciphertext"
    report = json.loads((s.directory / "report.json").read_text())
    assert report["mode"] == "auto" and report["outcome"] == "SOLVED" and report["flag"] == FLAG
    assert report["cost_micro"] > 0 and report["total_cost"] == report["cost_micro"] / 1e6
    assert sum(report["routing_tiers"].values()) == 2


def test_transcript_file_matches_memory(make_solver, chal):
    solver, _ = make_solver(script(reply("a", [("list_dir", {})]), reply(FLAG)))
    s = solver.run_autonomous(chal, 5)
    assert lines(s.directory / "transcript.jsonl") == [m.to_dict() for m in s.transcript]


# -- HeavyThink --

def ht_script():
    """Round 0: every worker stalls; the aggregator picks worker 2. Round 1: worker 1 solves."""
    stall = lambda tag: [reply(f"Stage: ANALYSIS\n{tag}" + block("L3"), repeat=True)]
    return script(**{
        "t__r0__w0": stall("w0-idea"), "t__r0__w1": stall("w1-idea"), "t__r0__w2": stall("w2-lattice-idea"),
        "t__r1__w0": stall("r1w0"), "t__r1__w2": stall("r1w2"),
        "t__r1__w1": [reply("Stage: FLAG_VALIDATE", [("submit_flag", {"flag": FLAG})])],
        "aggregator": [reply('{"scores": [0.1, 0.4, 0.9], "justification": "w2 found the lattice"}', repeat=True)],
    })


def test_heavythink_picks_worker_two_then_solves(make_solver, chal):
    solver, prov = make_solver(ht_script())
    top = solver.run_heavythink(chal, HeavyThinkConfig(workers=3, iterations=2), 2)
    assert top.outcome == Outcome(OutcomeKind.SOLVED, FLAG)
    report = json.loads((top.directory / "report.json").read_text())
    rounds = report["heavythink"]["rounds"]
    assert [r["chosen"] for r in rounds] == [2, 1]
    assert rounds[0]["verdict"]["justification"] == "w2 found the lattice"
    assert report["heavythink"]["total_worker_turns"] == 2 * 3 + 1 + sum(
        w["turns"] for w in rounds[1]["workers"] if w["index"] != 1)
    assert prov.ledger.count("aggregator") == 1
    # round-1 workers start from the original prompt plus worker 2's digest
    r1 = lines(top.directory / "workers" / "r1w0" / "transcript.jsonl")[1]["content"]
    assert r1.startswith(solver.challenge_prompt(chal)) and "w2-lattice-idea" in r1 and "w0-idea" not in r1
    # top-level transcript is the solving worker's
    assert (top.directory / "transcript.jsonl").read_text() == \
        (top.directory / "workers" / "r1w1" / "transcript.jsonl").read_text()
    for d in [top.directory] + sorted((top.directory / "workers").iterdir()):
        assert validate_workspace_layout(d) == []
    sessions = {rec["worker_session"] for rec in lines(top.directory / "routing.jsonl")}
    assert len(sessions) == 6


def test_heavythink_worker_prompts_vary(make_solver, chal):
    solver, _ = make_solver(ht_script())
    top = solver.run_heavythink(chal, HeavyThinkConfig(workers=3, iterations=1), 1)
    prompts = {lines(d / "transcript.jsonl")[1]["content"] for d in (top.directory / "workers").iterdir()}
    assert len(prompts) == 3
    assert top.outcome.kind is OutcomeKind.BUDGET_EXHAUSTED  # final round chose a stalled worker


def test_heavythink_early_exit(make_solver, chal):
    doc = script(t__r0__w0=[reply(FLAG)], t__r0__w1=[STALL], t__r0__w2=[STALL])
    solver, prov = make_solver(doc)
    top = solver.run_heavythink(chal, HeavyThinkConfig(workers=3, iterations=3), 30)
    assert top.outcome.flag == FLAG
    report = json.loads((top.directory / "report.json").read_text())
    assert len(report["heavythink"]["rounds"]) == 1 and report["heavythink"]["rounds"][0]["chosen"] == 0
    assert prov.ledger.count("aggregator") == 0
    assert not (top.directory / "workers" / "r1w0").exists()
    for w in report["heavythink"]["rounds"][0]["workers"][1:]:
        assert w["kind"] in ("BUDGET_EXHAUSTED", "ERRORED")
        if w["kind"] == "ERRORED":
            assert w["reason"].startswith("cancelled")
        assert w["turns"] <= 30


def test_heavythink_all_errored(make_solver, chal):
    solver, _ = make_solver(script(reply("only one reply")))
    top = solver.run_heavythink(chal, HeavyThinkConfig(workers=2, iterations=2), 3)
    assert top.outcome.kind is OutcomeKind.ERRORED and "all workers errored" in top.outcome.reason


def test_heavythink_workers_write_workspace_at_round_boundary(make_solver, chal, tmp_path):
    ws = Workspace(tmp_path / "ws")
    doc = script(t__r0__w0=[reply("save", [("write_file", {"path": "notes/k.md", "content": "Key insight."}),
                                           ("workspace_ingest", {"path": "notes/k.md"})]), STALL])
    solver, _ = make_solver(doc, workspace=ws)
    solver.run_heavythink(chal, HeavyThinkConfig(workers=1, iterations=1), 2)
    (rec,) = ws.list()
    assert "SUMMARY" in rec.representations and ws.read(rec.doc_id) == "Key insight."


def test_heavythink_config_validation():
    with pytest.raises(ValueError):
        HeavyThinkConfig(workers=0)
    with pytest.raises(ValueError):
        HeavyThinkConfig(iterations=0)


# -- aggregator --

def candidates(solver, chal, n, errored=()):
    ws = []
    for i in range(n):
        w = solver.new_session(chal, 1, label=f"t/r0/w{i}")
        w.finish(Outcome(OutcomeKind.ERRORED, reason="x") if i in errored else Outcome(OutcomeKind.BUDGET_EXHAUSTED))
        ws.append(w)
    return ws


@pytest.mark.parametrize("scores,expected", [([1, 3, 3], 1), ([5, 5, 5], 0), ([0, 0, 2], 2), ([2.5, 1, 2.5], 0)])
def test_aggregator_argmax_lowest_index_ties(make_solver, chal, scores, expected):
    solver, _ = make_solver({"aggregator": [reply(json.dumps({"scores": scores}), repeat=True)]})
    ws = candidates(solver, chal, 3)
    picks = {solver.aggregate_candidates(ws, 0).index for _ in range(100)}
    assert picks == {expected}


def test_aggregator_request_shape(make_solver, chal):
    solver, prov = make_solver({"aggregator": [reply("I choose worker 1", repeat=True)]})
    ws = candidates(solver, chal, 2)
    v = solver.aggregate_candidates(ws, 3, tag="top")
    assert v.index == 1 and not v.fallback
    (entry,) = prov.ledger.entries
    assert entry.model_id == "top-model" and entry.purpose == "aggregator" and entry.tag == "top"


def test_aggregator_fallbacks(make_solver, chal):
    solver, _ = make_solver({"aggregator": [reply("no idea", repeat=True)]})
    ws = candidates(solver, chal, 3, errored=(0,))
    v = solver.aggregate_candidates(ws, 0)
    assert (v.index, v.fallback) == (1, True)
    solver, _ = make_solver({"aggregator": [reply('{"choice": 0}', repeat=True)]})
    v = solver.aggregate_candidates(candidates(solver, chal, 3, errored=(0,)), 0)
    assert (v.index, v.fallback) == (1, True)  # an errored pick is not eligible
    solver, prov = make_solver({"aggregator": [{"error": "transport", "repeat": True}]})
    v = solver.aggregate_candidates(candidates(solver, chal, 2), 0)
    assert (v.index, v.fallback) == (0, True)


def test_aggregator_singleton_skips_model(make_solver, chal):
    solver, prov = make_solver({})
    v = solver.aggregate_candidates(candidates(solver, chal, 3, errored=(0, 2)), 0)
    assert v.index == 1 and len(prov.ledger) == 0
    with pytest.raises(SessionError):
        solver.aggregate_candidates(candidates(solver, chal, 2, errored=(0, 1)), 0)


def test_parse_aggregator_forms():
    assert _parse_aggregator('{"scores": [1, 2], "justification": "j"}', 2) == (1, "j")
    assert _parse_aggregator('{"scores": [1], "choice": 1}', 2) == (1, "")  # wrong-length scores ignored
    assert _parse_aggregator("We choose candidate #2 here", 3)[0] == 2
    assert _parse_aggregator("prose only", 3) == (None, "")
