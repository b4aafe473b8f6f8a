import copy
import json
import shutil
from decimal import Decimal
from pathlib import Path

import pytest

from ctfagent.challenge import ChallengeDescriptor, FlagContract, ServiceSpec
from ctfagent.cli import packaged
from ctfagent.harness import Arbiter, scan
from ctfagent.orchestrator import Solver
from ctfagent.provider import MockBackend, ModelRegistry, ModelSpec, Provider, Tier

TESTS = Path(__file__).parent
SERVICES = TESTS / "fixtures" / "services"
CORPUS = packaged("corpus")
SCRIPTS = packaged("scripts")
FIXTURE_IDS = ["b64-layers", "caesar", "keystream-reuse", "rsa-small-e", "toy-xor"]


def registry(mid_rates=("0.5", "1.5"), top_rates=("3", "15"), mid_limit=128_000, top_limit=200_000):
    return ModelRegistry([
        ModelSpec("mid-model", Tier.MID, Decimal(mid_rates[0]), Decimal(mid_rates[1]), mid_limit),
        ModelSpec("top-model", Tier.TOP, Decimal(top_rates[0]), Decimal(top_rates[1]), top_limit),
    ])


def provider(script: dict, **kw) -> Provider:
    kw.setdefault("sleep", lambda s: None)
    return Provider(kw.pop("registry", None) or registry(), MockBackend.from_document(script), **kw)


def corpus_script(name="corpus.json") -> dict:
    return json.loads((SCRIPTS / name).read_text())


def reply(content="", calls=(), match="next", repeat=False):
    e = {"match": match, "response": {"content": content,
                                      "tool_calls": [{"name": n, "arguments": a} for n, a in calls]}}
    if repeat:
        e["repeat"] = True
    return e


def service_challenge(script: str, cid: str | None = None) -> ChallengeDescriptor:
    """Descriptor hosting one of the tests/fixtures/services scripts."""
    return ChallengeDescriptor(cid or script, script, "misc", SERVICES, (), FlagContract(literal="flag{svc}"),
                               service=ServiceSpec(SERVICES / f"{script}.py"))


def block(level="L2"):
    return f'\n```json\n{{"difficulty": "{level}", "rationale": "test"}}\n```'


@pytest.fixture
def corpus_index():
    return scan(CORPUS)


@pytest.fixture
def make_solver(tmp_path):
    """Build a Solver over a fresh mock backend; returns (solver, provider)."""
    counter = {"n": 0}

    def make(script=None, **kw):
        counter["n"] += 1
        prov = provider(copy.deepcopy(script if script is not None else corpus_script()))
        kw.setdefault("sessions_root", tmp_path / f"sessions{counter['n']}")
        kw.setdefault("arbiter", Arbiter())
        return Solver(prov, **kw), prov
    return make


@pytest.fixture
def challenge_tree(tmp_path):
    """Copy of the packaged corpus that tests may modify."""
    dst = tmp_path / "corpus"
    shutil.copytree(CORPUS, dst)
    return dst


# -- acceptance reporting --

ACCEPTANCE_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        status, title, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}: {title}" + (f" ({detail})" if detail else ""))
