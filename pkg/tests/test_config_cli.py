import json
import socket
from pathlib import Path

import pytest

from conftest import CORPUS, SCRIPTS
from ctfagent.cli import main, packaged, render_report
from ctfagent.config import ConfigError, RunConfig, interpolate


@pytest.fixture
def home(tmp_path, monkeypatch):
    monkeypatch.setenv("CTFAGENT_HOME", str(tmp_path / "home"))
    monkeypatch.delenv("CTFAGENT_CONFIG", raising=False)
    monkeypatch.chdir(tmp_path)
    return tmp_path / "home"


def stderr_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


# -- config --

def test_interpolation():
    env = {"A": "x"}
    assert interpolate("${A}/y", env) == "x/y"
    assert interpolate("${B:-dflt}/y", env) == "dflt/y"
    assert interpolate("${A:-dflt}", env) == "x"
    with pytest.raises(KeyError):
        interpolate("${B}", env)


def test_packaged_config_is_valid_and_round_trips(tmp_path):
    src = packaged("config.json")
    cfg = RunConfig.load(src)
    assert cfg.offline and cfg.mock_script == SCRIPTS / "corpus.json"
    assert cfg.to_dict() == json.loads(src.read_text())
    cfg.dump(tmp_path / "again.json")
    again = RunConfig.load(tmp_path / "again.json", validate=False)
    assert again.to_dict() == cfg.to_dict()
    assert (cfg.profile("intercode30").budget, cfg.profile("nyu50").budget) == (30, 50)


def test_all_violations_listed_at_once(tmp_path):
    doc = {
        "models": [{"model_id": "m", "tier": "LOW", "input_rate": -1}, {"model_id": "m", "tier": "MID"}],
        "offline": {"mock_script": "missing.json"},
        "research": {"blocklist": "nope.json", "per_channel_cap": 0},
        "bogus": 1,
        "profiles": [{"name": "p", "budget": 0}],
    }
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict(doc, tmp_path)
    v = info.value.violations
    for needle in ["unknown key 'bogus'", "tier must be MID or TOP", "input_rate must be non-negative",
                   "duplicate model_id", "no TOP-tier model", "mock_script", "research.blocklist",
                   "per_channel_cap", "profiles[0]"]:
        assert any(needle in x for x in v), needle
    assert len(v) >= 9


def test_exactly_one_backend(tmp_path):
    (tmp_path / "s.json").write_text("{}")
    models = [{"model_id": "a", "tier": "MID", "base_url": "http://x"},
              {"model_id": "b", "tier": "TOP", "base_url": "http://x"}]
    both = RunConfig.from_dict({"models": models, "offline": {"mock_script": "s.json"}}, tmp_path, validate=False)
    assert any("not both" in v for v in both.violations())
    neither = RunConfig.from_dict({"models": [{"model_id": "a", "tier": "MID"}, {"model_id": "b", "tier": "TOP"}]},
                                  tmp_path, validate=False)
    assert any("no backend" in v for v in neither.violations())
    live = RunConfig.from_dict({"models": [dict(m, api_key_env="NOT_SET_KEY") for m in models]},
                               tmp_path, validate=False)
    assert any("NOT_SET_KEY" in v for v in live.violations(env={}))
    assert live.violations(env={"NOT_SET_KEY": "k"}) == []


def test_unset_env_reference_is_violation(tmp_path):
    doc = json.loads(packaged("config.json").read_text())
    doc["workspace"] = "${NOWHERE_VAR}/ws"
    cfg = RunConfig.from_dict(doc, packaged(), validate=False)
    assert "environment variable NOWHERE_VAR referenced but not set" in cfg.violations(env={})


def test_input_paths_relative_to_config_and_outputs_to_cwd(home, tmp_path):
    cfg = RunConfig.load(packaged("config.json"))
    assert cfg.path("research.json") == packaged("research.json")
    assert cfg.output_path("workspace") == (home / "workspace").resolve()


# -- fail fast --

def test_no_network_or_model_before_validation(tmp_path, monkeypatch, capsys):
    calls = []
    monkeypatch.setattr(socket, "create_connection", lambda *a, **k: calls.append(a) or pytest.fail("network"))
    monkeypatch.setattr(socket.socket, "connect", lambda *a, **k: calls.append(a) or pytest.fail("network"))
    monkeypatch.setattr(RunConfig, "build_provider", lambda self: pytest.fail("provider built"))
    bad = {"models": [{"model_id": "a", "tier": "MID", "base_url": "http://127.0.0.1:9/v1",
                       "api_key_env": "MISSING_KEY_VAR"}], "research": {"timeout_s": 0}}
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    monkeypatch.delenv("MISSING_KEY_VAR", raising=False)
    for argv in (["run", "toy-xor"], ["bench", str(CORPUS)], ["research", "lattice attacks"],
                 ["ingest", "https://example.org/x"]):
        assert main(["--config", str(tmp_path / "bad.json"), *argv]) == 2
        err = stderr_error(capsys)
        assert err["error"] == "config" and len(err["violations"]) >= 3
    assert calls == []


def test_missing_config_file(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "none.json"), "run", "toy-xor"]) == 2
    assert "cannot read config" in stderr_error(capsys)["message"]


# -- commands --

def test_run_toy_xor_solved(home, capsys):
    assert main(["run", "toy-xor", "--mode", "auto", "--budget", "6"]) == 0
    out = capsys.readouterr().out
    assert "SOLVED" in out and "flag{x0r_k3y_r3us3d}" in out
    session_dir = Path(out.strip().splitlines()[-1].split(": ", 1)[1])
    report = json.loads((session_dir / "report.json").read_text())
    assert (session_dir / "routing.png").is_file()
    assert report["turns"] <= 6 and report["outcome"] == "SOLVED"
    assert (home / "sessions").is_dir()


def test_run_heavythink_zero_workers_is_config_error(home, capsys):
    assert main(["run", "x", "--mode", "heavythink", "--workers", "0"]) == 2
    err = stderr_error(capsys)
    assert err["error"] == "config" and "workers >= 1" in err["message"]


def test_run_heavythink_solves(home, capsys):
    # the shipped scripts hold one trajectory per challenge, so a single worker replays it
    assert main(["run", "caesar", "--mode", "heavythink", "--workers", "1", "--iters", "1"]) == 0
    out = capsys.readouterr().out
    assert "SOLVED" in out and "N=1 M=1" in out


def test_run_unknown_challenge(home, capsys):
    assert main(["run", "does-not-exist"]) == 1
    assert stderr_error(capsys)["error"] == "unknown_challenge"


def test_bench_nyu50_table(home, tmp_path, capsys):
    out_dir = tmp_path / "bench"
    assert main(["bench", str(CORPUS), "--profile", "nyu50", "--out", str(out_dir)]) == 0
    out = capsys.readouterr().out
    assert "profile nyu50 (budget 50" in out and "solved 5/5" in out
    report = json.loads((out_dir / "bench_report.json").read_text())
    assert all(r["turns"] <= 50 for r in report["rows"])
    assert (out_dir / "bench_report.png").is_file()
    assert main(["report", str(out_dir)]) == 0
    assert "solved 5/5" in capsys.readouterr().out


def test_bench_sabotaged_via_flag(home, tmp_path, capsys):
    out_dir = tmp_path / "b"
    assert main(["bench", str(CORPUS), "--mock-script", str(SCRIPTS / "sabotaged.json"), "--out", str(out_dir)]) == 0
    assert "solved 4/5" in capsys.readouterr().out


def test_bench_unknown_profile(home, capsys):
    assert main(["bench", str(CORPUS), "--profile", "nope"]) == 2
    assert "unknown profile" in stderr_error(capsys)["message"]


def test_scan_command(capsys):
    assert main(["scan", str(CORPUS)]) == 0
    data = json.loads(capsys.readouterr().out)
    assert [c["id"] for c in data["challenges"]] == ["b64-layers", "caesar", "keystream-reuse", "rsa-small-e", "toy-xor"]


def test_scan_bad_root(tmp_path, capsys):
    assert main(["scan", str(tmp_path / "missing")]) == 1
    assert stderr_error(capsys)["error"] == "scan"


def test_serve_brief(capsys):
    assert main(["serve", str(CORPUS), "--duration", "0.2"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["arbitration"].startswith("http://127.0.0.1:") and "keystream-reuse" in data["services"]


def test_research_command(home, capsys):
    assert main(["research", "small exponent RSA; cube root attack"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report["items"]) == {"WEB", "ACADEMIC", "CODE"}
    assert all(len(i["snapshot_refs"]) == 2 for items in report["items"].values() for i in items)


def test_ingest_command(home, tmp_path, capsys):
    f = tmp_path / "paper.md"
    f.write_text("# PRNG\n\nTruncated outputs leak state. More text.")
    assert main(["ingest", str(f), "--title", "PRNG notes"]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["title"] == "PRNG notes" and "SUMMARY" in rec["representations"]
    assert (home / "workspace" / "index.json").is_file()
    assert main(["ingest", str(tmp_path / "none.md")]) == 1


def test_report_missing(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 1
    assert stderr_error(capsys)["error"] == "not_found"


def test_render_session_report():
    text = render_report({"session_id": "s", "challenge_id": "c", "mode": "auto", "outcome": "SOLVED",
                          "flag": "f", "turns": 3, "routing_tiers": {"MID": 2, "TOP": 1}})
    assert "outcome" in text and "MID=2, TOP=1" in text
