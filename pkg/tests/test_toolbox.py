import json
import time

import httpx
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import service_challenge
from ctfagent.harness import ServiceHost
from ctfagent.research import FixtureChannel, FixtureConverter, DeepResearch, Channel, Hit
from ctfagent.toolbox import (
    TRUNCATION_MARKER,
    EffectClass,
    Param,
    SessionContext,
    Status,
    ToolDescriptor,
    ToolInvocation,
    Toolbox,
    builtin_toolbox,
)
from ctfagent.workspace import DeferredWorkspace, Workspace


@pytest.fixture
def ctx(tmp_path):
    sandbox = tmp_path / "session" / "sandbox"
    sandbox.mkdir(parents=True)
    return SessionContext("s1", sandbox, timeout_s=5, log_path=tmp_path / "session" / "tools.jsonl")


BOX = builtin_toolbox()


def call(ctx, name, **args):
    return BOX.dispatch(ToolInvocation(name, args, ctx.session_id), ctx)


def tree(root):
    return sorted(str(p.relative_to(root)) for p in root.rglob("*"))


# -- registry --

def test_register_renders_and_rejects_duplicates():
    box = Toolbox()
    d = ToolDescriptor("read_file", "Read a file.", {"path": Param("string")}, EffectClass.READ_ONLY)
    box.register(d, lambda ctx, path: path)
    assert "- read_file(path: string) [READ_ONLY]: Read a file." in box.render()
    with pytest.raises(ValueError, match="already registered"):
        box.register(d, lambda ctx, path: path)
    with pytest.raises(ValueError):
        Toolbox().register(ToolDescriptor("x", " ", {}, EffectClass.READ_ONLY), lambda ctx: "")


def test_empty_registry_renders_no_tools_section():
    assert Toolbox().render() == "## Available tools\nNo tools are available in this session."


def test_builtin_set_is_complete():
    names = {d.name for d in BOX.descriptors}
    assert names >= {"read_file", "write_file", "list_dir", "run_command", "remote_connect", "remote_send",
                     "remote_recv", "remote_close", "deep_research", "workspace_ingest", "workspace_lookup",
                     "crypto_compute", "submit_flag"}
    for schema in BOX.schemas():
        assert schema["function"]["description"] and schema["function"]["parameters"]["type"] == "object"


# -- dispatch contract --

def test_read_file_exact_contents(ctx):
    (ctx.sandbox / "ten.bin").write_bytes(b"0123456789")
    r = call(ctx, "read_file", path="ten.bin")
    assert (r.status, r.output) == (Status.OK, "0123456789")


def test_binary_file_is_hex(ctx):
    (ctx.sandbox / "b").write_bytes(b"\xff\x00")
    assert call(ctx, "read_file", path="b").output == "hex:ff00"


def test_run_command_arithmetic(ctx):
    r = call(ctx, "run_command", command="python3 -c 'print(2+3)'")
    assert (r.status, r.output.strip(), r.exit_code) == (Status.OK, "5", 0)


def test_run_command_runs_in_sandbox(ctx):
    call(ctx, "run_command", command="echo hi > made.txt")
    assert (ctx.sandbox / "made.txt").read_text() == "hi\n"


def test_nonzero_exit_is_reported(ctx):
    r = call(ctx, "run_command", command="exit 3")
    assert r.status is Status.OK and r.exit_code == 3 and "[exit status 3]" in r.render()


def test_timeout_measured_against_stopwatch(ctx):
    ctx.timeout_s = 2
    t0 = time.monotonic()
    r = call(ctx, "run_command", command="sleep 100")
    elapsed = time.monotonic() - t0
    assert r.status is Status.TIMEOUT
    assert 2.0 <= elapsed < 2.0 + 1.5
    assert r.duration_s >= 2.0


def test_generic_handler_timeout(ctx):
    box = Toolbox()
    box.register(ToolDescriptor("nap", "Sleep.", {}, EffectClass.READ_ONLY), lambda c: time.sleep(5))
    ctx.timeout_s = 0.3
    r = box.dispatch(ToolInvocation("nap", {}), ctx)
    assert r.status is Status.TIMEOUT and r.duration_s >= 0.3


def test_unknown_tool_is_error_data(ctx):
    r = call(ctx, "rm_rf")
    assert r.status is Status.ERROR and "'rm_rf'" in r.output


def test_schema_violation_lists_fields(ctx):
    r = call(ctx, "write_file", path=3, extra="x")
    assert r.status is Status.ERROR
    assert "path: expected string" in r.output and "content: missing" in r.output and "extra: unknown" in r.output


def test_handler_crash_is_error_data(ctx):
    box = Toolbox()
    box.register(ToolDescriptor("bad", "Crash.", {}, EffectClass.READ_ONLY), lambda c: 1 / 0)
    r = box.dispatch(ToolInvocation("bad", {}), ctx)
    assert r.status is Status.ERROR and "ZeroDivisionError" in r.output


def test_truncation_marker_and_length(ctx):
    ctx.output_cap = 100
    r = call(ctx, "run_command", command="python3 -c 'print(\"x\" * 500)'")
    assert len(r.output) <= 100 and r.output.endswith(TRUNCATION_MARKER)
    assert r.truncated and r.original_length == 501


def test_tools_log(ctx):
    call(ctx, "list_dir")
    (line,) = ctx.log_path.read_text().splitlines()
    entry = json.loads(line)
    assert entry["tool"] == "list_dir" and entry["status"] == "OK"


# -- confinement --

TRAVERSALS = ["../escape.txt", "../../escape.txt", "/tmp/escape.txt", "notes/../../escape.txt",
              "~/escape.txt", "files/../../../escape.txt", "./../escape.txt", "/etc/passwd"]
COMMANDS = ["echo x > ../escape.txt", "touch /tmp/escape.txt", "cd .. && touch escape.txt",
            "cp files/a ../escape.txt", "echo x >/tmp/escape.txt", "touch ~/../escape.txt",
            "python3 -c 'open(\"/tmp/escape.txt\",\"w\")'", "cd ..; touch escape.txt"]


@pytest.mark.parametrize("path", TRAVERSALS)
def test_write_file_traversal_rejected(ctx, path):
    outside = ctx.sandbox.parent.parent
    before = tree(outside)
    r = call(ctx, "write_file", path=path, content="x")
    assert r.status is Status.ERROR
    assert tree(outside) == before or set(tree(outside)) - set(before) <= {"session/tools.jsonl"}


@pytest.mark.parametrize("command", COMMANDS)
def test_run_command_traversal_rejected(ctx, command):
    r = call(ctx, "run_command", command=command)
    assert r.status is Status.ERROR
    assert not (ctx.sandbox.parent / "escape.txt").exists()


@settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.sampled_from(["..", ".", "a", "b", "..."]), min_size=1, max_size=6), st.booleans())
def test_write_file_never_escapes(tmp_path_factory, parts, absolute):
    root = tmp_path_factory.mktemp("conf")
    sandbox = root / "s" / "sandbox"
    sandbox.mkdir(parents=True)
    c = SessionContext("p", sandbox)
    path = ("/" if absolute else "") + "/".join(parts + ["f.txt"])
    r = BOX.dispatch(ToolInvocation("write_file", {"path": path, "content": "x"}), c)
    created = [p for p in root.rglob("*") if p.is_file()]
    assert all(sandbox in p.parents for p in created)
    if absolute:
        assert r.status is Status.ERROR and not created


# -- remote tools --

def test_remote_echo(ctx):
    with ServiceHost() as host:
        ctx.endpoint = host.schedule(service_challenge("echo"))
        assert call(ctx, "remote_connect").output.startswith("c0 connected")
        call(ctx, "remote_send", data="ping")
        assert call(ctx, "remote_recv").output == "ping"
        assert call(ctx, "remote_close").output == "c0 closed"
        assert call(ctx, "remote_recv").status is Status.ERROR


def test_remote_connect_refused_is_network_error(ctx):
    import socket
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    r = call(ctx, "remote_connect", host="127.0.0.1", port=port)
    assert r.status is Status.ERROR and "NETWORK" in r.output


def test_remote_connect_without_endpoint(ctx):
    assert call(ctx, "remote_connect").status is Status.ERROR


# -- research, workspace, crypto --

def test_deep_research_returns_report_json(ctx):
    hit = Hit("Lattice notes", "https://n.example/lll")
    pages = {hit.url: "Reduction. Details."}
    ctx.research = DeepResearch({Channel.WEB: FixtureChannel([hit])}, FixtureConverter("md", pages),
                                FixtureConverter("txt", pages))
    r = call(ctx, "deep_research", topics=["lattice reduction"])
    assert r.status is Status.OK
    report = json.loads(r.output)
    assert report["items"]["WEB"][0]["origin_url"] == hit.url


def test_deep_research_unconfigured(ctx):
    assert call(ctx, "deep_research", topics=["a b"]).status is Status.ERROR


def test_workspace_ingest_and_lookup(ctx, tmp_path):
    ctx.workspace = Workspace(tmp_path / "ws")
    (ctx.sandbox / "notes.txt").write_text("First. Second.")
    r = call(ctx, "workspace_ingest", path="notes.txt", title="Notes")
    assert r.status is Status.OK and "summary ready" in r.output
    doc_id = r.output.split()[1]
    out = call(ctx, "workspace_lookup", doc_id=doc_id).output
    assert "--- SUMMARY ---" in out and "First. Second." in out
    assert call(ctx, "workspace_lookup", doc_id=doc_id, kind="raw").status is Status.ERROR
    assert call(ctx, "workspace_ingest", path="../x").status is Status.ERROR


def test_workspace_ingest_deferred(ctx, tmp_path):
    base = Workspace(tmp_path / "ws")
    ctx.workspace = DeferredWorkspace(base)
    (ctx.sandbox / "n.txt").write_text("later")
    assert "queued" in call(ctx, "workspace_ingest", path="n.txt").output
    assert len(base) == 0


def test_crypto_compute_unconfigured(ctx):
    r = call(ctx, "crypto_compute", program="print(1)")
    assert r.status is Status.ERROR and r.output == "endpoint not configured"


def test_crypto_compute_wire_contract(ctx):
    seen = {}

    def handler(request):
        seen.update(json.loads(request.content))
        return httpx.Response(200, json={"stdout": "42\n", "stderr": "", "exit_status": 0})
    ctx.crypto_endpoint = "http://sage.local/run"
    ctx.http = httpx.Client(transport=httpx.MockTransport(handler))
    r = call(ctx, "crypto_compute", program="print(6*7)")
    assert (r.status, r.output, r.exit_code) == (Status.OK, "42\n", 0)
    assert seen == {"language": "sage", "program": "print(6*7)", "stdin": ""}


def test_crypto_compute_network_error(ctx):
    ctx.crypto_endpoint = "http://sage.local/run"
    ctx.http = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(502)))
    r = call(ctx, "crypto_compute", program="x")
    assert r.status is Status.ERROR and "NETWORK" in r.output


def test_submit_flag_records_verdict(ctx):
    ctx.submit = lambda flag: "CORRECT" if flag == "flag{a}" else "INCORRECT"
    assert call(ctx, "submit_flag", flag="flag{b}").output == "INCORRECT"
    assert call(ctx, "submit_flag", flag="flag{a}").output == "CORRECT"
    assert ctx.submissions == [("flag{b}", "INCORRECT"), ("flag{a}", "CORRECT")]
