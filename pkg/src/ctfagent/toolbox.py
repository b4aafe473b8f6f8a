"""Agent-invocable tools.

Every failure is returned as a :class:`ToolResult`; dispatch never raises
into the agent loop. Handlers run inside the session sandbox directory and
are cut off at a wall-clock limit.
"""

from __future__ import annotations

import json
import logging
import os
import re
import signal
import socket
import subprocess
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable

import httpx

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 30.0
OUTPUT_CAP = 64 * 1024
TRUNCATION_MARKER = "\n[... output truncated]"
RECV_TIMEOUT_S = 5.0


class EffectClass(str, Enum):
    READ_ONLY = "READ_ONLY"
    WRITES_SESSION_DIR = "WRITES_SESSION_DIR"
    EXECUTES = "EXECUTES"
    NETWORK = "NETWORK"


class Status(str, Enum):
    OK = "OK"
    ERROR = "ERROR"
    TIMEOUT = "TIMEOUT"


_PY_TYPES = {
    "string": (str,),
    "integer": (int,),
    "number": (int, float),
    "boolean": (bool,),
    "array": (list,),
    "object": (dict,),
}


@dataclass(frozen=True)
class Param:
    type: str
    description: str = ""
    required: bool = True

    def __post_init__(self):
        if self.type not in _PY_TYPES:
            raise ValueError(f"unknown parameter type {self.type!r}")


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    description: str
    parameters: dict[str, Param]
    effect_class: EffectClass
    # the handler enforces the wall-clock limit itself (e.g. subprocess timeout)
    self_timed: bool = False

    def signature(self) -> str:
        args = ", ".join(f"{n}: {p.type}" + ("" if p.required else "?") for n, p in self.parameters.items())
        return f"{self.name}({args})"

    def json_schema(self) -> dict:
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": {
                    "type": "object",
                    "properties": {n: {"type": p.type, "description": p.description}
                                   for n, p in self.parameters.items()},
                    "required": [n for n, p in self.parameters.items() if p.required],
                },
            },
        }


@dataclass
class ToolInvocation:
    name: str
    arguments: dict[str, Any]
    session_id: str = ""


@dataclass
class ToolResult:
    status: Status
    output: str
    duration_s: float = 0.0
    exit_code: int | None = None
    truncated: bool = False
    original_length: int | None = None

    def render(self) -> str:
        """Text handed back to the model as the tool message."""
        head = "" if self.status is Status.OK else f"[{self.status.value}] "
        tail = f"\n[exit status {self.exit_code}]" if self.exit_code not in (None, 0) else ""
        return head + self.output + tail


class ToolError(Exception):
    """Raised by handlers to report an ERROR result."""


class ToolTimeout(Exception):
    pass


@dataclass
class SessionContext:
    """Per-session state the built-in handlers need."""

    session_id: str
    sandbox: Path
    timeout_s: float = DEFAULT_TIMEOUT_S
    output_cap: int = OUTPUT_CAP
    endpoint: tuple[str, int] | None = None
    workspace: Any = None
    research: Any = None
    summarizer: Callable[[str, str], str] | None = None
    submit: Callable[[str], str] | None = None
    crypto_endpoint: str | None = None
    http: httpx.Client | None = None
    log_path: Path | None = None
    connections: dict[str, "LineConnection"] = field(default_factory=dict)
    submissions: list[tuple[str, str]] = field(default_factory=list)

    def close(self) -> None:
        for conn in self.connections.values():
            conn.close()
        self.connections.clear()


Handler = Callable[..., "str | ToolResult"]


def truncate(text: str, cap: int) -> tuple[str, bool]:
    if len(text) <= cap:
        return text, False
    keep = max(0, cap - len(TRUNCATION_MARKER))
    return text[:keep] + TRUNCATION_MARKER, True


class Toolbox:
    def __init__(self):
        self._tools: dict[str, tuple[ToolDescriptor, Handler]] = {}

    def register(self, descriptor: ToolDescriptor, handler: Handler) -> None:
        if descriptor.name in self._tools:
            raise ValueError(f"tool {descriptor.name!r} is already registered")
        if not descriptor.description.strip():
            raise ValueError(f"tool {descriptor.name!r} needs a description")
        self._tools[descriptor.name] = (descriptor, handler)

    def __contains__(self, name: str) -> bool:
        return name in self._tools

    @property
    def descriptors(self) -> list[ToolDescriptor]:
        return [d for d, _ in self._tools.values()]

    def render(self) -> str:
        lines = ["## Available tools"]
        if not self._tools:
            lines.append("No tools are available in this session.")
            return "\n".join(lines)
        for d in self.descriptors:
            lines.append(f"- {d.signature()} [{d.effect_class.value}]: {d.description}")
        return "\n".join(lines)

    def schemas(self) -> list[dict]:
        return [d.json_schema() for d in self.descriptors]

    def _validate(self, d: ToolDescriptor, args: dict) -> list[str]:
        problems = []
        if not isinstance(args, dict):
            return ["arguments must be an object"]
        for name, p in d.parameters.items():
            if name not in args:
                if p.required:
                    problems.append(f"{name}: missing")
                continue
            v = args[name]
            ok = isinstance(v, _PY_TYPES[p.type]) and not (p.type in ("integer", "number") and isinstance(v, bool))
            if not ok:
                problems.append(f"{name}: expected {p.type}")
        for name in args:
            if name not in d.parameters:
                problems.append(f"{name}: unknown parameter")
        return problems

    def dispatch(self, invocation: ToolInvocation, ctx: SessionContext) -> ToolResult:
        start = time.monotonic()
        result = self._dispatch(invocation, ctx, start)
        result.duration_s = max(result.duration_s, time.monotonic() - start)
        if result.status is Status.TIMEOUT:
            result.duration_s = max(result.duration_s, ctx.timeout_s)
        original = len(result.output)
        result.output, result.truncated = truncate(result.output, ctx.output_cap)
        if result.truncated:
            result.original_length = original
        if ctx.log_path is not None:
            entry = {
                "tool": invocation.name,
                "arguments": invocation.arguments,
                "status": result.status.value,
                "duration_s": round(result.duration_s, 4),
                "exit_code": result.exit_code,
                "truncated": result.truncated,
            }
            with ctx.log_path.open("a") as fh:
                fh.write(json.dumps(entry, sort_keys=True, default=str) + "\n")
        return result

    def _dispatch(self, inv: ToolInvocation, ctx: SessionContext, start: float) -> ToolResult:
        if inv.name not in self._tools:
            return ToolResult(Status.ERROR, f"unknown tool {inv.name!r}")
        descriptor, handler = self._tools[inv.name]
        problems = self._validate(descriptor, inv.arguments)
        if problems:
            return ToolResult(Status.ERROR, f"invalid arguments for {inv.name}: " + "; ".join(problems))

        box: dict[str, Any] = {}

        def target():
            try:
                box["value"] = handler(ctx, **inv.arguments)
            except BaseException as exc:  # reported as data
                box["error"] = exc

        limit = ctx.timeout_s + (1.0 if descriptor.self_timed else 0.0)
        worker = threading.Thread(target=target, name=f"tool-{inv.name}", daemon=True)
        worker.start()
        worker.join(limit)
        if worker.is_alive():
            return ToolResult(Status.TIMEOUT, f"{inv.name} exceeded {ctx.timeout_s:g}s", time.monotonic() - start)
        exc = box.get("error")
        if isinstance(exc, ToolTimeout):
            return ToolResult(Status.TIMEOUT, str(exc), time.monotonic() - start)
        if isinstance(exc, ToolError):
            return ToolResult(Status.ERROR, str(exc))
        if exc is not None:
            logger.exception("tool %s crashed", inv.name, exc_info=exc)
            return ToolResult(Status.ERROR, f"{type(exc).__name__}: {exc}")
        value = box.get("value")
        if isinstance(value, ToolResult):
            return value
        return ToolResult(Status.OK, "" if value is None else str(value))


# --- sandbox confinement ----------------------------------------------------

def confine(sandbox: Path, path: str) -> Path:
    """Resolve ``path`` inside ``sandbox`` or raise ToolError."""
    if not isinstance(path, str) or not path or "\x00" in path:
        raise ToolError("invalid path")
    if os.path.isabs(path) or path.startswith("~"):
        raise ToolError(f"path {path!r} is outside the session sandbox")
    root = sandbox.resolve()
    target = (root / path).resolve()
    if target != root and root not in target.parents:
        raise ToolError(f"path {path!r} is outside the session sandbox")
    return target


# absolute paths and parent-directory hops inside a shell command line
_ABS_PATH = re.compile(r"""(?:^|[\s=<>|;&'"(`,])(?:~|/)(?=[A-Za-z0-9_.~$-])""")
_PARENT = re.compile(r"""(?:^|[\s=<>|;&'"(`,/])\.\.(?=$|[\s/'";|&)`,])""")


def check_command(command: str) -> None:
    if _ABS_PATH.search(command):
        raise ToolError("command references an absolute path; work relative to the sandbox")
    if _PARENT.search(command):
        raise ToolError("command escapes the sandbox with '..'")


# --- built-in handlers ------------------------------------------------------

def read_file(ctx: SessionContext, path: str) -> str:
    target = confine(ctx.sandbox, path)
    if not target.is_file():
        raise ToolError(f"no such file: {path}")
    data = target.read_bytes()
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError:
        return "hex:" + data.hex()


def write_file(ctx: SessionContext, path: str, content: str) -> str:
    target = confine(ctx.sandbox, path)
    if target == ctx.sandbox.resolve():
        raise ToolError("cannot overwrite the sandbox directory")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(content)
    return f"wrote {len(content.encode())} bytes to {path}"


def list_dir(ctx: SessionContext, path: str = ".") -> str:
    target = confine(ctx.sandbox, path)
    if not target.is_dir():
        raise ToolError(f"not a directory: {path}")
    entries = []
    for child in sorted(target.iterdir()):
        entries.append(child.name + ("/" if child.is_dir() else f" ({child.stat().st_size} bytes)"))
    return "\n".join(entries) or "(empty)"


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except ProcessLookupError:
        pass
    proc.wait()


def run_command(ctx: SessionContext, command: str) -> ToolResult:
    check_command(command)
    sandbox = ctx.sandbox.resolve()
    tmp = sandbox / ".tmp"
    tmp.mkdir(exist_ok=True)
    env = {
        "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
        "HOME": str(sandbox),
        "TMPDIR": str(tmp),
        "LANG": "C.UTF-8",
        "PYTHONDONTWRITEBYTECODE": "1",
    }
    if ctx.endpoint is not None:
        env["CHALLENGE_HOST"], env["CHALLENGE_PORT"] = ctx.endpoint[0], str(ctx.endpoint[1])
    start = time.monotonic()
    proc = subprocess.Popen(
        ["/bin/sh", "-c", command], cwd=sandbox, env=env,
        stdin=subprocess.DEVNULL, stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
        start_new_session=True,
    )
    try:
        out, _ = proc.communicate(timeout=ctx.timeout_s)
    except subprocess.TimeoutExpired:
        _kill_group(proc)
        raise ToolTimeout(f"command exceeded {ctx.timeout_s:g}s and was killed") from None
    return ToolResult(Status.OK, out.decode("utf-8", "replace"), time.monotonic() - start,
                      exit_code=proc.returncode)


class LineConnection:
    """Newline-delimited UTF-8 over TCP."""

    def __init__(self, host: str, port: int, timeout_s: float):
        self.sock = socket.create_connection((host, port), timeout=timeout_s)
        self.reader = self.sock.makefile("rb")
        self.peer = f"{host}:{port}"

    def send_line(self, text: str) -> None:
        self.sock.sendall(text.encode("utf-8") + b"\n")

    def recv_line(self, timeout_s: float) -> str | None:
        self.sock.settimeout(timeout_s)
        try:
            raw = self.reader.readline()
        except (socket.timeout, TimeoutError):
            return None
        if not raw:
            return None
        return raw.decode("utf-8", "replace").rstrip("\r\n")

    def close(self) -> None:
        try:
            self.reader.close()
            self.sock.close()
        except OSError:
            pass


def remote_connect(ctx: SessionContext, host: str = "", port: int = 0) -> str:
    if not host or not port:
        if ctx.endpoint is None:
            raise ToolError("no host/port given and the challenge has no service")
        host, port = host or ctx.endpoint[0], port or ctx.endpoint[1]
    try:
        conn = LineConnection(host, port, RECV_TIMEOUT_S)
    except OSError as exc:
        raise ToolError(f"NETWORK error: {exc}") from None
    conn_id = f"c{len(ctx.connections)}"
    ctx.connections[conn_id] = conn
    return f"{conn_id} connected to {conn.peer}"


def _conn(ctx: SessionContext, conn: str) -> LineConnection:
    if conn not in ctx.connections:
        raise ToolError(f"no open connection {conn!r}")
    return ctx.connections[conn]


def remote_send(ctx: SessionContext, data: str, conn: str = "c0") -> str:
    try:
        _conn(ctx, conn).send_line(data)
    except OSError as exc:
        raise ToolError(f"NETWORK error: {exc}") from None
    return f"sent {len(data)} chars"


def remote_recv(ctx: SessionContext, conn: str = "c0", lines: int = 1, timeout: float = RECV_TIMEOUT_S) -> str:
    c = _conn(ctx, conn)
    got = []
    for _ in range(max(1, lines)):
        line = c.recv_line(min(timeout, ctx.timeout_s))
        if line is None:
            break
        got.append(line)
    if not got:
        return "(no data)"
    return "\n".join(got)


def remote_close(ctx: SessionContext, conn: str = "c0") -> str:
    _conn(ctx, conn).close()
    del ctx.connections[conn]
    return f"{conn} closed"


def deep_research(ctx: SessionContext, topics: list, channels: list | None = None) -> str:
    if ctx.research is None:
        raise ToolError("deep research is not configured")
    if not topics or not all(isinstance(t, str) for t in topics):
        raise ToolError("topics must be a non-empty list of strings")
    kwargs = {}
    if channels:
        kwargs["channels"] = tuple(channels)
    try:
        report = ctx.research.run(topics, **kwargs)
    except ValueError as exc:
        raise ToolError(str(exc)) from None
    return report.to_json(sort_keys=True)


def workspace_ingest(ctx: SessionContext, path: str, title: str = "", origin: str = "") -> str:
    if ctx.workspace is None:
        raise ToolError("no workspace attached")
    target = confine(ctx.sandbox, path)
    if not target.is_file():
        raise ToolError(f"no such file: {path}")
    raw = target.read_bytes()
    if not raw:
        raise ToolError(f"{path} is empty")
    doc_id = ctx.workspace.ingest(raw, origin or path, title=title or target.name)
    if hasattr(ctx.workspace, "summarize"):
        ctx.workspace.summarize(doc_id, ctx.summarizer)
        return f"doc_id {doc_id} (summary ready)"
    return f"doc_id {doc_id} (queued; summary after this round)"


def workspace_lookup(ctx: SessionContext, doc_id: str, kind: str = "SUMMARY") -> str:
    if ctx.workspace is None:
        raise ToolError("no workspace attached")
    record = ctx.workspace.lookup(doc_id)
    if record is None:
        raise ToolError(f"unknown doc_id {doc_id!r}")
    kind = kind.upper()
    if kind == "SUMMARY" and "SUMMARY" not in record.representations:
        kind = "TEXT"
    if kind == "RAW" or kind not in record.representations:
        raise ToolError(f"{doc_id} has no {kind} representation; have {sorted(record.representations)}")
    body = ctx.workspace.read(doc_id, kind)
    meta = json.dumps(record.metadata, sort_keys=True)
    return f"{meta}\n--- {kind} ---\n{body}"


def crypto_compute(ctx: SessionContext, program: str, language: str = "sage", stdin: str = "") -> str:
    if not ctx.crypto_endpoint:
        raise ToolError("endpoint not configured")
    client = ctx.http or httpx.Client(timeout=ctx.timeout_s)
    try:
        resp = client.post(ctx.crypto_endpoint, json={"language": language, "program": program, "stdin": stdin})
        resp.raise_for_status()
        data = resp.json()
    except (httpx.HTTPError, ValueError) as exc:
        raise ToolError(f"NETWORK error: {exc}") from None
    out = data.get("stdout", "")
    if data.get("stderr"):
        out += "\n[stderr]\n" + data["stderr"]
    return ToolResult(Status.OK, out, exit_code=data.get("exit_status"))


def submit_flag(ctx: SessionContext, flag: str) -> str:
    if ctx.submit is None:
        raise ToolError("flag submission is not available")
    verdict = ctx.submit(flag)
    ctx.submissions.append((flag, verdict))
    return verdict


_S, _I, _A = "string", "integer", "array"

BUILTINS: list[tuple[ToolDescriptor, Handler]] = [
    (ToolDescriptor("read_file", "Read a file from the sandbox (hex-encoded if binary).",
                    {"path": Param(_S, "sandbox-relative path")}, EffectClass.READ_ONLY), read_file),
    (ToolDescriptor("write_file", "Create or overwrite a text file in the sandbox.",
                    {"path": Param(_S), "content": Param(_S)}, EffectClass.WRITES_SESSION_DIR), write_file),
    (ToolDescriptor("list_dir", "List a sandbox directory.",
                    {"path": Param(_S, required=False)}, EffectClass.READ_ONLY), list_dir),
    (ToolDescriptor("run_command", "Run a shell command in the sandbox (sh -c; python3, git, uv on PATH).",
                    {"command": Param(_S)}, EffectClass.EXECUTES, self_timed=True), run_command),
    (ToolDescriptor("remote_connect", "Open a line-oriented TCP connection; defaults to the challenge service.",
                    {"host": Param(_S, required=False), "port": Param(_I, required=False)},
                    EffectClass.NETWORK), remote_connect),
    (ToolDescriptor("remote_send", "Send one line on an open connection.",
                    {"data": Param(_S), "conn": Param(_S, required=False)}, EffectClass.NETWORK), remote_send),
    (ToolDescriptor("remote_recv", "Receive up to `lines` lines from an open connection.",
                    {"conn": Param(_S, required=False), "lines": Param(_I, required=False),
                     "timeout": Param("number", required=False)}, EffectClass.NETWORK), remote_recv),
    (ToolDescriptor("remote_close", "Close an open connection.",
                    {"conn": Param(_S, required=False)}, EffectClass.NETWORK), remote_close),
    (ToolDescriptor("deep_research", "Search the web, arXiv/ePrint and GitHub for technical topics; "
                    "returns a JSON report with snapshot references.",
                    {"topics": Param(_A), "channels": Param(_A, required=False)}, EffectClass.NETWORK),
     deep_research),
    (ToolDescriptor("workspace_ingest", "Store a sandbox file in the persistent workspace; returns its doc_id.",
                    {"path": Param(_S), "title": Param(_S, required=False), "origin": Param(_S, required=False)},
                    EffectClass.WRITES_SESSION_DIR), workspace_ingest),
    (ToolDescriptor("workspace_lookup", "Fetch a stored document by doc_id (SUMMARY, TEXT or MARKDOWN).",
                    {"doc_id": Param(_S), "kind": Param(_S, required=False)}, EffectClass.READ_ONLY),
     workspace_lookup),
    (ToolDescriptor("crypto_compute", "Run a SageMath (or Python) program on the crypto compute backend.",
                    {"program": Param(_S), "language": Param(_S, required=False), "stdin": Param(_S, required=False)},
                    EffectClass.NETWORK), crypto_compute),
    (ToolDescriptor("submit_flag", "Submit a flag for arbitration.",
                    {"flag": Param(_S)}, EffectClass.NETWORK), submit_flag),
]


def builtin_toolbox(exclude: tuple[str, ...] = ()) -> Toolbox:
    box = Toolbox()
    for descriptor, handler in BUILTINS:
        if descriptor.name not in exclude:
            box.register(descriptor, handler)
    return box
