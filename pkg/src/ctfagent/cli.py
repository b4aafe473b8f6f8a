"""Command-line entry point.

Every command validates the configuration before touching the network or a
model. Failures print one JSON line to stderr and exit nonzero::

    {"error": "config", "message": "...", "violations": [...]}
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

from ctfagent.config import ConfigError, RunConfig

logger = logging.getLogger("ctfagent")

EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_RUNTIME, **extra):
        super().__init__(message)
        self.kind = kind
        self.code = code
        self.extra = extra


def packaged(*parts: str) -> Path:
    return Path(str(resources.files("ctfagent").joinpath("fixtures", *parts)))


def default_config_path() -> Path:
    return Path(os.environ.get("CTFAGENT_CONFIG") or packaged("config.json"))


# -- setup helpers --

def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config, validate=False)
    if getattr(args, "mock_script", None):
        cfg.data["offline"] = {"mock_script": str(Path(args.mock_script).resolve())}
    problems = cfg.violations()
    if problems:
        raise ConfigError(problems)
    return cfg


def build_solver(cfg: RunConfig, arbiter=None, *, sessions_root: Path | None = None):
    from ctfagent.governance import default_bundle
    from ctfagent.orchestrator import Solver
    from ctfagent.workspace import Workspace

    provider = cfg.build_provider()
    bundle = default_bundle()
    return Solver(
        provider,
        sessions_root=sessions_root or cfg.output_path("sessions_root"),
        bundle=bundle,
        router=cfg.build_router(provider, bundle.difficulty_rubric),
        arbiter=arbiter,
        workspace=Workspace(cfg.output_path("workspace")),
        research=cfg.build_research(provider),
        crypto_endpoint=cfg.data.get("crypto_endpoint"),
        tool_timeout_s=cfg.data["tool_timeout_s"],
    )


def scan_root(root: str):
    from ctfagent.harness import scan

    try:
        return scan(root)
    except NotADirectoryError as exc:
        raise CliError("scan", str(exc)) from None


# -- rendering --

def _table(headers: list[str], rows: list[list]) -> str:
    cells = [[str(c) for c in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(headers)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*headers), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*r) for r in cells]
    return "\n".join(lines)


def render_report(data: dict) -> str:
    if "rows" in data:
        rows = [[r["id"], r["outcome"], r["turns"], f"{r['seconds']:.2f}", f"{r['cost']:.6f}"] for r in data["rows"]]
        agg = data["aggregate"]
        prof = data.get("profile", {})
        head = f"profile {prof.get('name')} (budget {prof.get('budget')}, mode {prof.get('mode')})"
        foot = (f"solved {agg['solved']}/{agg['total']} ({agg['solve_rate']:.0%}), "
                f"mean turns {agg['mean_turns']:.1f}, total cost {agg['total_cost']:.6f}")
        return "\n".join([head, _table(["id", "outcome", "turns", "seconds", "cost"], rows), foot])
    fields = ["session_id", "challenge_id", "mode", "outcome", "flag", "turns", "turn_budget",
              "wall_time_s", "total_cost", "stage"]
    rows = [[k, data.get(k)] for k in fields if k in data]
    if data.get("routing_tiers"):
        rows.append(["routing_tiers", ", ".join(f"{k}={v}" for k, v in sorted(data["routing_tiers"].items()))])
    ht = data.get("heavythink")
    if ht:
        rows.append(["heavythink", f"N={ht['workers']} M={ht['iterations']} "
                                   f"worker turns={ht['total_worker_turns']} rounds={len(ht['rounds'])}"])
    return _table(["field", "value"], rows)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# -- commands --

def cmd_scan(args) -> int:
    index = scan_root(args.root)
    _emit({
        "challenges": [{"id": c.id, "name": c.name, "category": c.category, "files": list(c.files),
                        "service": c.service is not None, "points": c.points} for c in index],
        "diagnostics": index.diagnostics,
    })
    return 0


def cmd_serve(args) -> int:
    from ctfagent.harness import Arbiter, ArbitrationServer, ServiceHost

    index = scan_root(args.root)
    arbiter = Arbiter(index)
    api = ArbitrationServer(arbiter, port=args.port).start()
    with ServiceHost() as host:
        for c in index:
            if c.service:
                host.schedule(c)
        _emit({"arbitration": api.url, "services": {k: list(v) for k, v in host.live_view().items()},
               "diagnostics": index.diagnostics})
        sys.stdout.flush()
        try:
            if args.duration is not None:
                time.sleep(args.duration)
            else:
                while True:
                    time.sleep(3600)
        except KeyboardInterrupt:
            pass
        finally:
            api.stop()
    return 0


def _ht_config(args):
    from ctfagent.orchestrator import HeavyThinkConfig

    try:
        return HeavyThinkConfig(workers=args.workers, iterations=args.iters)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None


def cmd_run(args) -> int:
    from ctfagent.harness import ServiceHost
    from ctfagent.plotting import plot_session_routing

    if args.budget < 1:
        raise ConfigError(["--budget must be positive"])
    ht = _ht_config(args) if args.mode == "heavythink" else None
    cfg = load_config(args)
    index = scan_root(args.root)
    challenge = index.get(args.challenge_id)
    if challenge is None:
        raise CliError("unknown_challenge", f"{args.challenge_id!r} not found under {args.root}")
    solver = build_solver(cfg)
    with ServiceHost() as host:
        endpoint = host.schedule(challenge) if challenge.service else None
        if ht is not None:
            s = solver.run_heavythink(challenge, ht, args.budget, endpoint=endpoint)
        else:
            s = solver.run_autonomous(challenge, args.budget, endpoint=endpoint)
    plot_session_routing(s.directory)
    report = json.loads((s.directory / "report.json").read_text())
    print(render_report(report))
    print(f"session directory: {s.directory}")
    return 0


def cmd_bench(args) -> int:
    from ctfagent.harness.bench import run_benchmark
    from ctfagent.plotting import plot_bench

    cfg = load_config(args)
    profile = cfg.profile(args.profile)
    index = scan_root(args.root)
    if len(index) == 0:
        raise CliError("empty_index", f"no challenges found under {args.root}")
    out = Path(args.out) if args.out else cfg.output_path("sessions_root").parent / "bench" / profile.name
    solver = build_solver(cfg, sessions_root=out / "sessions")
    report = run_benchmark(index, solver, profile, out)
    plot_bench(report, out / "bench_report.png")
    print(render_report(report))
    print(f"report: {out / 'bench_report.json'}")
    return 0


def cmd_research(args) -> int:
    cfg = load_config(args)
    pipeline = cfg.build_research(cfg.build_provider())
    if pipeline is None:
        raise CliError("research", "no research channels configured (offline config without research.fixture)")
    topics = [t.strip() for t in args.topics.split(";") if t.strip()]
    if not topics:
        raise ConfigError(["at least one topic is required"])
    kwargs = {"channels": tuple(args.channels.split(","))} if args.channels else {}
    try:
        report = pipeline.run(topics, **kwargs)
    except ValueError as exc:
        raise CliError("research", str(exc)) from None
    print(report.to_json(indent=2, sort_keys=True))
    return 0


def cmd_ingest(args) -> int:
    from ctfagent.workspace import Workspace

    cfg = load_config(args)
    ws = Workspace(cfg.output_path("workspace"))
    target = args.target
    if target.startswith(("http://", "https://")):
        import httpx

        try:
            resp = httpx.get(target, timeout=30, follow_redirects=True)
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise CliError("network", f"cannot fetch {target}: {exc}") from None
        raw = resp.content
    else:
        path = Path(target)
        if not path.is_file():
            raise CliError("not_found", f"no such file: {target}")
        raw = path.read_bytes()
    if not raw:
        raise CliError("empty", f"{target} is empty")
    doc_id = ws.ingest(raw, target, title=args.title or Path(target).name)
    ws.summarize(doc_id)
    _emit({"doc_id": doc_id, **ws.lookup(doc_id).to_dict()})
    return 0


def cmd_report(args) -> int:
    p = Path(args.path)
    for candidate in (p, p / "report.json", p / "bench_report.json"):
        if candidate.is_file():
            try:
                data = json.loads(candidate.read_text())
            except json.JSONDecodeError as exc:
                raise CliError("report", f"{candidate}: {exc}") from None
            print(render_report(data))
            return 0
    raise CliError("not_found", f"no report.json or bench_report.json at {p}")


# -- parser --

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctfagent", description="LLM agent orchestration for CTF crypto challenges")
    parser.add_argument("--config", default=None, help="run config JSON (default: $CTFAGENT_CONFIG or the packaged offline config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="index challenge directories")
    p.add_argument("root")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("serve", help="host challenge services and the arbitration API")
    p.add_argument("root")
    p.add_argument("--port", type=int, default=0, help="arbitration API port (default: ephemeral)")
    p.add_argument("--duration", type=float, default=None, help="stop after this many seconds")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("run", help="solve one challenge")
    p.add_argument("challenge_id")
    p.add_argument("--root", default=str(packaged("corpus")), help="challenge root (default: packaged corpus)")
    p.add_argument("--mode", choices=("auto", "heavythink"), default="auto")
    p.add_argument("--workers", type=int, default=3, help="HeavyThink workers per round (N)")
    p.add_argument("--iters", type=int, default=2, help="HeavyThink rounds (M)")
    p.add_argument("--budget", type=int, default=30, help="turn budget (per worker in HeavyThink)")
    p.add_argument("--mock-script", default=None, help="override the offline mock script")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="run a benchmark profile over a challenge root")
    p.add_argument("root")
    p.add_argument("--profile", default="intercode30")
    p.add_argument("--out", default=None, help="output directory for bench_report.json")
    p.add_argument("--mock-script", default=None, help="override the offline mock script")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("research", help="run the deep-research pipeline")
    p.add_argument("topics", help="topics separated by ';'")
    p.add_argument("--channels", default=None, help="comma-separated subset of WEB,ACADEMIC,CODE")
    p.set_defaults(func=cmd_research)

    p = sub.add_parser("ingest", help="store a file or URL in the persistent workspace")
    p.add_argument("target")
    p.add_argument("--title", default="")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("report", help="render a session or bench report")
    p.add_argument("path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.config = args.config or str(default_config_path())
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        err = {"error": "config", "message": str(exc), "violations": exc.violations}
        code = EXIT_CONFIG
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc), **exc.extra}
        code = exc.code
    except Exception as exc:
        logger.debug("unhandled error", exc_info=True)
        err = {"error": "internal", "message": f"{type(exc).__name__}: {exc}"}
        code = EXIT_RUNTIME
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
