"""Run configuration: one JSON document with ``${VAR}`` interpolation.

Interpolation (``${VAR}`` or ``${VAR:-default}``) is applied when a value
is used, never written back, so a loaded config re-serializes to the
document it came from. Relative input paths resolve against the config
file's directory; output directories resolve against the working directory.

::

    {
      "models": [{"model_id", "tier": "MID"|"TOP", "input_rate", "output_rate",
                  "context_limit", "base_url", "api_key_env"}],
      "offline": {"mock_script": "scripts/all.json"} | null,
      "provider": {"max_attempts": 3, "backoff_s": 1.0},
      "routing": {"grader_model": null, "heuristics": {...} | null},
      "research": {"blocklist": "blocklist.json" | null, "fixture": "research.json" | null,
                   "per_channel_cap": 5, "timeout_s": 20},
      "workspace": "workspace",
      "sessions_root": "sessions",
      "crypto_endpoint": null,
      "tool_timeout_s": 30,
      "profiles": [{"name", "budget", "mode", "workers", "iterations"}]
    }
"""

from __future__ import annotations

import copy
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from ctfagent.harness.bench import PROFILES, BenchmarkProfile

_VAR = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")

DEFAULTS = {
    "models": [],
    "offline": None,
    "provider": {"max_attempts": 3, "backoff_s": 1.0},
    "routing": {"grader_model": None, "heuristics": None},
    "research": {"blocklist": None, "fixture": None, "per_channel_cap": 5, "timeout_s": 20},
    "workspace": "workspace",
    "sessions_root": "sessions",
    "crypto_endpoint": None,
    "tool_timeout_s": 30,
    "profiles": [p.to_dict() for p in PROFILES.values()],
}


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


def interpolate(value: str, env=None) -> str:
    env = os.environ if env is None else env

    def sub(m):
        if m.group(1) in env:
            return env[m.group(1)]
        if m.group(2) is not None:
            return m.group(2)
        raise KeyError(m.group(1))
    return _VAR.sub(sub, value)


def _merge(defaults: dict, doc: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in doc.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    data: dict
    base_dir: Path = field(default_factory=Path.cwd)

    # -- loading --

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str | Path | None = None, *, validate: bool = True) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError(["config must be a JSON object"])
        cfg = cls(_merge(DEFAULTS, doc), Path(base_dir) if base_dir else Path.cwd())
        if validate:
            problems = cfg.violations()
            if problems:
                raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path: str | Path, *, validate: bool = True) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError([f"cannot read config {path}: {exc.strerror}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON: {exc}"]) from None
        return cls.from_dict(doc, path.resolve().parent, validate=validate)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    # -- accessors --

    def path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(interpolate(value)).expanduser()
        return p if p.is_absolute() else self.base_dir / p

    def output_path(self, key: str) -> Path:
        """Output directories resolve against the working directory, not the config file."""
        return Path(interpolate(self.data[key])).expanduser().resolve()

    @property
    def offline(self) -> bool:
        return bool(self.data.get("offline"))

    @property
    def mock_script(self) -> Path | None:
        off = self.data.get("offline") or {}
        return self.path(off.get("mock_script"))

    def profile(self, name: str) -> BenchmarkProfile:
        for p in self.data["profiles"]:
            if p.get("name") == name:
                return BenchmarkProfile.from_dict(p)
        raise ConfigError([f"unknown profile {name!r}; known: {', '.join(p['name'] for p in self.data['profiles'])}"])

    # -- validation --

    def violations(self, env=None) -> list[str]:
        """Every problem with the config; empty when it is usable."""
        env = os.environ if env is None else env
        d = self.data
        out: list[str] = []
        known = set(DEFAULTS)
        out += [f"unknown key {k!r}" for k in sorted(set(d) - known)]

        models = d.get("models")
        tiers = set()
        if not isinstance(models, list) or not models:
            out.append("models: at least one model entry is required")
            models = []
        ids = set()
        for i, m in enumerate(models):
            where = f"models[{i}]"
            if not isinstance(m, dict):
                out.append(f"{where}: must be an object")
                continue
            if not m.get("model_id"):
                out.append(f"{where}: model_id is required")
            elif m["model_id"] in ids:
                out.append(f"{where}: duplicate model_id {m['model_id']!r}")
            ids.add(m.get("model_id"))
            if m.get("tier") not in ("MID", "TOP"):
                out.append(f"{where}: tier must be MID or TOP")
            else:
                tiers.add(m["tier"])
            for rate in ("input_rate", "output_rate"):
                v = m.get(rate, 0)
                if isinstance(v, bool) or not isinstance(v, (int, float, str)):
                    out.append(f"{where}: {rate} must be a number")
                else:
                    try:
                        if float(v) < 0:
                            out.append(f"{where}: {rate} must be non-negative")
                    except ValueError:
                        out.append(f"{where}: {rate} must be a number")
        for t in ("MID", "TOP"):
            if models and t not in tiers:
                out.append(f"models: no {t}-tier model registered")

        offline = d.get("offline")
        live = bool(models) and all(isinstance(m, dict) and m.get("base_url") for m in models)
        if offline and live:
            out.append("exactly one of live credentials or offline.mock_script may be configured, not both")
        elif offline:
            if not isinstance(offline, dict) or not offline.get("mock_script"):
                out.append("offline: mock_script is required")
            elif not self.mock_script.is_file():
                out.append(f"offline.mock_script: {self.mock_script} does not exist")
        elif not live:
            out.append("no backend: configure offline.mock_script or base_url for every model")
        else:
            for m in models:
                key = m.get("api_key_env")
                if key and key not in env:
                    out.append(f"models: credential variable {key} for {m['model_id']} is not set")

        strings = [m.get("base_url") for m in models if isinstance(m, dict)]
        strings += [d.get("workspace"), d.get("sessions_root")]
        for value in strings:
            if isinstance(value, str):
                try:
                    interpolate(value, env)
                except KeyError as exc:
                    out.append(f"environment variable {exc.args[0]} referenced but not set")
        for key in ("workspace", "sessions_root"):
            if not isinstance(d.get(key), str) or not d[key]:
                out.append(f"{key} must be a path")

        prov = d.get("provider", {})
        if not isinstance(prov.get("max_attempts"), int) or prov["max_attempts"] < 1:
            out.append("provider.max_attempts must be a positive integer")
        if not isinstance(prov.get("backoff_s"), (int, float)) or prov["backoff_s"] < 0:
            out.append("provider.backoff_s must be non-negative")

        grader = d["routing"].get("grader_model")
        if grader is not None and grader not in ids:
            out.append(f"routing.grader_model {grader!r} is not a registered model")
        if d["routing"].get("heuristics") is not None:
            from ctfagent.routing import HeuristicTable
            try:
                HeuristicTable.from_dict(d["routing"]["heuristics"])
            except (KeyError, TypeError, ValueError) as exc:
                out.append(f"routing.heuristics: {exc}")

        res = d["research"]
        for key in ("blocklist", "fixture"):
            if res.get(key) is not None and not self.path(res[key]).is_file():
                out.append(f"research.{key}: {self.path(res[key])} does not exist")
        if not isinstance(res.get("per_channel_cap"), int) or res["per_channel_cap"] < 1:
            out.append("research.per_channel_cap must be a positive integer")
        if not isinstance(res.get("timeout_s"), (int, float)) or res["timeout_s"] <= 0:
            out.append("research.timeout_s must be positive")
        if not isinstance(d.get("tool_timeout_s"), (int, float)) or d["tool_timeout_s"] <= 0:
            out.append("tool_timeout_s must be positive")

        names = set()
        for i, p in enumerate(d.get("profiles") or []):
            try:
                prof = BenchmarkProfile.from_dict(p)
            except (TypeError, ValueError) as exc:
                out.append(f"profiles[{i}]: {exc}")
                continue
            if prof.name in names:
                out.append(f"profiles[{i}]: duplicate profile {prof.name!r}")
            names.add(prof.name)
        return out

    # -- construction --

    def build_provider(self):
        from ctfagent.provider import HttpBackend, MockBackend, ModelRegistry, ModelSpec, Provider

        specs = []
        for m in self.data["models"]:
            m = dict(m)
            if m.get("base_url"):
                m["base_url"] = interpolate(m["base_url"])
            specs.append(ModelSpec.from_dict(m))
        registry = ModelRegistry(specs)
        prov = self.data["provider"]
        if self.offline:
            return Provider(registry, MockBackend.from_file(self.mock_script),
                            max_attempts=prov["max_attempts"], backoff_s=prov["backoff_s"])
        return Provider(registry, backends={s.model_id: HttpBackend(s) for s in specs},
                        max_attempts=prov["max_attempts"], backoff_s=prov["backoff_s"])

    def build_research(self, provider=None):
        from ctfagent import research as r

        res = self.data["research"]
        blocklist = r.load_blocklist(self.path(res["blocklist"])) if res.get("blocklist") else ()
        kwargs = {"per_channel_cap": res["per_channel_cap"], "timeout_s": res["timeout_s"]}
        if res.get("fixture"):
            doc = json.loads(self.path(res["fixture"]).read_text())
            return r.fixture_pipeline(doc, blocklist=blocklist, **kwargs)
        if self.offline:
            return None
        summarizer = r.model_summarizer(provider) if provider is not None else r.extractive_summarizer
        return r.DeepResearch(r.live_clients(), r.into_md(), r.jina_reader(), blocklist=blocklist,
                              summarizer=summarizer, **kwargs)

    def build_router(self, provider, rubric: str):
        from ctfagent.routing import DEFAULT_HEURISTICS, HeuristicTable, Router

        h = self.data["routing"].get("heuristics")
        table = HeuristicTable.from_dict(h) if h else DEFAULT_HEURISTICS
        return Router(provider, rubric, table=table, grader_model_id=self.data["routing"].get("grader_model"))
