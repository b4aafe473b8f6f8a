"""Figures for bench and session reports (written next to the JSON)."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

OUTCOME_COLORS = {
    "SOLVED": "#2a9d8f",
    "BUDGET_EXHAUSTED": "#e9c46a",
    "AGENT_GAVE_UP": "#f4a261",
    "ERRORED": "#e76f51",
}


def plot_bench(report: dict, out_path: str | Path) -> Path:
    rows = report["rows"]
    budget = report.get("profile", {}).get("budget")
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(rows) + 2), 3.5))
    ids = [r["id"] for r in rows]
    ax.bar(ids, [r["turns"] for r in rows], color=[OUTCOME_COLORS.get(r["outcome"], "grey") for r in rows])
    if budget:
        ax.axhline(budget, color="black", lw=0.8, ls="--", label=f"budget {budget}")
        ax.legend(loc="upper right", fontsize=8)
    agg = report.get("aggregate", {})
    ax.set_title(f"{report.get('profile', {}).get('name', 'bench')}: solved {agg.get('solved')}/{agg.get('total')}")
    ax.set_ylabel("turns")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_session_routing(session_dir: str | Path, out_path: str | Path | None = None) -> Path | None:
    """Tier per turn, marked by where the difficulty rating came from."""
    session_dir = Path(session_dir)
    log = session_dir / "routing.jsonl"
    records = [json.loads(line) for line in log.read_text().splitlines()] if log.exists() else []
    if not records:
        return None
    fig, ax = plt.subplots(figsize=(6, 2.5))
    level = [int(r["level"][1]) for r in records]
    ax.step(range(1, len(level) + 1), level, where="mid", color="#264653")
    markers = {"SELF_ASSESSMENT": "o", "GRADER_AGENT": "s", "HEURISTIC": "x"}
    for source, marker in markers.items():
        pts = [(i + 1, lv) for i, (lv, r) in enumerate(zip(level, records)) if r["source"] == source]
        if pts:
            ax.scatter(*zip(*pts), marker=marker, label=source.lower(), zorder=3)
    ax.axhspan(2.5, 5.5, color="#e76f51", alpha=0.1, label="top tier")
    ax.set_ylim(0.5, 5.5)
    ax.set_yticks(range(1, 6), [f"L{i}" for i in range(1, 6)])
    ax.set_xlabel("model call")
    ax.legend(fontsize=7, loc="upper left", ncol=2)
    fig.tight_layout()
    out_path = Path(out_path) if out_path else session_dir / "routing.png"
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
