"""Persistent, content-addressed knowledge store.

Layout under the workspace root::

    index.json                  unified metadata index (format_version, version, entries)
    docs/<doc_id>/raw.bin       original bytes
    docs/<doc_id>/text.txt      plain text (empty while text_status == "pending")
    docs/<doc_id>/doc.md        Markdown, when derivable
    docs/<doc_id>/summary.md    dense summary, after summarize()

A document directory is fully written before the index references it, and
the index is replaced atomically, so a crash never leaves an indexed doc_id
without its files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import shutil
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from filelock import FileLock

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DOC_ID_HEX = 16
REPRESENTATION_FILES = {
    "RAW": "raw.bin",
    "TEXT": "text.txt",
    "MARKDOWN": "doc.md",
    "SUMMARY": "summary.md",
}
SUMMARY_SENTENCES = 5

# Returns (text, markdown-or-None) for bytes that are not plain UTF-8.
TextConverter = Callable[[bytes, str], "tuple[str, str | None]"]
Summarizer = Callable[[str, str], str]


class WorkspaceError(Exception):
    pass


def doc_id_for(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()[:DOC_ID_HEX]


@dataclass
class DocRecord:
    doc_id: str
    origin: str
    representations: dict[str, str]  # kind -> path relative to the workspace root
    title: str = ""
    channel: str = ""
    ingested_at: float = 0.0
    byte_size: int = 0
    paper_like: bool = False
    text_status: str = "ready"  # "ready" | "pending"
    extra: dict = field(default_factory=dict)

    @property
    def metadata(self) -> dict:
        return {
            "title": self.title,
            "channel": self.channel,
            "ingested_at": self.ingested_at,
            "byte_size": self.byte_size,
            "paper_like": self.paper_like,
            "origin": self.origin,
            "text_status": self.text_status,
            **self.extra,
        }

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "origin": self.origin,
            "representations": dict(self.representations),
            "title": self.title,
            "channel": self.channel,
            "ingested_at": self.ingested_at,
            "byte_size": self.byte_size,
            "paper_like": self.paper_like,
            "text_status": self.text_status,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DocRecord":
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})


def _decode_text(raw: bytes, origin: str) -> tuple[str, str | None] | None:
    if raw.startswith(b"%PDF"):
        return None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        return None
    if "\x00" in text:
        return None
    is_md = origin.lower().endswith((".md", ".markdown")) or bool(re.search(r"^#{1,6} ", text, re.M))
    return text, (text if is_md else None)


def extractive_summary(text: str, title: str = "") -> str:
    flat = " ".join(text.split())
    sentences = re.split(r"(?<=[.!?])\s+", flat) if flat else []
    head = " ".join(sentences[:SUMMARY_SENTENCES])
    parts = [f"# {title}" if title else "# Summary", "", head or "(no text)"]
    return "\n".join(parts) + "\n"


class Workspace:
    def __init__(self, root: str | Path, *, converter: TextConverter | None = None):
        self.root = Path(root)
        self.docs_dir = self.root / "docs"
        self.index_path = self.root / "index.json"
        self.converter = converter
        self.docs_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._flock = FileLock(str(self.root / ".lock"))
        if not self.index_path.exists():
            self._write_index({"format_version": FORMAT_VERSION, "version": 0, "entries": {}})

    # -- index io --

    def _read_index(self) -> dict:
        data = json.loads(self.index_path.read_text())
        if data.get("format_version") != FORMAT_VERSION:
            raise WorkspaceError(f"unsupported index format {data.get('format_version')!r}")
        return data

    def _write_index(self, data: dict) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".index.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(data, fh, indent=2, sort_keys=True)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.index_path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise

    def _commit(self, data: dict) -> None:
        data["version"] += 1
        self._write_index(data)

    @property
    def version(self) -> int:
        return self._read_index()["version"]

    # -- operations --

    def ingest(self, raw: bytes, origin: str = "", *, title: str = "", channel: str = "",
               paper_like: bool | None = None, extra: dict | None = None) -> str:
        if not raw:
            raise ValueError("cannot ingest empty content")
        doc_id = doc_id_for(raw)
        with self._lock, self._flock:
            index = self._read_index()
            if doc_id in index["entries"]:
                return doc_id
            final = self.docs_dir / doc_id
            if final.exists():
                # left behind by an ingest that died before committing the index
                shutil.rmtree(final)
            staging = Path(tempfile.mkdtemp(dir=self.docs_dir, prefix=f".{doc_id}."))
            try:
                reps = self._write_representations(staging, raw, origin)
                os.replace(staging, final)
            except BaseException:
                shutil.rmtree(staging, ignore_errors=True)
                raise
            text_status = "pending" if "_pending" in reps else "ready"
            reps.pop("_pending", None)
            record = DocRecord(
                doc_id=doc_id,
                origin=origin,
                representations={k: f"docs/{doc_id}/{v}" for k, v in reps.items()},
                title=title,
                channel=channel,
                ingested_at=time.time(),
                byte_size=len(raw),
                paper_like=raw.startswith(b"%PDF") if paper_like is None else paper_like,
                text_status=text_status,
                extra=dict(extra or {}),
            )
            index["entries"][doc_id] = record.to_dict()
            self._commit(index)
        logger.info("ingested %s (%d bytes) from %s", doc_id, len(raw), origin or "-")
        return doc_id

    def _write_representations(self, d: Path, raw: bytes, origin: str) -> dict[str, str]:
        reps = {"RAW": REPRESENTATION_FILES["RAW"], "TEXT": REPRESENTATION_FILES["TEXT"]}
        (d / "raw.bin").write_bytes(raw)
        derived = _decode_text(raw, origin)
        if derived is None and self.converter is not None:
            try:
                derived = self.converter(raw, origin)
            except Exception as exc:
                logger.warning("text conversion failed for %s: %s", origin, exc)
        if derived is None:
            (d / "text.txt").write_text("")
            reps["_pending"] = ""
            return reps
        text, markdown = derived
        (d / "text.txt").write_text(text)
        if markdown is not None:
            (d / "doc.md").write_text(markdown)
            reps["MARKDOWN"] = REPRESENTATION_FILES["MARKDOWN"]
        return reps

    def summarize(self, doc_id: str, summarizer: Summarizer | None = None) -> str:
        record = self.lookup(doc_id)
        if record is None:
            raise KeyError(f"unknown doc_id {doc_id!r}")
        text = (self.root / record.representations["TEXT"]).read_text()
        summary = (summarizer or extractive_summary)(text, record.title)
        with self._lock, self._flock:
            index = self._read_index()
            path = self.docs_dir / doc_id / REPRESENTATION_FILES["SUMMARY"]
            tmp = path.with_suffix(".md.tmp")
            tmp.write_text(summary)
            os.replace(tmp, path)
            index["entries"][doc_id]["representations"]["SUMMARY"] = f"docs/{doc_id}/summary.md"
            self._commit(index)
        return summary

    def lookup(self, doc_id: str) -> DocRecord | None:
        entry = self._read_index()["entries"].get(doc_id)
        return DocRecord.from_dict(entry) if entry else None

    def read(self, doc_id: str, kind: str = "TEXT") -> str | bytes | None:
        record = self.lookup(doc_id)
        if record is None or kind not in record.representations:
            return None
        path = self.root / record.representations[kind]
        return path.read_bytes() if kind == "RAW" else path.read_text()

    def list(self) -> list[DocRecord]:
        entries = self._read_index()["entries"]
        return [DocRecord.from_dict(entries[k]) for k in sorted(entries)]

    def find(self, predicate: Callable[[dict], bool]) -> list[DocRecord]:
        """Filter records by a predicate over their metadata (no content scan)."""
        return [r for r in self.list() if predicate(r.metadata)]

    def __len__(self):
        return len(self._read_index()["entries"])

    def summary_text(self, limit: int = 20) -> str:
        """Short listing for the system prompt."""
        records = self.list()
        if not records:
            return "No stored documents."
        lines = [f"{len(records)} stored document(s); read them with workspace_lookup(doc_id):"]
        for r in records[:limit]:
            has_summary = "summary" if "SUMMARY" in r.representations else "no summary"
            lines.append(f"- {r.doc_id} {r.title or r.origin or '(untitled)'} ({has_summary})")
        if len(records) > limit:
            lines.append(f"- ... {len(records) - limit} more")
        return "\n".join(lines)

    def fsck(self) -> list[str]:
        """Problems that break the index/disk consistency contract."""
        problems = []
        try:
            index = self._read_index()
        except (ValueError, WorkspaceError) as exc:
            return [f"index.json unreadable: {exc}"]
        for doc_id, entry in index["entries"].items():
            reps = entry.get("representations", {})
            for kind in ("RAW", "TEXT"):
                rel = reps.get(kind)
                if rel is None:
                    problems.append(f"{doc_id}: no {kind} representation")
                elif not (self.root / rel).is_file():
                    problems.append(f"{doc_id}: {kind} file {rel} missing")
            for kind, rel in reps.items():
                if kind not in ("RAW", "TEXT") and not (self.root / rel).is_file():
                    problems.append(f"{doc_id}: {kind} file {rel} missing")
        return problems


class DeferredWorkspace:
    """Read-through view that queues ingests until ``flush``.

    Parallel workers use this so the shared index only changes at round
    boundaries.
    """

    def __init__(self, base: Workspace):
        self.base = base
        self._pending: list[tuple[bytes, str, dict]] = []
        self._lock = threading.Lock()

    def ingest(self, raw: bytes, origin: str = "", **meta) -> str:
        if not raw:
            raise ValueError("cannot ingest empty content")
        with self._lock:
            self._pending.append((raw, origin, meta))
        return doc_id_for(raw)

    def lookup(self, doc_id: str) -> DocRecord | None:
        return self.base.lookup(doc_id)

    def read(self, doc_id: str, kind: str = "TEXT"):
        return self.base.read(doc_id, kind)

    def summary_text(self, limit: int = 20) -> str:
        return self.base.summary_text(limit)

    def flush(self) -> list[str]:
        with self._lock:
            pending, self._pending = self._pending, []
        return [self.base.ingest(raw, origin, **meta) for raw, origin, meta in pending]
