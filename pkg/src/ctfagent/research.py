"""On-demand open-world retrieval.

Topics are sanitized, fanned out to web / academic / code search channels in
parallel, every hit is snapshotted into Markdown and plain text through two
independent converters, and the survivors are aggregated into a report that
validates against ``schemas/research_report.schema.json``.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
import xml.etree.ElementTree as ET
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol
from urllib.parse import urlsplit, urlunsplit

import httpx

from ctfagent.provider import ChatRequest, Message, Provider, Tier

logger = logging.getLogger(__name__)

CHANNEL_TIMEOUT_S = 20.0
DEFAULT_CAP = 5
NOTE_SENTENCES = 3

STOPWORDS = frozenset(
    "a an and as at by for from in into is of on or the to via with".split()
)
# Hits whose title or URL says it is a solution are screened out.
SOLUTION_MARKERS = ("writeup", "write-up", "write up", "walkthrough", "solution")


class Channel(str, Enum):
    WEB = "WEB"
    ACADEMIC = "ACADEMIC"
    CODE = "CODE"


CHANNEL_ORDER = (Channel.WEB, Channel.ACADEMIC, Channel.CODE)


def utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass(frozen=True)
class Hit:
    title: str
    url: str
    snippet: str = ""


@dataclass
class ResearchQuery:
    topics: list[str]
    channels: tuple[Channel, ...] = CHANNEL_ORDER
    per_channel_cap: int = DEFAULT_CAP

    def __post_init__(self):
        if not self.topics:
            raise ValueError("research query needs at least one topic")
        if self.per_channel_cap < 1:
            raise ValueError("per_channel_cap must be positive")
        self.channels = tuple(Channel(c) for c in self.channels)


# --- query hygiene ----------------------------------------------------------

def _meaningful(tokens: list[str]) -> int:
    return sum(1 for t in tokens if len(re.sub(r"\W", "", t)) >= 2 and t.lower() not in STOPWORDS)


def sanitize_query(topic: str, blocklist=()) -> str | None:
    """Strip blocklisted phrases; None when fewer than two meaningful tokens remain."""
    text = " ".join(topic.split())
    phrases = sorted({p.strip() for p in blocklist if p.strip()}, key=len, reverse=True)
    patterns = [re.compile(r"(?<!\w)" + r"\s+".join(map(re.escape, p.split())) + r"(?!\w)", re.I)
                for p in phrases]
    # Removal can splice a new blocklisted phrase together, so iterate.
    while True:
        before = text
        for pat in patterns:
            text = pat.sub(" ", text)
        text = " ".join(text.split())
        if text == before:
            break
    if _meaningful(text.split()) < 2:
        return None
    return text


def screen_hit(hit: Hit, blocklist=()) -> bool:
    """True when the hit may be kept."""
    hay = f"{hit.title} {hit.url}".lower()
    if any(m in hay for m in SOLUTION_MARKERS):
        return False
    return not any(p.strip() and p.strip().lower() in hay for p in blocklist)


def normalize_url(url: str) -> str:
    parts = urlsplit(url.strip())
    return urlunsplit((parts.scheme.lower(), parts.netloc.lower(), parts.path.rstrip("/") or "/", "", ""))


# --- channel clients --------------------------------------------------------

class ChannelClient(Protocol):
    def search(self, topic: str, cap: int) -> list[Hit]: ...


class FixtureChannel:
    """Plays back canned hits. ``hits`` maps topic -> hits, or "*" -> hits for any topic."""

    def __init__(self, hits: dict[str, list[Hit]] | list[Hit], *, delay_s: float = 0.0,
                 error: Exception | None = None):
        self.hits = hits if isinstance(hits, dict) else {"*": list(hits)}
        self.delay_s = delay_s
        self.error = error
        self.calls: list[str] = []

    def search(self, topic: str, cap: int) -> list[Hit]:
        self.calls.append(topic)
        if self.delay_s:
            time.sleep(self.delay_s)
        if self.error is not None:
            raise self.error
        return list(self.hits.get(topic, self.hits.get("*", [])))[:cap]


class ExaSearchClient:
    """General web search through the exa.ai search API."""

    url = "https://api.exa.ai/search"

    def __init__(self, api_key_env: str = "EXA_API_KEY", *, client: httpx.Client | None = None):
        self.api_key_env = api_key_env
        self._client = client or httpx.Client(timeout=CHANNEL_TIMEOUT_S)

    def search(self, topic: str, cap: int) -> list[Hit]:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise RuntimeError(f"{self.api_key_env} not set")
        resp = self._client.post(self.url, json={"query": topic, "numResults": cap},
                                 headers={"x-api-key": key})
        resp.raise_for_status()
        return [Hit(r.get("title") or r["url"], r["url"], r.get("text", "")[:500])
                for r in resp.json().get("results", [])][:cap]


class ArxivClient:
    url = "http://export.arxiv.org/api/query"
    _ns = {"a": "http://www.w3.org/2005/Atom"}

    def __init__(self, *, client: httpx.Client | None = None):
        self._client = client or httpx.Client(timeout=CHANNEL_TIMEOUT_S)

    def search(self, topic: str, cap: int) -> list[Hit]:
        resp = self._client.get(self.url, params={"search_query": f"all:{topic}", "max_results": cap})
        resp.raise_for_status()
        root = ET.fromstring(resp.text)
        hits = []
        for entry in root.findall("a:entry", self._ns):
            title = " ".join((entry.findtext("a:title", "", self._ns)).split())
            link = entry.findtext("a:id", "", self._ns)
            summary = " ".join((entry.findtext("a:summary", "", self._ns)).split())
            if link:
                hits.append(Hit(title, link, summary[:500]))
        return hits[:cap]


class EprintClient:
    """IACR ePrint search; scrapes result links from the HTML search page."""

    url = "https://eprint.iacr.org/search"
    _link = re.compile(r'href="/(\d{4}/\d+)"[^>]*>(?:\s*<[^>]+>)*\s*([^<]*)')

    def __init__(self, *, client: httpx.Client | None = None):
        self._client = client or httpx.Client(timeout=CHANNEL_TIMEOUT_S)

    def search(self, topic: str, cap: int) -> list[Hit]:
        resp = self._client.get(self.url, params={"q": topic})
        resp.raise_for_status()
        hits, seen = [], set()
        for paper_id, title in self._link.findall(resp.text):
            if paper_id in seen:
                continue
            seen.add(paper_id)
            hits.append(Hit(title.strip() or paper_id, f"https://eprint.iacr.org/{paper_id}"))
        return hits[:cap]


class GithubCodeClient:
    url = "https://api.github.com/search/repositories"

    def __init__(self, token_env: str = "GITHUB_TOKEN", *, client: httpx.Client | None = None):
        self.token_env = token_env
        self._client = client or httpx.Client(timeout=CHANNEL_TIMEOUT_S)

    def search(self, topic: str, cap: int) -> list[Hit]:
        headers = {"Accept": "application/vnd.github+json"}
        if os.environ.get(self.token_env):
            headers["Authorization"] = f"Bearer {os.environ[self.token_env]}"
        resp = self._client.get(self.url, params={"q": topic, "per_page": cap}, headers=headers)
        resp.raise_for_status()
        return [Hit(r["full_name"], r["html_url"], r.get("description") or "")
                for r in resp.json().get("items", [])][:cap]


class MergedClient:
    """Interleaves several clients into one channel (arXiv + ePrint)."""

    def __init__(self, *clients: ChannelClient):
        self.clients = clients

    def search(self, topic: str, cap: int) -> list[Hit]:
        batches = [c.search(topic, cap) for c in self.clients]
        merged = []
        for i in range(cap):
            for batch in batches:
                if i < len(batch):
                    merged.append(batch[i])
        return merged[:cap]


def live_clients() -> dict[Channel, ChannelClient]:
    return {
        Channel.WEB: ExaSearchClient(),
        Channel.ACADEMIC: MergedClient(ArxivClient(), EprintClient()),
        Channel.CODE: GithubCodeClient(),
    }


# --- fan-out ----------------------------------------------------------------

@dataclass
class FanOutResult:
    results: dict[Channel, list[Hit]]
    diagnostics: dict[str, dict]


def fan_out(
    query: ResearchQuery,
    clients: dict[Channel, ChannelClient],
    *,
    timeout_s: float = CHANNEL_TIMEOUT_S,
) -> FanOutResult:
    """Query every (channel, topic) pair concurrently.

    A failing or slow channel only affects its own result list and
    diagnostics entry.
    """
    results: dict[Channel, list[Hit]] = {}
    diagnostics: dict[str, dict] = {}
    jobs = {}
    start = time.monotonic()
    pool = ThreadPoolExecutor(max_workers=max(1, len(query.channels) * len(query.topics)),
                              thread_name_prefix="research")
    try:
        for channel in query.channels:
            client = clients.get(channel)
            if client is None:
                diagnostics[channel.value] = {"status": "skipped", "elapsed_s": 0.0, "count": 0,
                                              "error": "no client configured"}
                continue
            for topic in query.topics:
                fut = pool.submit(client.search, topic, query.per_channel_cap)
                jobs[fut] = (channel, topic)
        done, _ = wait(jobs, timeout=timeout_s)
    finally:
        pool.shutdown(wait=False, cancel_futures=True)
    elapsed = round(time.monotonic() - start, 3)

    for channel in query.channels:
        if channel.value in diagnostics:
            continue
        hits: list[Hit] = []
        seen: set[str] = set()
        status, error = "ok", None
        for fut, (ch, topic) in jobs.items():
            if ch is not channel:
                continue
            if fut not in done:
                status, error = "timeout", f"no answer within {timeout_s}s for {topic!r}"
                continue
            exc = fut.exception()
            if exc is not None:
                if status == "ok":
                    status, error = "failed", f"{type(exc).__name__}: {exc}"
                continue
            for hit in fut.result():
                key = normalize_url(hit.url)
                if key not in seen:
                    seen.add(key)
                    hits.append(hit)
        hits = hits[: query.per_channel_cap]
        results[channel] = hits
        diag = {"status": status, "elapsed_s": elapsed, "count": len(hits)}
        if error:
            diag["error"] = error
            logger.warning("research channel %s: %s", channel.value, error)
        diagnostics[channel.value] = diag
    return FanOutResult(results, diagnostics)


# --- snapshots --------------------------------------------------------------

class ConversionError(Exception):
    pass


class Converter(Protocol):
    name: str

    def ref(self, url: str) -> str: ...

    def convert(self, url: str) -> str: ...


class PrefixConverter:
    """A reader service addressed as ``<prefix><origin url>``."""

    def __init__(self, name: str, prefix: str, *, client: httpx.Client | None = None,
                 timeout_s: float = CHANNEL_TIMEOUT_S):
        self.name = name
        self.prefix = prefix
        self._client = client or httpx.Client(timeout=timeout_s, follow_redirects=True)

    def ref(self, url: str) -> str:
        return self.prefix + url

    def convert(self, url: str) -> str:
        try:
            resp = self._client.get(self.ref(url))
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise ConversionError(f"{self.name}: {exc}") from exc
        return resp.text


def into_md() -> PrefixConverter:
    return PrefixConverter("into.md", "https://into.md/")


def jina_reader() -> PrefixConverter:
    return PrefixConverter("jina-reader", "https://r.jina.ai/")


class FixtureConverter:
    def __init__(self, name: str, pages: dict[str, str], *, prefix: str | None = None,
                 failing: set[str] | None = None):
        self.name = name
        self.pages = pages
        self.prefix = prefix if prefix is not None else f"fixture://{name}/"
        self.failing = failing or set()

    def ref(self, url: str) -> str:
        return self.prefix + url

    def convert(self, url: str) -> str:
        if url in self.failing or url not in self.pages:
            raise ConversionError(f"{self.name}: cannot convert {url}")
        return self.pages[url]


@dataclass(frozen=True)
class SnapshotRef:
    converter: str
    url: str
    status: str  # "ok" | "failed"

    def to_dict(self) -> dict:
        return {"converter": self.converter, "url": self.url, "status": self.status}


@dataclass(frozen=True)
class Snapshot:
    text: str
    markdown: str
    refs: tuple[SnapshotRef, SnapshotRef]


def snapshot(origin_url: str, primary: Converter, fallback: Converter) -> Snapshot:
    """Markdown via ``primary``, plain text via ``fallback``; each stands in for the other."""
    outputs = []
    refs = []
    for conv in (primary, fallback):
        try:
            outputs.append(conv.convert(origin_url))
            refs.append(SnapshotRef(conv.name, conv.ref(origin_url), "ok"))
        except Exception as exc:  # converters are external; any failure degrades
            logger.info("snapshot via %s failed for %s: %s", conv.name, origin_url, exc)
            outputs.append(None)
            refs.append(SnapshotRef(conv.name, conv.ref(origin_url), "failed"))
    markdown, text = outputs
    if markdown is None and text is None:
        raise ConversionError(f"both converters failed for {origin_url}")
    return Snapshot(text=text if text is not None else markdown,
                    markdown=markdown if markdown is not None else text,
                    refs=(refs[0], refs[1]))


# --- aggregation ------------------------------------------------------------

def first_sentences(text: str, n: int = NOTE_SENTENCES) -> str:
    flat = " ".join(text.split())
    if not flat:
        return ""
    sentences = re.split(r"(?<=[.!?])\s+", flat)
    return " ".join(sentences[:n])


Summarizer = Callable[[str, str], str]


def extractive_summarizer(text: str, title: str = "") -> str:
    return first_sentences(text) or title


def model_summarizer(provider: Provider, model_id: str | None = None, *, label: str = "summarizer") -> Summarizer:
    """Summaries from one mid-tier model call each."""

    def summarize(text: str, title: str = "") -> str:
        mid = model_id or provider.registry.by_tier(Tier.MID).model_id
        limit = provider.registry.get(mid).context_limit
        words = text.split()
        budget = max(1, limit - 200)
        body = " ".join(words[:budget])
        reply = provider.complete(ChatRequest(
            model_id=mid,
            messages=[
                Message("system", "Summarize the document densely: core findings, key reasoning "
                                  "steps, and every concrete parameter an implementer needs."),
                Message("user", f"Title: {title}\n\n{body}"),
            ],
            temperature=0,
            session_label=label,
        ), purpose="summary")
        return reply.content.strip()

    return summarize


@dataclass
class SourceItem:
    channel: Channel
    title: str
    origin_url: str
    snapshot_refs: tuple[SnapshotRef, SnapshotRef]
    note: str
    retrieved_at: str
    text: str = field(default="", repr=False)
    markdown: str = field(default="", repr=False)

    def __post_init__(self):
        if len(self.snapshot_refs) != 2:
            raise ValueError("an item carries exactly two snapshot references")
        if not self.note.strip():
            raise ValueError("note must not be empty")

    def to_dict(self) -> dict:
        return {
            "channel": self.channel.value,
            "title": self.title,
            "origin_url": self.origin_url,
            "snapshot_refs": [r.to_dict() for r in self.snapshot_refs],
            "note": self.note,
            "retrieved_at": self.retrieved_at,
        }


@dataclass
class ResearchReport:
    query: dict
    items: dict[Channel, list[SourceItem]]
    generated_at: str
    diagnostics: dict

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "generated_at": self.generated_at,
            "items": {c.value: [i.to_dict() for i in self.items.get(c, [])] for c in CHANNEL_ORDER},
            "diagnostics": self.diagnostics,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def all_items(self) -> list[SourceItem]:
        return [i for c in CHANNEL_ORDER for i in self.items.get(c, [])]


def load_report_schema() -> dict:
    return json.loads((resources.files("ctfagent") / "schemas" / "research_report.schema.json").read_text())


def aggregate(
    results: dict[Channel, list[Hit]],
    primary: Converter,
    fallback: Converter,
    *,
    summarizer: Summarizer = extractive_summarizer,
    query: ResearchQuery | None = None,
    diagnostics: dict | None = None,
    blocklist=(),
) -> ResearchReport:
    items: dict[Channel, list[SourceItem]] = {c: [] for c in CHANNEL_ORDER}
    dropped: list[dict] = []
    screened: list[str] = []
    seen: set[str] = set()
    for channel in CHANNEL_ORDER:
        for hit in results.get(channel, []):
            key = normalize_url(hit.url)
            if key in seen:
                continue
            seen.add(key)
            if not screen_hit(hit, blocklist):
                screened.append(hit.url)
                continue
            try:
                snap = snapshot(hit.url, primary, fallback)
            except ConversionError as exc:
                dropped.append({"origin_url": hit.url, "reason": str(exc)})
                continue
            summary = ""
            try:
                summary = summarizer(snap.text, hit.title)
            except Exception as exc:
                logger.warning("summary failed for %s: %s", hit.url, exc)
            summary = summary.strip() or first_sentences(snap.text) or hit.title or hit.url
            live = next(r for r in snap.refs if r.status == "ok")
            items[channel].append(SourceItem(
                channel=channel,
                title=hit.title,
                origin_url=hit.url,
                snapshot_refs=snap.refs,
                note=f"{summary} [snapshot: {live.url}]",
                retrieved_at=utcnow(),
                text=snap.text,
                markdown=snap.markdown,
            ))
    q = query or ResearchQuery(topics=["(none)"])
    query_echo = {"topics": list(q.topics), "channels": [c.value for c in q.channels],
                  "per_channel_cap": q.per_channel_cap}
    diag = {"channels": dict(diagnostics or {}), "dropped": dropped, "screened": screened}
    return ResearchReport(query_echo, items, utcnow(), diag)


class DeepResearch:
    """sanitize -> fan_out -> aggregate, as one callable tool backend."""

    def __init__(
        self,
        clients: dict[Channel, ChannelClient],
        primary: Converter,
        fallback: Converter,
        *,
        blocklist=(),
        summarizer: Summarizer = extractive_summarizer,
        per_channel_cap: int = DEFAULT_CAP,
        timeout_s: float = CHANNEL_TIMEOUT_S,
    ):
        self.clients = clients
        self.primary = primary
        self.fallback = fallback
        self.blocklist = tuple(blocklist)
        self.summarizer = summarizer
        self.per_channel_cap = per_channel_cap
        self.timeout_s = timeout_s

    def run(self, topics: list[str], channels=CHANNEL_ORDER) -> ResearchReport:
        clean, rejected = [], []
        for t in topics:
            s = sanitize_query(t, self.blocklist)
            (clean if s else rejected).append(s or t)
        if not clean:
            q = ResearchQuery(topics=list(topics), channels=tuple(channels), per_channel_cap=self.per_channel_cap)
            report = aggregate({}, self.primary, self.fallback, query=q,
                               diagnostics={c.value: {"status": "skipped", "elapsed_s": 0.0, "count": 0,
                                                      "error": "all topics rejected"} for c in q.channels})
            report.query["topics"] = []
            report.query["rejected_topics"] = rejected
            return report
        q = ResearchQuery(topics=clean, channels=tuple(channels), per_channel_cap=self.per_channel_cap)
        fan = fan_out(q, self.clients, timeout_s=self.timeout_s)
        report = aggregate(fan.results, self.primary, self.fallback, summarizer=self.summarizer,
                           query=q, diagnostics=fan.diagnostics, blocklist=self.blocklist)
        if rejected:
            report.query["rejected_topics"] = rejected
        return report


def load_blocklist(path: str | Path) -> list[str]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list) or not all(isinstance(x, str) for x in data):
        raise ValueError(f"{path}: blocklist must be a JSON array of strings")
    return data


def fixture_pipeline(doc: dict, *, blocklist=(), **kwargs) -> DeepResearch:
    """Offline pipeline from a document of canned hits and pages.

    ``{"channels": {"WEB": [{"title", "url", "snippet"}], ...}, "pages": {url: text}}``
    """
    clients = {}
    for name, hits in doc.get("channels", {}).items():
        clients[Channel(name)] = FixtureChannel([Hit(**h) for h in hits])
    pages = doc.get("pages", {})
    return DeepResearch(clients, FixtureConverter("fixture-md", pages), FixtureConverter("fixture-text", pages),
                        blocklist=blocklist, **kwargs)
