"""Flag arbitration and the scoreboard, plus its HTTP JSON API.

    POST /submit  {"challenge_id", "flag", "session_id"} -> {"verdict": ...}
    GET  /stats   -> scoreboard
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Iterable

import httpx

from ctfagent.challenge import ChallengeDescriptor

logger = logging.getLogger(__name__)


class Verdict(str, Enum):
    CORRECT = "CORRECT"
    INCORRECT = "INCORRECT"
    DUPLICATE = "DUPLICATE"
    UNKNOWN_CHALLENGE = "UNKNOWN_CHALLENGE"


@dataclass
class ChallengeStats:
    solved: bool = False
    first_solve_at: float | None = None
    first_solver: str | None = None
    attempts: int = 0
    correct_sessions: set[str] = field(default_factory=set)

    def to_dict(self) -> dict:
        return {
            "solved": self.solved,
            "first_solve_at": self.first_solve_at,
            "first_solver": self.first_solver,
            "attempts": self.attempts,
            "solving_sessions": len(self.correct_sessions),
        }


class Arbiter:
    """Judges submissions; DUPLICATE is scoped per (challenge, session).

    A challenge counts as solved once globally; only its first CORRECT
    verdict records a first-solve timestamp.
    """

    def __init__(self, challenges: Iterable[ChallengeDescriptor] = ()):
        self._challenges: dict[str, ChallengeDescriptor] = {}
        self._stats: dict[str, ChallengeStats] = {}
        self._lock = threading.Lock()
        self.log: list[dict] = []
        for c in challenges:
            self.add(c)

    def add(self, challenge: ChallengeDescriptor) -> None:
        with self._lock:
            self._challenges[challenge.id] = challenge
            self._stats.setdefault(challenge.id, ChallengeStats())

    def submit(self, challenge_id: str, flag: str, session_id: str) -> Verdict:
        with self._lock:
            challenge = self._challenges.get(challenge_id)
            if challenge is None:
                verdict = Verdict.UNKNOWN_CHALLENGE
            else:
                stats = self._stats[challenge_id]
                stats.attempts += 1
                if not challenge.flag.accepts(flag):
                    verdict = Verdict.INCORRECT
                elif session_id in stats.correct_sessions:
                    verdict = Verdict.DUPLICATE
                else:
                    verdict = Verdict.CORRECT
                    stats.correct_sessions.add(session_id)
                    if not stats.solved:
                        stats.solved = True
                        stats.first_solve_at = time.time()
                        stats.first_solver = session_id
            self.log.append({"challenge_id": challenge_id, "session_id": session_id,
                             "verdict": verdict.value, "at": time.time()})
        return verdict

    def stats(self, challenge_id: str) -> ChallengeStats:
        return self._stats[challenge_id]

    def scoreboard(self) -> dict:
        with self._lock:
            per = {cid: s.to_dict() for cid, s in sorted(self._stats.items())}
        total = len(per)
        solved = sum(1 for s in per.values() if s["solved"])
        return {
            "challenges": per,
            "solved": solved,
            "total": total,
            "solve_rate": solved / total if total else 0.0,
        }


class _ApiHandler(BaseHTTPRequestHandler):
    server: "ArbitrationServer"

    def log_message(self, fmt, *args):
        logger.debug("arbitration api: " + fmt, *args)

    def _reply(self, code: int, body: dict) -> None:
        data = json.dumps(body, sort_keys=True).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        if self.path.rstrip("/") == "/stats":
            self._reply(200, self.server.arbiter.scoreboard())
        else:
            self._reply(404, {"error": "not found"})

    def do_POST(self):
        if self.path.rstrip("/") != "/submit":
            self._reply(404, {"error": "not found"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length) or b"{}")
            cid, flag, sid = body["challenge_id"], body["flag"], body["session_id"]
            if not all(isinstance(x, str) for x in (cid, flag, sid)):
                raise TypeError("fields must be strings")
        except (ValueError, KeyError, TypeError) as exc:
            self._reply(400, {"error": f"bad request: {exc}"})
            return
        verdict = self.server.arbiter.submit(cid, flag, sid)
        self._reply(200, {"verdict": verdict.value})


class ArbitrationServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, arbiter: Arbiter, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _ApiHandler)
        self.arbiter = arbiter
        self._thread = threading.Thread(target=self.serve_forever, name="arbitration", daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ArbitrationServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class ArbiterClient:
    """HTTP client for a remote arbitration service."""

    def __init__(self, base_url: str, *, client: httpx.Client | None = None):
        self.base_url = base_url.rstrip("/")
        self._client = client or httpx.Client(timeout=10.0)

    def submit(self, challenge_id: str, flag: str, session_id: str) -> Verdict:
        resp = self._client.post(self.base_url + "/submit",
                                 json={"challenge_id": challenge_id, "flag": flag, "session_id": session_id})
        resp.raise_for_status()
        return Verdict(resp.json()["verdict"])

    def scoreboard(self) -> dict:
        resp = self._client.get(self.base_url + "/stats")
        resp.raise_for_status()
        return resp.json()
