"""Host challenge scripts over line-oriented TCP.

Each accepted connection gets its own script process whose stdin/stdout
are bridged to the socket line by line, so sessions never share state.
"""

from __future__ import annotations

import logging
import os
import signal
import socket
import socketserver
import subprocess
import sys
import threading
from pathlib import Path

from ctfagent.challenge import ChallengeDescriptor

logger = logging.getLogger(__name__)

# After the client hangs up the script may finish writing; then it is killed.
EXIT_GRACE_S = 1.0
TERM_GRACE_S = 1.0


class ServiceError(Exception):
    pass


def script_command(script: Path) -> list[str]:
    if not script.is_file():
        raise ServiceError(f"service script {script} does not exist")
    if script.suffix == ".py":
        return [sys.executable, "-u", str(script)]
    if not os.access(script, os.X_OK):
        raise ServiceError(f"service script {script} is not executable")
    return [str(script)]


def _reap(proc: subprocess.Popen) -> None:
    try:
        proc.wait(timeout=EXIT_GRACE_S)
        return
    except subprocess.TimeoutExpired:
        pass
    for sig, grace in ((signal.SIGTERM, TERM_GRACE_S), (signal.SIGKILL, None)):
        try:
            os.killpg(proc.pid, sig)
        except ProcessLookupError:
            break
        try:
            proc.wait(timeout=grace)
            return
        except subprocess.TimeoutExpired:
            continue
    proc.wait()


class _BridgeHandler(socketserver.BaseRequestHandler):
    server: "ChallengeServer"

    def handle(self):
        sock = self.request
        proc = subprocess.Popen(
            self.server.command,
            cwd=self.server.cwd,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            start_new_session=True,
            env={**os.environ, "PYTHONUNBUFFERED": "1"},
        )
        self.server.track(proc)
        pump = threading.Thread(target=self._client_to_script, args=(sock, proc), daemon=True)
        pump.start()
        try:
            for line in iter(proc.stdout.readline, b""):
                sock.sendall(line)
        except OSError:
            pass  # client went away
        finally:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            _reap(proc)
            proc.stdout.close()
            pump.join(timeout=1.0)
            self.server.untrack(proc)

    @staticmethod
    def _client_to_script(sock: socket.socket, proc: subprocess.Popen) -> None:
        reader = sock.makefile("rb")
        try:
            for line in reader:
                proc.stdin.write(line)
                proc.stdin.flush()
        except (OSError, ValueError):
            pass
        finally:
            try:
                proc.stdin.close()
            except OSError:
                pass
            if proc.poll() is None:
                # client hung up; give the script a moment, then stop it
                threading.Thread(target=_reap, args=(proc,), daemon=True).start()


class ChallengeServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, descriptor: ChallengeDescriptor, host: str = "127.0.0.1", port: int = 0):
        if descriptor.service is None:
            raise ServiceError(f"challenge {descriptor.id} has no service")
        self.descriptor = descriptor
        self.command = script_command(descriptor.service.script)
        self.cwd = descriptor.service.script.parent
        self._procs: set[subprocess.Popen] = set()
        self._procs_lock = threading.Lock()
        try:
            super().__init__((host, port), _BridgeHandler)
        except OSError as exc:
            raise ServiceError(f"cannot bind a port for {descriptor.id}: {exc}") from None
        self._thread = threading.Thread(target=self.serve_forever, name=f"svc-{descriptor.id}", daemon=True)

    @property
    def endpoint(self) -> tuple[str, int]:
        host, port = self.server_address[:2]
        return host, port

    def start(self) -> "ChallengeServer":
        self._thread.start()
        return self

    def track(self, proc):
        with self._procs_lock:
            self._procs.add(proc)

    def untrack(self, proc):
        with self._procs_lock:
            self._procs.discard(proc)

    def live_pids(self) -> list[int]:
        with self._procs_lock:
            return [p.pid for p in self._procs if p.poll() is None]

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        with self._procs_lock:
            procs = list(self._procs)
        for p in procs:
            _reap(p)


class ServiceHost:
    """Schedules challenge services on ephemeral ports."""

    def __init__(self, host: str = "127.0.0.1"):
        self.host = host
        self._servers: dict[str, ChallengeServer] = {}
        self._lock = threading.Lock()

    def schedule(self, descriptor: ChallengeDescriptor) -> tuple[str, int]:
        with self._lock:
            if descriptor.id in self._servers:
                return self._servers[descriptor.id].endpoint
            server = ChallengeServer(descriptor, self.host).start()
            self._servers[descriptor.id] = server
        logger.info("serving %s on %s:%d", descriptor.id, *server.endpoint)
        return server.endpoint

    def server(self, challenge_id: str) -> ChallengeServer:
        return self._servers[challenge_id]

    def live_view(self) -> dict[str, tuple[str, int]]:
        with self._lock:
            return {cid: s.endpoint for cid, s in self._servers.items()}

    def unschedule(self, challenge_id: str) -> None:
        with self._lock:
            server = self._servers.pop(challenge_id, None)
        if server:
            server.stop()

    def close(self) -> None:
        for cid in list(self._servers):
            self.unschedule(cid)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
