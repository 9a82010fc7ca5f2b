"""Aggregator side of the distributed runtime.

:class:`RemoteBackend` plugs into :func:`dopf.admm.run_admm` in place of the
in-process pool: each iteration it sends one TARGETS frame per agent and
waits for every PROFILE.  A PROFILE for iteration ``k`` doubles as the
acknowledgement of that TARGETS frame; frames that go unanswered are resent
after ``max(min_rto, 2 * SRTT)`` and an agent that stays silent for
``max_attempts`` sends fails the run.
"""

from __future__ import annotations

import logging
import os
import queue
import threading
import time
from dataclasses import dataclass

import numpy as np

from ..admm import (
    SOLVER_FAILURE,
    TRANSPORT_FAILURE,
    AdmmConfig,
    AdmmResult,
    BackendError,
    RoundStats,
    run_admm,
)
from ..model import Case
from .settings import Timeouts
from .transport import UdpTransport
from .wire import Kind, WireError, WireMessage, decode, encode, targets_message

log = logging.getLogger(__name__)


@dataclass
class _Peer:
    addr: object = None
    srtt_ms: float = None

    def rto_s(self, t: Timeouts) -> float:
        if self.srtt_ms is None:
            return t.rto_ms / 1e3
        return max(t.min_rto_ms, 2.0 * self.srtt_ms) / 1e3

    def sample(self, rtt_ms: float):
        if self.srtt_ms is None:
            self.srtt_ms = rtt_ms
        else:
            self.srtt_ms = 0.875 * self.srtt_ms + 0.125 * rtt_ms


class RemoteBackend:
    """Prosumer backend that talks to one agent per household.

    Agent ``h`` must announce itself with ``agent_id = h``.  Call
    :meth:`register` before handing the backend to ``run_admm``.
    """

    name = "remote"

    def __init__(self, case: Case, transport, timeouts: Timeouts = None, run_id: int = None):
        self.case = case
        self.transport = transport
        self.timeouts = timeouts or Timeouts.from_env()
        self.run_id = int.from_bytes(os.urandom(8), "little") if run_id is None else int(run_id)
        self.peers = [_Peer() for _ in range(case.n_prosumers)]
        self.inbox = queue.Queue()
        self.retransmissions = 0
        self.dropped = 0
        self._stop = threading.Event()
        self._rx = threading.Thread(target=self._receive_loop, daemon=True)
        self._rx.start()

    # -- receive side -------------------------------------------------------

    def _receive_loop(self):
        while not self._stop.is_set():
            try:
                pkt = self.transport.recv(0.05)
            except OSError:
                return
            if pkt is None:
                continue
            data, addr = pkt
            try:
                msg = decode(data)
            except WireError:
                self.dropped += 1
                continue
            self.inbox.put((msg, addr, len(data), time.perf_counter()))

    def _next(self, timeout):
        try:
            return self.inbox.get(timeout=max(0.0, timeout))
        except queue.Empty:
            return None

    def _valid_agent(self, msg) -> bool:
        return 0 <= msg.agent_id < len(self.peers)

    def _assign(self, msg, addr):
        self.peers[msg.agent_id].addr = addr
        self.transport.send(encode(WireMessage(Kind.ASSIGN, self.run_id, msg.agent_id, 0)), addr)

    # -- protocol -----------------------------------------------------------

    def register(self):
        """Wait until every agent has said HELLO; raises BackendError on timeout."""
        deadline = time.monotonic() + self.timeouts.registration_s
        missing = set(range(len(self.peers)))
        while missing:
            item = self._next(deadline - time.monotonic())
            if item is None:
                if time.monotonic() >= deadline:
                    first = min(missing)
                    raise BackendError(f"registration timed out; missing agents {sorted(missing)}",
                                       agent_id=first, status=TRANSPORT_FAILURE)
                continue
            msg, addr, _, _ = item
            if msg.kind == Kind.HELLO and self._valid_agent(msg):
                self._assign(msg, addr)
                missing.discard(msg.agent_id)
        log.info("all %d agents registered (run %016x)", len(self.peers), self.run_id)

    def round(self, k, p_hat, lam, rho):
        T = self.case.horizon.n
        H = len(self.peers)
        t = self.timeouts
        frames = [encode(targets_message(self.run_id, h, k, p_hat[h], lam[h], rho), T)
                  for h in range(H)]
        out = [None] * H
        solve_ms = [0.0] * H
        sent_at = [0.0] * H
        first_sent = [0.0] * H
        attempts = [0] * H
        stats = RoundStats()
        t0 = time.perf_counter()

        def send(h):
            now = time.perf_counter()
            if attempts[h] == 0:
                first_sent[h] = now
            else:
                self.retransmissions += 1
            attempts[h] += 1
            sent_at[h] = now
            self.transport.send(frames[h], self.peers[h].addr)
            stats.bytes_down += len(frames[h])

        for h in range(H):
            send(h)
        pending = set(range(H))
        while pending:
            now = time.perf_counter()
            due = min(sent_at[h] + self.peers[h].rto_s(t) for h in pending)
            if now >= due:
                for h in sorted(pending):
                    if now < sent_at[h] + self.peers[h].rto_s(t):
                        continue
                    if attempts[h] >= t.max_attempts:
                        raise BackendError(
                            f"agent {h} did not answer iteration {k} after {attempts[h]} sends",
                            agent_id=h, status=TRANSPORT_FAILURE)
                    send(h)
                continue
            item = self._next(due - now)
            if item is None:
                continue
            msg, addr, size, t_rx = item
            if not self._valid_agent(msg):
                continue
            h = msg.agent_id
            if msg.kind == Kind.HELLO:
                # A restarted agent re-registers mid-run.
                self._assign(msg, addr)
                continue
            if msg.run_id != self.run_id:
                continue
            stats.bytes_up += size
            if msg.k != k:
                continue
            if msg.kind == Kind.ERROR:
                raise BackendError(f"agent {h} failed to solve iteration {k}",
                                   agent_id=h, status=SOLVER_FAILURE)
            if msg.kind != Kind.PROFILE or h not in pending or msg.payload.size != T:
                continue
            if attempts[h] == 1:
                # Karn: only unambiguous samples feed the RTT estimate.
                self.peers[h].sample(1e3 * (t_rx - first_sent[h]))
            out[h] = msg.payload.astype(float)
            solve_ms[h] = msg.aux / 10.0
            pending.discard(h)

        wall = 1e3 * (time.perf_counter() - t0)
        stats.t_solve_ms = max(solve_ms) if H else 0.0
        stats.t_solve_max_ms = stats.t_solve_ms
        stats.t_transport_ms = max(0.0, wall - stats.t_solve_ms)
        return np.vstack(out).reshape(p_hat.shape), stats

    def finish(self, status):
        """Send DONE to every agent and wait briefly for the echoes."""
        try:
            todo = {h for h, p in enumerate(self.peers) if p.addr is not None}
            for attempt in range(self.timeouts.max_attempts):
                if not todo:
                    break
                for h in todo:
                    done = WireMessage(Kind.DONE, self.run_id, h, 0)
                    self.transport.send(encode(done), self.peers[h].addr)
                deadline = time.monotonic() + min(1.0, self.peers[min(todo)].rto_s(self.timeouts))
                while todo and time.monotonic() < deadline:
                    item = self._next(deadline - time.monotonic())
                    if item is None:
                        break
                    msg = item[0]
                    if msg.kind == Kind.DONE and msg.run_id == self.run_id:
                        todo.discard(msg.agent_id)
        finally:
            self.close()

    def close(self):
        self._stop.set()
        self._rx.join(timeout=1.0)
        self.transport.close()


class AggregatorHandle:
    """A running aggregator; :meth:`wait` returns the :class:`AdmmResult`."""

    def __init__(self, backend: RemoteBackend, thread: threading.Thread):
        self.backend = backend
        self.address = backend.transport.address
        self.run_id = backend.run_id
        self._thread = thread
        self.result: AdmmResult = None

    def wait(self, timeout=None) -> AdmmResult:
        self._thread.join(timeout)
        if self._thread.is_alive():
            raise TimeoutError("aggregator still running")
        return self.result

    @property
    def done(self) -> bool:
        return not self._thread.is_alive()


def aggregator_serve(bind_addr, case: Case, cfg: AdmmConfig = None, *, transport=None,
                     timeouts: Timeouts = None, run_id: int = None,
                     callback=None) -> AggregatorHandle:
    """Start an aggregator in a background thread.

    Parameters
    ----------
    bind_addr : str or tuple
        ``"host:port"`` for a UDP socket; ignored when ``transport`` is given.
    case : Case
    cfg : AdmmConfig, optional
    transport : object, optional
        Pre-built transport (loopback or impaired link).

    Returns
    -------
    AggregatorHandle
        Registration, the ADMM loop and shutdown all happen in the thread;
        failures end up in ``handle.wait().status``.
    """
    cfg = cfg or AdmmConfig()
    transport = transport if transport is not None else UdpTransport(bind_addr)
    backend = RemoteBackend(case, transport, timeouts, run_id)
    handle = None

    def main():
        try:
            backend.register()
        except BackendError as e:
            backend.close()
            handle.result = AdmmResult(status=e.status, state=None, history=[],
                                       objective=float("nan"), iterations=0, message=str(e),
                                       failed_agent=e.agent_id, s_base=case.s_base)
            return
        handle.result = run_admm(case, cfg, backend, callback=callback)

    thread = threading.Thread(target=main, name="aggregator", daemon=True)
    handle = AggregatorHandle(backend, thread)
    thread.start()
    return handle
