"""Prosumer agent: registers with the aggregator, then answers each TARGETS
frame with the household's optimal net-power PROFILE."""

from __future__ import annotations

import logging
import time

from ..admm import BackendError, solve_household
from ..model import Horizon, ProsumerProfile, Tariff
from .settings import Timeouts
from .transport import UdpTransport, parse_addr
from .wire import Kind, WireError, WireMessage, decode, encode, profile_message

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_TIMEOUT = 1


class Agent:
    """One prosumer endpoint.

    Duplicate TARGETS for an iteration already answered are served from the
    cached PROFILE, so each iteration is solved at most once.
    """

    def __init__(self, server, profile: ProsumerProfile, horizon: Horizon, tariff: Tariff,
                 agent_id: int, *, s_base=100.0, transport=None, timeouts=None, tol=1e-8):
        self.server = server if transport is not None and not isinstance(server, str) \
            else parse_addr(server)
        self.profile = profile
        self.horizon = horizon
        self.tariff = tariff
        self.agent_id = int(agent_id)
        self.s_base = float(s_base)
        self.transport = transport if transport is not None else UdpTransport(("0.0.0.0", 0))
        self.timeouts = timeouts or Timeouts.from_env()
        self.tol = tol
        self.run_id = None
        self.solves = 0
        self.dropped = 0
        self._last_k = 0
        self._last_frame = None

    def _send(self, msg: WireMessage):
        self.transport.send(encode(msg), self.server)

    def _recv(self, timeout):
        pkt = self.transport.recv(timeout)
        if pkt is None:
            return None
        try:
            return decode(pkt[0])
        except WireError:
            self.dropped += 1
            return False

    def register(self) -> bool:
        deadline = time.monotonic() + self.timeouts.registration_s
        hello = WireMessage(Kind.HELLO, 0, self.agent_id, 0)
        step = min(1.0, self.timeouts.rto_ms / 1e3)
        while time.monotonic() < deadline:
            self._send(hello)
            until = min(deadline, time.monotonic() + step)
            while time.monotonic() < until:
                msg = self._recv(max(0.0, until - time.monotonic()))
                if msg is None:
                    break
                if msg is False or msg.agent_id != self.agent_id:
                    continue
                if msg.kind == Kind.ASSIGN:
                    self.run_id = msg.run_id
                    return True
                if msg.kind == Kind.DONE:
                    self.run_id = msg.run_id
                    self._send(WireMessage(Kind.DONE, msg.run_id, self.agent_id, msg.k))
                    return False
        return False

    def serve(self) -> int:
        """Answer TARGETS until DONE (exit 0) or an idle timeout (exit 1)."""
        T = self.horizon.n
        while True:
            msg = self._recv(self.timeouts.agent_idle_s)
            if msg is None:
                log.warning("agent %d: no traffic for %.0f s", self.agent_id,
                            self.timeouts.agent_idle_s)
                return EXIT_TIMEOUT
            if msg is False or msg.agent_id != self.agent_id or msg.run_id != self.run_id:
                continue
            if msg.kind == Kind.DONE:
                self._send(WireMessage(Kind.DONE, self.run_id, self.agent_id, msg.k))
                return EXIT_OK
            if msg.kind != Kind.TARGETS or msg.payload.size != 2 * T + 1:
                continue
            if msg.k == self._last_k and self._last_frame is not None:
                self.transport.send(self._last_frame, self.server)
                continue
            if msg.k < self._last_k:
                continue
            p_hat, lam, rho = msg.targets()
            # CPU time of this thread: what the solve costs on a dedicated device
            t0 = time.thread_time()
            try:
                p = solve_household(self.profile, self.horizon, self.tariff, p_hat, lam, rho,
                                    self.s_base, self.tol)
            except BackendError as e:
                log.error("agent %d: %s", self.agent_id, e)
                self._send(WireMessage(Kind.ERROR, self.run_id, self.agent_id, msg.k, aux=1))
                continue
            self.solves += 1
            ms = 1e3 * (time.thread_time() - t0)
            frame = encode(profile_message(self.run_id, self.agent_id, msg.k, p, ms), T)
            self._last_k, self._last_frame = msg.k, frame
            self.transport.send(frame, self.server)

    def run(self) -> int:
        try:
            if not self.register():
                return EXIT_OK if self.run_id is not None else EXIT_TIMEOUT
            return self.serve()
        finally:
            self.transport.close()


def agent_run(aggregator_addr, profile: ProsumerProfile, horizon: Horizon, tariff: Tariff, *,
              agent_id: int, s_base=100.0, transport=None, timeouts=None) -> int:
    """Run a prosumer agent to completion and return its exit status."""
    return Agent(aggregator_addr, profile, horizon, tariff, agent_id, s_base=s_base,
                 transport=transport, timeouts=timeouts).run()
