"""Datagram transports: UDP sockets, an in-memory loopback, and a wrapper that
injects latency and loss.

Every transport offers ``send(data, addr)``, ``recv(timeout) -> (data, addr)``
or ``None`` on timeout, ``address`` and ``close()``.
"""

from __future__ import annotations

import heapq
import itertools
import queue
import socket
import threading
import time
from dataclasses import dataclass

import numpy as np

MAX_DATAGRAM = 65535


class UdpTransport:
    """Plain UDP socket."""

    def __init__(self, bind=("127.0.0.1", 0)):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(parse_addr(bind))
        self.address = self.sock.getsockname()
        self._closed = False

    def send(self, data: bytes, addr) -> None:
        if not self._closed:
            self.sock.sendto(data, addr)

    def recv(self, timeout=None):
        self.sock.settimeout(timeout)
        try:
            data, addr = self.sock.recvfrom(MAX_DATAGRAM)
        except socket.timeout:
            return None
        except OSError:
            if self._closed:
                return None
            raise
        return data, addr

    def close(self) -> None:
        self._closed = True
        self.sock.close()


class LoopbackHub:
    """In-memory datagram switch; addresses are ``("loop", n)`` tuples."""

    def __init__(self):
        self._queues = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

    def transport(self) -> "LoopbackTransport":
        with self._lock:
            addr = ("loop", next(self._ids))
            q = queue.Queue()
            self._queues[addr] = q
        return LoopbackTransport(self, addr, q)

    def deliver(self, data, src, dst):
        q = self._queues.get(tuple(dst))
        if q is not None:
            q.put((bytes(data), src))

    def drop(self, addr):
        with self._lock:
            self._queues.pop(addr, None)


class LoopbackTransport:
    def __init__(self, hub: LoopbackHub, addr, q):
        self.hub = hub
        self.address = addr
        self._q = q

    def send(self, data: bytes, addr) -> None:
        self.hub.deliver(data, self.address, addr)

    def recv(self, timeout=None):
        try:
            return self._q.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        self.hub.drop(self.address)


@dataclass(frozen=True)
class LinkModel:
    """Outgoing-link impairment.

    ``latency_ms`` is either a fixed delay or a ``(lo, hi)`` pair for a
    uniform delay; ``loss`` is the drop probability per frame.  Wrap both
    ends of a connection to impair both directions.
    """

    latency_ms: float | tuple = 0.0
    loss: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lat = self.latency_ms
        if isinstance(lat, (tuple, list)):
            lo, hi = (float(v) for v in lat)
            if lo < 0 or hi < lo:
                raise ValueError("uniform latency needs 0 <= lo <= hi")
            object.__setattr__(self, "latency_ms", (lo, hi))
        elif float(lat) < 0:
            raise ValueError("latency must be non-negative")
        if not 0.0 <= self.loss < 1.0:
            raise ValueError("loss must lie in [0, 1)")

    @property
    def mean_latency_ms(self) -> float:
        lat = self.latency_ms
        return 0.5 * (lat[0] + lat[1]) if isinstance(lat, tuple) else float(lat)


class LinkTransport:
    """Applies a :class:`LinkModel` to everything sent through ``inner``.

    Drops and delays are drawn from a generator seeded by the model, so a
    given send sequence always sees the same impairments.  Delayed frames are
    released by a background thread in due-time order.
    """

    def __init__(self, inner, model: LinkModel):
        self.inner = inner
        self.model = model
        self.address = inner.address
        self.rng = np.random.default_rng(model.seed)
        self.dropped = 0
        self._heap = []
        self._seq = itertools.count()
        self._cv = threading.Condition()
        self._stop = False
        self._thread = None
        lat = model.latency_ms
        if isinstance(lat, tuple) or lat > 0:
            self._thread = threading.Thread(target=self._pump, daemon=True)
            self._thread.start()

    def _delay_s(self) -> float:
        lat = self.model.latency_ms
        if isinstance(lat, tuple):
            return float(self.rng.uniform(lat[0], lat[1])) / 1e3
        return float(lat) / 1e3

    def send(self, data: bytes, addr) -> None:
        if self.model.loss > 0 and self.rng.random() < self.model.loss:
            self.dropped += 1
            return
        if self._thread is None:
            self.inner.send(data, addr)
            return
        due = time.monotonic() + self._delay_s()
        with self._cv:
            heapq.heappush(self._heap, (due, next(self._seq), bytes(data), addr))
            self._cv.notify()

    def _pump(self):
        while True:
            with self._cv:
                while not self._stop and not self._heap:
                    self._cv.wait()
                if self._stop:
                    return
                due, _, data, addr = self._heap[0]
                wait = due - time.monotonic()
                if wait > 0:
                    self._cv.wait(wait)
                    continue
                heapq.heappop(self._heap)
            try:
                self.inner.send(data, addr)
            except OSError:
                pass

    def recv(self, timeout=None):
        return self.inner.recv(timeout)

    def close(self) -> None:
        with self._cv:
            self._stop = True
            self._cv.notify()
        if self._thread is not None:
            self._thread.join(timeout=1.0)
        self.inner.close()


def with_link_model(transport, model: LinkModel):
    """Wrap ``transport`` so its outgoing frames follow ``model``."""
    return LinkTransport(transport, model)


def parse_addr(addr):
    """``"host:port"`` or ``(host, port)`` to a socket address tuple."""
    if isinstance(addr, str):
        host, _, port = addr.rpartition(":")
        if not host:
            raise ValueError(f"expected HOST:PORT, got {addr!r}")
        return host, int(port)
    host, port = addr
    return str(host), int(port)
