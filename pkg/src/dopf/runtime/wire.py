"""Binary frames exchanged between the aggregator and prosumer agents.

Layout (little-endian)::

    offset  size  field
    0       1     version (1)
    1       1     kind
    2       2     agent_id      u16
    4       8     run_id        u64
    12      4     iteration     u32
    16      2     n_values      u16
    18      2     aux           u16
    20      4*n   payload       float32[n]
    20+4n   4     crc32 of bytes [0, 20+4n)

``TARGETS`` carries ``p_hat[0:T], lam[0:T], rho`` (``2T + 1`` values),
``PROFILE`` carries ``p[0:T]`` and reports the agent's solve time in
``aux`` (units of 0.1 ms, saturating).  The other kinds have no payload.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

VERSION = 1
HEADER = struct.Struct("<BBHQIHH")
HEADER_SIZE = HEADER.size          # 20
CRC_SIZE = 4
MAX_FRAME = 65507                  # largest UDP payload over IPv4
MAX_VALUES = (MAX_FRAME - HEADER_SIZE - CRC_SIZE) // 4


class Kind(enum.IntEnum):
    HELLO = 1
    ASSIGN = 2
    TARGETS = 3
    PROFILE = 4
    DONE = 5
    ERROR = 6


class WireError(ValueError):
    """Frame could not be encoded or decoded."""


@dataclass(frozen=True, eq=False)
class WireMessage:
    kind: Kind
    run_id: int = 0
    agent_id: int = 0
    k: int = 0
    payload: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    aux: int = 0
    version: int = VERSION

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "payload",
                           np.ascontiguousarray(self.payload, dtype=np.float32).ravel())

    def __eq__(self, other):
        if not isinstance(other, WireMessage):
            return NotImplemented
        return (self.kind == other.kind and self.run_id == other.run_id
                and self.agent_id == other.agent_id and self.k == other.k
                and self.aux == other.aux and self.version == other.version
                and self.payload.shape == other.payload.shape
                and self.payload.tobytes() == other.payload.tobytes())

    __hash__ = None

    def targets(self):
        """Split a TARGETS payload into ``(p_hat, lam, rho)`` as float64."""
        if self.kind != Kind.TARGETS:
            raise WireError("not a TARGETS frame")
        T = (self.payload.size - 1) // 2
        v = self.payload.astype(float)
        return v[:T], v[T:2 * T], float(v[-1])


def targets_message(run_id, agent_id, k, p_hat, lam, rho) -> WireMessage:
    payload = np.concatenate([np.ravel(p_hat), np.ravel(lam), [rho]])
    return WireMessage(Kind.TARGETS, run_id, agent_id, k, payload)


def profile_message(run_id, agent_id, k, p, solve_ms=0.0) -> WireMessage:
    aux = int(min(65535, max(0, round(10.0 * solve_ms))))
    return WireMessage(Kind.PROFILE, run_id, agent_id, k, np.ravel(p), aux)


def frame_size(n_values: int) -> int:
    return HEADER_SIZE + 4 * n_values + CRC_SIZE


def targets_frame_size(n_steps: int) -> int:
    return frame_size(2 * n_steps + 1)


def profile_frame_size(n_steps: int) -> int:
    return frame_size(n_steps)


def _check_shape(kind, n, n_steps):
    if kind == Kind.TARGETS:
        if n % 2 != 1 or (n_steps is not None and n != 2 * n_steps + 1):
            raise WireError(f"TARGETS payload has {n} values")
    elif kind == Kind.PROFILE:
        if n_steps is not None and n != n_steps:
            raise WireError(f"PROFILE payload has {n} values; expected {n_steps}")
    elif n:
        raise WireError(f"{kind.name} frames carry no payload")


def encode(msg: WireMessage, n_steps: int = None) -> bytes:
    """Serialize ``msg``; ``n_steps`` additionally checks payload lengths."""
    n = msg.payload.size
    if n > MAX_VALUES:
        raise WireError(f"payload of {n} values exceeds {MAX_VALUES}")
    _check_shape(msg.kind, n, n_steps)
    for name, val, hi in (("agent_id", msg.agent_id, 0xFFFF), ("run_id", msg.run_id, 2 ** 64 - 1),
                          ("iteration", msg.k, 0xFFFFFFFF), ("aux", msg.aux, 0xFFFF)):
        if not 0 <= val <= hi:
            raise WireError(f"{name}={val} out of range")
    body = HEADER.pack(msg.version, int(msg.kind), msg.agent_id, msg.run_id, msg.k, n, msg.aux)
    body += msg.payload.astype("<f4").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def decode(frame: bytes, n_steps: int = None) -> WireMessage:
    """Parse a frame, rejecting bad checksums, versions, kinds and lengths."""
    frame = bytes(frame)
    if len(frame) < HEADER_SIZE + CRC_SIZE:
        raise WireError("frame too short")
    body, crc = frame[:-CRC_SIZE], struct.unpack("<I", frame[-CRC_SIZE:])[0]
    if zlib.crc32(body) != crc:
        raise WireError("checksum mismatch")
    version, kind, agent, run, k, n, aux = HEADER.unpack_from(body)
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise WireError(f"unknown kind {kind}") from None
    if len(body) != HEADER_SIZE + 4 * n:
        raise WireError("length field disagrees with frame size")
    _check_shape(kind, n, n_steps)
    payload = np.frombuffer(body, dtype="<f4", count=n, offset=HEADER_SIZE).astype(np.float32)
    return WireMessage(kind, run, agent, k, payload, aux, version)
