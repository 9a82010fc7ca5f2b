"""Timeouts of the aggregator/agent protocol, overridable from the environment.

``DOPF_RTO_MS``
    Initial retransmission timeout before any round trip has been measured.
``DOPF_MIN_RTO_MS``
    Floor of the adaptive timeout.
``DOPF_MAX_ATTEMPTS``
    Sends of one TARGETS frame before the agent is declared lost.
``DOPF_REGISTRATION_S``
    How long the aggregator waits for every agent to say HELLO.
``DOPF_AGENT_IDLE_S``
    How long an agent waits without hearing from the aggregator.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields


@dataclass(frozen=True)
class Timeouts:
    rto_ms: float = 1000.0
    min_rto_ms: float = 50.0
    max_attempts: int = 5
    registration_s: float = 30.0
    agent_idle_s: float = 120.0

    @classmethod
    def from_env(cls, **overrides) -> "Timeouts":
        env = {
            "rto_ms": "DOPF_RTO_MS",
            "min_rto_ms": "DOPF_MIN_RTO_MS",
            "max_attempts": "DOPF_MAX_ATTEMPTS",
            "registration_s": "DOPF_REGISTRATION_S",
            "agent_idle_s": "DOPF_AGENT_IDLE_S",
        }
        kw = {}
        for f in fields(cls):
            raw = os.environ.get(env[f.name])
            if raw is not None:
                kw[f.name] = int(raw) if f.name == "max_attempts" else float(raw)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)
