import threading
import time

import numpy as np
import pytest

from dopf.admm import TRANSPORT_FAILURE, AdmmConfig
from dopf.cases import build_case
from dopf.harness import run_remote
from dopf.runtime.agent import EXIT_OK, Agent, agent_run
from dopf.runtime.aggregator import aggregator_serve
from dopf.runtime.settings import Timeouts
from dopf.runtime.transport import (
    LinkModel,
    LoopbackHub,
    UdpTransport,
    parse_addr,
    with_link_model,
)
from dopf.runtime.wire import Kind, WireMessage, decode, encode, targets_message

FAST = Timeouts(rto_ms=100.0, min_rto_ms=30.0, max_attempts=4, registration_s=5.0,
                agent_idle_s=10.0)


class FakeAggregator:
    """Scripted aggregator end of a loopback link."""

    def __init__(self, hub):
        self.t = hub.transport()
        self.address = self.t.address

    def expect(self, kind, timeout=5.0):
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            pkt = self.t.recv(0.1)
            if pkt is None:
                continue
            msg = decode(pkt[0])
            if msg.kind == kind:
                return msg, pkt[1]
        raise AssertionError(f"no {kind.name} frame")

    def send(self, msg, addr):
        self.t.send(encode(msg), addr)


def _start_agent(hub, agg, profile, case, h=0):
    agent = Agent(agg.address, profile, case.horizon, case.tariff, h, s_base=case.s_base,
                  transport=hub.transport(), timeouts=FAST)
    out = {}
    th = threading.Thread(target=lambda: out.setdefault("code", agent.run()), daemon=True)
    th.start()
    return agent, th, out


def test_agent_follows_huge_rho_target():
    case = build_case("minimal-1", "T1", 3)
    pr = case.prosumers[0]
    hub = LoopbackHub()
    agg = FakeAggregator(hub)
    agent, th, out = _start_agent(hub, agg, pr, case)
    hello, addr = agg.expect(Kind.HELLO)
    agg.send(WireMessage(Kind.ASSIGN, 77, 0, 0), addr)
    # a feasible profile: demand minus half the PV, no battery use
    target = np.asarray(pr.demand) - 0.5 * np.asarray(pr.pv_available)
    T = case.horizon.n
    agg.send(targets_message(77, 0, 1, target, np.zeros(T), 1e4), addr)
    prof, _ = agg.expect(Kind.PROFILE)
    assert prof.k == 1 and prof.run_id == 77
    np.testing.assert_allclose(prof.payload, target, atol=1e-3)
    # a duplicate is answered from the cache without a second solve
    agg.send(targets_message(77, 0, 1, target, np.zeros(T), 1e4), addr)
    again, _ = agg.expect(Kind.PROFILE)
    assert again == prof and agent.solves == 1
    agg.send(WireMessage(Kind.DONE, 77, 0, 2), addr)
    agg.expect(Kind.DONE)
    th.join(5.0)
    assert out["code"] == EXIT_OK


def test_agent_done_before_assignment_exits_cleanly():
    case = build_case("minimal-1", "T1", 3)
    hub = LoopbackHub()
    agg = FakeAggregator(hub)
    agent, th, out = _start_agent(hub, agg, case.prosumers[0], case)
    _, addr = agg.expect(Kind.HELLO)
    agg.send(WireMessage(Kind.DONE, 5, 0, 0), addr)
    agg.expect(Kind.DONE)
    th.join(5.0)
    assert out["code"] == EXIT_OK and agent.solves == 0


def test_agent_survives_malformed_frames():
    case = build_case("minimal-1", "T1", 3)
    hub = LoopbackHub()
    agg = FakeAggregator(hub)
    agent, th, out = _start_agent(hub, agg, case.prosumers[0], case)
    _, addr = agg.expect(Kind.HELLO)
    agg.send(WireMessage(Kind.ASSIGN, 9, 0, 0), addr)
    r = np.random.default_rng(0)
    T = case.horizon.n
    good = encode(targets_message(9, 0, 1, np.zeros(T), np.zeros(T), 1.0))
    junk = [b"", b"\x01", bytes(r.integers(0, 256, 30, dtype=np.uint8)),
            good[:-1], good[:100], bytes([good[0] ^ 0xFF]) + good[1:],
            encode(targets_message(9, 0, 1, np.zeros(3), np.zeros(3), 1.0)),
            encode(targets_message(8, 0, 1, np.zeros(T), np.zeros(T), 1.0)),
            encode(WireMessage(Kind.PROFILE, 9, 0, 1, np.zeros(T)))]
    for j in junk:
        agg.t.send(j, addr)
    agg.t.send(good, addr)
    prof, _ = agg.expect(Kind.PROFILE)
    assert prof.k == 1
    assert agent.dropped >= 5 and agent.solves == 1
    agg.send(WireMessage(Kind.DONE, 9, 0, 2), addr)
    th.join(5.0)
    assert out["code"] == EXIT_OK


def test_remote_equals_in_process(minimal2_t1, minimal2_t1_result):
    local = minimal2_t1_result
    remote = run_remote(minimal2_t1, AdmmConfig(eps_abs=1e-4))
    assert remote.converged
    assert remote.iterations == local.iterations
    for a, b in zip(remote.history, local.history):
        assert a.r_norm == pytest.approx(b.r_norm, rel=1e-6)
    np.testing.assert_array_equal(remote.p, local.p)
    assert remote.history[0].bytes_up == 2 * 216 and remote.history[0].bytes_down == 2 * 412


def test_silent_agent_is_named():
    case = build_case("minimal-2", 4, 0)
    hub = LoopbackHub()
    handle = aggregator_serve(None, case, AdmmConfig(), transport=hub.transport(),
                              timeouts=FAST)
    ok = threading.Thread(target=agent_run, daemon=True,
                          args=(handle.address, case.prosumers[0], case.horizon, case.tariff),
                          kwargs=dict(agent_id=0, s_base=case.s_base,
                                      transport=hub.transport(), timeouts=FAST))
    ok.start()
    mute = hub.transport()
    mute.send(encode(WireMessage(Kind.HELLO, 0, 1, 0)), handle.address)
    res = handle.wait(30.0)
    assert res.status == TRANSPORT_FAILURE
    assert res.failed_agent == 1
    assert "agent 1" in res.message
    ok.join(5.0)


def test_missing_agent_fails_registration():
    case = build_case("minimal-2", 4, 0)
    hub = LoopbackHub()
    t = Timeouts(registration_s=0.3)
    handle = aggregator_serve(None, case, transport=hub.transport(), timeouts=t)
    res = handle.wait(10.0)
    assert res.status == TRANSPORT_FAILURE and res.state is None
    assert "[0, 1]" in res.message


def test_loss_is_masked_by_retransmission(minimal2_t1, minimal2_t1_result):
    lossy = run_remote(minimal2_t1, AdmmConfig(eps_abs=1e-4), loss=0.1, seed=3,
                       timeouts=Timeouts(rto_ms=100.0, min_rto_ms=30.0, max_attempts=20))
    assert lossy.converged
    assert lossy.iterations == minimal2_t1_result.iterations
    np.testing.assert_array_equal(lossy.p, minimal2_t1_result.p)
    down = sum(h.bytes_down for h in lossy.history)
    assert down > sum(h.bytes_down for h in minimal2_t1_result.history)


def test_zero_loss_link_is_transparent():
    hub = LoopbackHub()
    a, b = hub.transport(), hub.transport()
    plain = hub.transport()
    wrapped = with_link_model(a, LinkModel(0.0, 0.0))
    frames = [bytes([i]) * (i + 1) for i in range(50)]
    for f in frames:
        wrapped.send(f, b.address)
        plain.send(f, b.address)
    got = [b.recv(1.0)[0] for _ in range(100)]
    assert got[0::2] == frames and got[1::2] == frames


def test_link_model_validation():
    with pytest.raises(ValueError):
        LinkModel(loss=1.0)
    with pytest.raises(ValueError):
        LinkModel(latency_ms=-1)
    with pytest.raises(ValueError):
        LinkModel(latency_ms=(5, 1))
    assert LinkModel(latency_ms=(10, 30)).mean_latency_ms == 20


def test_link_latency_delays_frames():
    hub = LoopbackHub()
    a, b = hub.transport(), hub.transport()
    link = with_link_model(a, LinkModel(50.0))
    t0 = time.monotonic()
    link.send(b"x", b.address)
    assert b.recv(2.0)[0] == b"x"
    assert 0.045 <= time.monotonic() - t0 < 0.2
    link.close()


def test_timeouts_from_env(monkeypatch):
    monkeypatch.setenv("DOPF_RTO_MS", "250")
    monkeypatch.setenv("DOPF_MAX_ATTEMPTS", "9")
    t = Timeouts.from_env(min_rto_ms=12.0)
    assert t.rto_ms == 250.0 and t.max_attempts == 9 and t.min_rto_ms == 12.0


def test_parse_addr_and_udp_roundtrip():
    assert parse_addr("10.0.0.1:7401") == ("10.0.0.1", 7401)
    with pytest.raises(ValueError):
        parse_addr("7401")
    a, b = UdpTransport(("127.0.0.1", 0)), UdpTransport(("127.0.0.1", 0))
    a.send(b"ping", b.address)
    data, src = b.recv(2.0)
    assert data == b"ping" and src == a.address
    assert b.recv(0.05) is None
    a.close()
    b.close()
