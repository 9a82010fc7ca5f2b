import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dopf.runtime.wire import (
    HEADER_SIZE,
    Kind,
    WireError,
    WireMessage,
    decode,
    encode,
    profile_frame_size,
    profile_message,
    targets_frame_size,
    targets_message,
)


def _golden_targets(T=48):
    r = np.random.default_rng(0)
    return targets_message(0x0123456789ABCDEF, 7, 42, r.normal(0, 3, T), r.normal(0, 0.1, T), 0.5)


def test_targets_size_t1_and_t2():
    assert len(encode(_golden_targets(48), 48)) == 412 == targets_frame_size(48)
    assert len(encode(_golden_targets(96), 96)) == 796 == targets_frame_size(96)
    assert targets_frame_size(48) <= 1024 and targets_frame_size(96) <= 2048
    p = profile_message(1, 2, 3, np.ones(48), 12.34)
    assert len(encode(p, 48)) == profile_frame_size(48) == 216


def test_layout_is_bit_exact():
    msg = _golden_targets(4)
    frame = encode(msg, 4)
    body = struct.pack("<BBHQIHH", 1, 3, 7, 0x0123456789ABCDEF, 42, 9, 0)
    body += np.asarray(msg.payload, dtype="<f4").tobytes()
    assert frame == body + struct.pack("<I", zlib.crc32(body))
    hello = encode(WireMessage(Kind.HELLO, 0, 3, 0))
    assert hello[:HEADER_SIZE] == bytes([1, 1, 3, 0]) + bytes(16)


def test_roundtrip_and_targets_split():
    msg = _golden_targets()
    back = decode(encode(msg), 48)
    assert back == msg
    p_hat, lam, rho = back.targets()
    np.testing.assert_array_equal(p_hat, msg.payload[:48].astype(float))
    assert rho == 0.5
    prof = profile_message(5, 1, 9, np.arange(48.0), 3.21)
    back = decode(encode(prof))
    assert back.aux == 32 and back.kind == Kind.PROFILE
    with pytest.raises(WireError):
        prof.targets()


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(list(Kind)), st.integers(0, 2 ** 64 - 1), st.integers(0, 65535),
       st.integers(0, 2 ** 32 - 1), st.integers(1, 60),
       arrays(np.float32, 121, elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_property(kind, run, agent, k, T, values):
    if kind == Kind.TARGETS:
        payload = values[:2 * T + 1]
    elif kind == Kind.PROFILE:
        payload = values[:T]
    else:
        payload = np.zeros(0, np.float32)
    msg = WireMessage(kind, run, agent, k, payload)
    n_steps = T if kind in (Kind.TARGETS, Kind.PROFILE) else None
    assert decode(encode(msg, n_steps), n_steps) == msg


def test_every_single_bit_flip_is_detected():
    frame = bytearray(encode(_golden_targets(), 48))
    for i in range(len(frame) * 8):
        bad = bytearray(frame)
        bad[i // 8] ^= 1 << (i % 8)
        with pytest.raises(WireError):
            decode(bytes(bad), 48)


def _reseal(body):
    return body + struct.pack("<I", zlib.crc32(body))


def test_rejections():
    frame = encode(_golden_targets(), 48)
    body = frame[:-4]
    with pytest.raises(WireError):
        decode(frame[:10])
    with pytest.raises(WireError):
        decode(_reseal(bytes([2]) + body[1:]))           # version
    with pytest.raises(WireError):
        decode(_reseal(body[:1] + bytes([99]) + body[2:]))   # kind
    with pytest.raises(WireError):
        decode(_reseal(body[:-4]))                       # length field
    with pytest.raises(WireError):
        decode(frame, 96)                                # wrong horizon
    with pytest.raises(WireError):
        encode(WireMessage(Kind.HELLO, 0, 0, 0, np.ones(3)))
    with pytest.raises(WireError):
        encode(WireMessage(Kind.TARGETS, 0, 0, 0, np.ones(4)))
    with pytest.raises(WireError):
        encode(WireMessage(Kind.PROFILE, 0, 70000, 0, np.ones(4)))
    with pytest.raises(WireError):
        encode(WireMessage(Kind.PROFILE, 0, 0, 0, np.ones(20000)))
