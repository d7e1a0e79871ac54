import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spindle.executors.wire import (
    Opcode,
    ProtocolError,
    WireFrame,
    decode_frame,
    encode_frame,
    pack_call,
    read_frame,
    unpack_call,
)

frames = st.builds(
    WireFrame,
    st.sampled_from(list(Opcode)),
    st.integers(0, 2**64 - 1),
    st.binary(max_size=4096),
)


def reference_encoding(op: int, task_id: int, payload: bytes) -> bytes:
    # hand-built layout: u32 LE length of (opcode + task id + payload), u8, u64 LE, payload
    return (1 + 8 + len(payload)).to_bytes(4, "little") + bytes([op]) + task_id.to_bytes(8, "little") + payload


@given(frames)
def test_encoding_matches_reference_layout(frame):
    assert encode_frame(frame) == reference_encoding(frame.opcode, frame.task_id, frame.payload)


def test_known_frame_bytes():
    data = encode_frame(WireFrame(Opcode.RESULT, 0x0102, b"\xde\xad"))
    assert data.hex() == "0b000000" + "01" + "0201000000000000" + "dead"


@given(st.lists(frames, max_size=8))
def test_stream_of_frames(fs):
    stream = io.BytesIO(b"".join(encode_frame(f) for f in fs))
    got = []
    while (f := read_frame(stream)) is not None:
        got.append(f)
    assert got == fs


def test_sixteen_mebibyte_payload():
    payload = bytes(range(256)) * (16 * 1024 * 4)
    assert len(payload) == 16 * 2**20
    frame = WireFrame(Opcode.CALL, 2**64 - 1, payload)
    assert decode_frame(encode_frame(frame)) == frame
    assert read_frame(io.BytesIO(encode_frame(frame))) == frame


def test_unknown_opcode():
    with pytest.raises(ProtocolError, match="opcode 9"):
        decode_frame(reference_encoding(9, 1, b""))


@pytest.mark.parametrize(
    "data",
    [b"", b"\x05\x00", reference_encoding(0, 1, b"abc")[:-1], reference_encoding(0, 1, b"abc") + b"x"],
)
def test_decode_rejects_bad_lengths(data):
    with pytest.raises(ProtocolError):
        decode_frame(data)


def test_body_shorter_than_header():
    with pytest.raises(ProtocolError):
        decode_frame(b"\x02\x00\x00\x00\x00\x00")


def test_read_frame_eof_handling():
    assert read_frame(io.BytesIO(b"")) is None
    with pytest.raises(ProtocolError):
        read_frame(io.BytesIO(b"\x10\x00"))
    with pytest.raises(ProtocolError):
        read_frame(io.BytesIO(reference_encoding(1, 3, b"xyz")[:-2]))


def test_task_id_out_of_range():
    with pytest.raises(ProtocolError):
        encode_frame(WireFrame(Opcode.CALL, 2**64))


@given(st.text(max_size=50), st.binary(max_size=200))
def test_call_payload_round_trip(name, arg):
    assert unpack_call(pack_call(name, arg)) == (name, arg)


def test_truncated_call_payload():
    with pytest.raises(ProtocolError):
        unpack_call(b"\x01")
    with pytest.raises(ProtocolError):
        unpack_call(b"\x05\x00ab")
