import asyncio
import json

import pytest

from app.errors import ProtocolError
from app.gateway.wire import (HEADER, decode_payload, encode_frame, error_frame, parse_turn, read_frame,
                              write_frame)
from app.models import TurnReply, TurnWire


def _reader(data, eof=True):
    reader = asyncio.StreamReader()
    reader.feed_data(data)
    if eof:
        reader.feed_eof()
    return reader


def _read_all(data, max_bytes=None):
    async def go():
        reader = _reader(data)
        out = []
        while True:
            try:
                record = await read_frame(reader, max_bytes) if max_bytes else await read_frame(reader)
            except ProtocolError as e:
                out.append(e)
                continue
            if record is None:
                return out
            out.append(record)
    return asyncio.run(go())


class _Writer:
    def __init__(self):
        self.data = b''

    def write(self, data):
        self.data += data

    async def drain(self):
        pass


def test_encode_ping_bytes():
    assert encode_frame({'type': 'ping'}) == b'\x00\x00\x00\x0f{"type":"ping"}'


def test_encode_is_compact_and_sorted():
    frame = encode_frame({'type': 'chunk', 'node_id': 'node-1', 'b': 1})
    payload = frame[HEADER.size:]
    assert HEADER.unpack(frame[:HEADER.size]) == (len(payload),)
    assert payload == b'{"b":1,"node_id":"node-1","type":"chunk"}'


def test_encode_rejects_unknown_type():
    with pytest.raises(ProtocolError):
        encode_frame({'type': 'hello'})
    with pytest.raises(ProtocolError):
        encode_frame({})


def test_read_frames_in_sequence():
    wire = TurnWire('s1', 0, 2450, 2450, 40)
    data = encode_frame(wire.to_record()) + encode_frame({'type': 'ping'})
    records = _read_all(data)
    assert parse_turn(records[0]) == wire
    assert records[1] == {'type': 'ping'}


def test_clean_eof_returns_none():
    assert _read_all(b'') == []


def test_truncated_frames_raise_connection_error():
    frame = encode_frame({'type': 'ping'})
    for cut in (2, len(frame) - 3):
        with pytest.raises(ConnectionError):
            _read_all(frame[:cut])


def test_malformed_payload_keeps_frame_boundary():
    bad = b'{nope'
    data = HEADER.pack(len(bad)) + bad + encode_frame({'type': 'ping'})
    out = _read_all(data)
    assert isinstance(out[0], ProtocolError)
    assert out[1] == {'type': 'ping'}


def test_oversized_frame_is_skipped():
    big = encode_frame({'type': 'error', 'message': 'x' * 200})
    out = _read_all(big + encode_frame({'type': 'pong'}), max_bytes=64)
    assert isinstance(out[0], ProtocolError)
    assert 'too large' in str(out[0])
    assert out[1] == {'type': 'pong'}


def test_decode_payload_errors():
    for payload in (b'\xff\xfe', b'[1, 2]', b'{"type": "hello"}', b'not json'):
        with pytest.raises(ProtocolError):
            decode_payload(payload)


def test_write_frame():
    writer = _Writer()
    asyncio.run(write_frame(writer, error_frame('boom')))
    assert writer.data == encode_frame({'type': 'error', 'message': 'boom'})


def test_parse_turn_validation():
    good = TurnWire('s1', 3, 100, 10, 5).to_record()
    assert parse_turn(good).turn_index == 3
    for field, value in (('session_id', ''), ('session_id', 7), ('turn_index', -1),
                         ('new_tokens', 1.5), ('output_tokens', True), ('required_context_tokens', None)):
        with pytest.raises(ProtocolError):
            parse_turn({**good, field: value})


def test_reply_record_shape():
    reply = TurnReply('node-1', hit_tokens=2450, miss_tokens=128, prefill_ms=23.0, tpot_samples=[20.5])
    record = json.loads(encode_frame(reply.to_record())[HEADER.size:])
    assert record['type'] == 'reply'
    assert record['cache'] == {'hit_tokens': 2450, 'miss_tokens': 128, 'cold_start': False}
    assert record['timing']['prefill_ms'] == 23.0
    assert reply.ok
