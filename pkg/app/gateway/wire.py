"""Length-prefixed frames over TCP.

Frame = 4-byte big-endian unsigned payload length, then the payload: one
compact JSON object (UTF-8, no newline, keys sorted) whose ``type`` is one of
``turn``, ``chunk``, ``reply``, ``ping``, ``pong``, ``error``. A streamed reply
is one ``chunk`` frame at the first token followed by one ``reply`` frame.
"""
import asyncio
import json
import struct

from app.errors import ProtocolError
from app.models import TurnWire

HEADER = struct.Struct('>I')
HEADER_SIZE = HEADER.size
MAX_FRAME_BYTES = 1024 * 1024
FRAME_TYPES = ('turn', 'chunk', 'reply', 'ping', 'pong', 'error')

_TURN_INT_FIELDS = ('turn_index', 'required_context_tokens', 'new_tokens', 'output_tokens')


def encode_frame(record):
    if record.get('type') not in FRAME_TYPES:
        raise ProtocolError(f'unknown frame type {record.get("type")!r}')
    payload = json.dumps(record, sort_keys=True, separators=(',', ':'), ensure_ascii=False).encode('utf-8')
    return HEADER.pack(len(payload)) + payload


def decode_payload(payload):
    try:
        record = json.loads(payload.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f'payload is not a JSON record: {e}')
    if not isinstance(record, dict):
        raise ProtocolError('payload must be a JSON object')
    if record.get('type') not in FRAME_TYPES:
        raise ProtocolError(f'unknown frame type {record.get("type")!r}')
    return record


async def read_frame(reader, max_bytes=MAX_FRAME_BYTES):
    """
    Next record, or None on a clean end of stream
    A malformed payload raises ProtocolError with the stream still on a frame boundary
    """
    try:
        header = await reader.readexactly(HEADER_SIZE)
    except asyncio.IncompleteReadError as e:
        if not e.partial:
            return None
        raise ConnectionError('stream ended inside a frame header')
    (length,) = HEADER.unpack(header)
    if length > max_bytes:
        # Skip the payload so the next frame can still be read
        remaining = length
        while remaining:
            chunk = await reader.read(min(remaining, 65536))
            if not chunk:
                raise ConnectionError('stream ended inside an oversized frame')
            remaining -= len(chunk)
        raise ProtocolError(f'frame too large ({length} > {max_bytes} bytes)')
    try:
        payload = await reader.readexactly(length)
    except asyncio.IncompleteReadError:
        raise ConnectionError('stream ended inside a frame payload')
    return decode_payload(payload)


async def write_frame(writer, record):
    writer.write(encode_frame(record))
    await writer.drain()


def error_frame(message):
    return {'type': 'error', 'message': str(message)}


def parse_turn(record):
    """Validate a ``turn`` record into a TurnWire"""
    session = record.get('session_id')
    if not isinstance(session, str) or not session:
        raise ProtocolError('session_id must be a non-empty string')
    values = {}
    for name in _TURN_INT_FIELDS:
        value = record.get(name)
        if isinstance(value, bool) or not isinstance(value, int) or value < 0:
            raise ProtocolError(f'{name} must be a non-negative integer')
        values[name] = value
    return TurnWire(session_id=session, **values)
