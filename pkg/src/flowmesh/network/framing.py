"""Wire framing shared by TCP links, the CLI client and simulated links.

A frame is ``length`` (uint32 big-endian, counting the type byte and the
payload), ``type`` (uint8) and a UTF-8 JSON payload with sorted keys and no
whitespace. Encoding is deterministic, so a frame forwarded by a relay is
byte-identical to the one it received.
"""

import asyncio
import json
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Dict, List, Optional, Tuple

from flowmesh.exceptions import ProtocolError, TransportError

PROTOCOL_VERSION = 1
MAX_FRAME = 1024 * 1024
HEADER = struct.Struct(">IB")
LENGTH = struct.Struct(">I")


class MessageType(IntEnum):
    HELLO = 1
    ANNOUNCE = 2
    PUBLISH_SET = 3
    GROUP_CHALLENGE = 4
    GROUP_PROOF = 5
    QUERY = 6
    QUERY_RESULT = 7
    RPC_REQ = 8
    RPC_RESP = 9
    DATA_CHUNK = 10
    EVENT = 11
    PING = 12
    PONG = 13
    NACK = 14


# Frames that travel inside a {src, dst, ttl, id, body} envelope.
ROUTED_TYPES = frozenset(
    {
        MessageType.GROUP_CHALLENGE,
        MessageType.GROUP_PROOF,
        MessageType.QUERY,
        MessageType.QUERY_RESULT,
        MessageType.RPC_REQ,
        MessageType.RPC_RESP,
        MessageType.DATA_CHUNK,
        MessageType.EVENT,
        MessageType.NACK,
    }
)


@dataclass(frozen=True)
class Frame:
    type: MessageType
    body: Dict[str, Any] = field(default_factory=dict)

    @property
    def is_routed(self) -> bool:
        # PING/PONG are link-local unless they carry a destination.
        return self.type in ROUTED_TYPES or "dst" in self.body


def encode_payload(body: Dict[str, Any]) -> bytes:
    return json.dumps(
        body, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def encode_frame(frame: Frame) -> bytes:
    """Serialize a frame including its length header.

    Raises:
        ProtocolError: The encoded frame exceeds ``MAX_FRAME``.
    """
    payload = encode_payload(frame.body)
    length = 1 + len(payload)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(length, int(frame.type)) + payload


def decode_frame(data: bytes) -> Frame:
    """Decode the type byte and payload (everything after the length header)."""
    if not data:
        raise ProtocolError("empty frame")
    try:
        message_type = MessageType(data[0])
    except ValueError:
        raise ProtocolError(f"unknown message type {data[0]}") from None
    try:
        body = json.loads(data[1:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"malformed {message_type.name} payload: {e}") from e
    if not isinstance(body, dict):
        raise ProtocolError(f"{message_type.name} payload must be an object")
    return Frame(message_type, body)


def split_frames(buffer: bytes) -> Tuple[List[Frame], bytes]:
    """Decode every complete frame in ``buffer``; returns (frames, remainder)."""
    frames = []
    while len(buffer) >= LENGTH.size:
        (length,) = LENGTH.unpack_from(buffer)
        _check_length(length)
        end = LENGTH.size + length
        if len(buffer) < end:
            break
        frames.append(decode_frame(buffer[LENGTH.size : end]))
        buffer = buffer[end:]
    return frames, buffer


def _check_length(length: int) -> None:
    if length < 1 or length > MAX_FRAME:
        raise ProtocolError(f"invalid frame length {length}")


async def read_frame(reader: asyncio.StreamReader) -> Optional[Frame]:
    """Read one frame; ``None`` on a clean end of stream.

    Raises:
        ProtocolError: Bad length, type or payload.
        TransportError: The stream ended inside a frame.
    """
    try:
        header = await reader.readexactly(LENGTH.size)
    except asyncio.IncompleteReadError as e:
        if not e.partial:
            return None
        raise TransportError("connection closed inside a frame header") from e
    (length,) = LENGTH.unpack(header)
    _check_length(length)
    try:
        data = await reader.readexactly(length)
    except asyncio.IncompleteReadError as e:
        raise TransportError(
            f"connection closed after {len(e.partial)} of {length} bytes"
        ) from e
    return decode_frame(data)


async def write_frame(writer: Any, frame: Frame) -> None:
    writer.write(encode_frame(frame))
    await writer.drain()
