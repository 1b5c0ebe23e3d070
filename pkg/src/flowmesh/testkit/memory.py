"""In-memory links between simulated nodes.

A ``MemoryWire`` connects two ``asyncio.StreamReader`` objects through
writer stand-ins. Bytes written on one end are cut into frames with the real
codec, passed through the wire's fault rules, re-encoded (byte-identical when
untouched) and fed to the other end after the configured delay.
"""

import asyncio
import base64
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

from flowmesh.logging_config import get_logger
from flowmesh.network.framing import Frame, MessageType, encode_frame, split_frames

logger = get_logger(__name__)

FramePredicate = Callable[[Frame], bool]


@dataclass
class FaultRule:
    """Drop or corrupt frames matching ``predicate``; ``count`` 0 means forever."""

    action: str
    predicate: FramePredicate
    count: int = 0
    hits: int = 0

    def matches(self, frame: Frame) -> bool:
        if self.count and self.hits >= self.count:
            return False
        if not self.predicate(frame):
            return False
        self.hits += 1
        return True


def of_type(*types: MessageType) -> FramePredicate:
    return lambda frame: frame.type in types


def corrupt_chunk(frame: Frame) -> Frame:
    """Flip the first byte of a DATA_CHUNK's data."""
    envelope = dict(frame.body)
    body = dict(envelope["body"])
    data = bytearray(base64.b64decode(body["data"]))
    if data:
        data[0] ^= 0xFF
    body["data"] = base64.b64encode(bytes(data)).decode("ascii")
    envelope["body"] = body
    return Frame(frame.type, envelope)


class _WriterEnd:
    """The subset of ``asyncio.StreamWriter`` that links use."""

    def __init__(self, wire: "MemoryWire", direction: int):
        self._wire = wire
        self._direction = direction

    def write(self, data: bytes) -> None:
        self._wire._transmit(self._direction, data)

    async def drain(self) -> None:
        await asyncio.sleep(0)

    def close(self) -> None:
        self._wire.cut()

    def is_closing(self) -> bool:
        return self._wire.dead

    async def wait_closed(self) -> None:
        return None

    def get_extra_info(self, name: str, default: Any = None) -> Any:
        if name == "peername":
            return (self._wire.ends[1 - self._direction], 0)
        return default


@dataclass
class WireStats:
    frames: int = 0
    dropped: int = 0
    corrupted: int = 0
    by_type: Dict[str, int] = field(default_factory=dict)


class MemoryWire:
    """A bidirectional simulated link between the nodes named in ``ends``.

    Args:
        ends: Names of the two endpoints (for traces).
        delay: Seconds every frame spends on the wire.
        loss: Probability of silently losing a frame (seeded by ``rng``).
        rng: Random source for loss decisions.
    """

    def __init__(
        self,
        ends: Tuple[str, str],
        delay: float = 0.0,
        loss: float = 0.0,
        rng: Optional[random.Random] = None,
        trace: Optional[Callable[[str, Dict[str, Any]], None]] = None,
    ):
        self.ends = ends
        self.delay = delay
        self.loss = loss
        self.rng = rng or random.Random(0)
        self.trace = trace
        self.readers = (asyncio.StreamReader(), asyncio.StreamReader())
        self.writers = (_WriterEnd(self, 0), _WriterEnd(self, 1))
        self.rules: List[FaultRule] = []
        self.stats = WireStats()
        self.dead = False
        self.stalled = False
        self.in_flight = 0
        self._buffers = [b"", b""]

    def endpoint(self, index: int) -> Tuple[asyncio.StreamReader, _WriterEnd]:
        """Reader/writer pair for end ``index``: it reads what the other end writes."""
        return self.readers[index], self.writers[index]

    # --- faults -------------------------------------------------------------

    def drop(self, predicate: FramePredicate, count: int = 0) -> FaultRule:
        rule = FaultRule("drop", predicate, count)
        self.rules.append(rule)
        return rule

    def corrupt(self, predicate: FramePredicate, count: int = 1) -> FaultRule:
        rule = FaultRule("corrupt", predicate, count)
        self.rules.append(rule)
        return rule

    def stall(self) -> None:
        """Swallow all further traffic without closing either end."""
        self.stalled = True

    def cut(self) -> None:
        """Close the wire: both ends see end-of-stream."""
        if self.dead:
            return
        self.dead = True
        for reader in self.readers:
            reader.feed_eof()

    # --- transport ----------------------------------------------------------

    def _transmit(self, direction: int, data: bytes) -> None:
        if self.dead or self.stalled:
            return
        frames, rest = split_frames(self._buffers[direction] + data)
        self._buffers[direction] = rest
        target = self.readers[1 - direction]
        for frame in frames:
            frame = self._apply_faults(direction, frame)
            if frame is None:
                continue
            payload = encode_frame(frame)
            if self.delay > 0:
                self.in_flight += 1
                asyncio.get_running_loop().call_later(
                    self.delay, self._deliver, target, payload
                )
            else:
                target.feed_data(payload)

    def _deliver(self, target: asyncio.StreamReader, payload: bytes) -> None:
        self.in_flight -= 1
        if not self.dead and not self.stalled:
            target.feed_data(payload)

    def _apply_faults(self, direction: int, frame: Frame) -> Optional[Frame]:
        self.stats.frames += 1
        name = frame.type.name
        self.stats.by_type[name] = self.stats.by_type.get(name, 0) + 1
        if self.trace is not None:
            self.trace(
                "wire",
                {
                    "from": self.ends[direction],
                    "to": self.ends[1 - direction],
                    "type": name,
                },
            )
        if self.loss and self.rng.random() < self.loss:
            self.stats.dropped += 1
            return None
        for rule in self.rules:
            if not rule.matches(frame):
                continue
            if rule.action == "drop":
                self.stats.dropped += 1
                logger.debug("Dropping %s on %s", name, self.ends)
                return None
            if rule.action == "corrupt" and frame.type is MessageType.DATA_CHUNK:
                self.stats.corrupted += 1
                logger.debug("Corrupting %s on %s", name, self.ends)
                frame = corrupt_chunk(frame)
        return frame
