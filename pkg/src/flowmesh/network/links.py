"""A single framed connection to a neighbouring node."""

import asyncio
from dataclasses import dataclass
from typing import Any, Awaitable, Callable, Dict, Optional

from flowmesh.exceptions import (
    FlowmeshError,
    ProtocolError,
    SelfConnection,
    TransportError,
    VersionMismatch,
)
from flowmesh.logging_config import get_logger
from flowmesh.network.framing import (
    PROTOCOL_VERSION,
    Frame,
    MessageType,
    read_frame,
    write_frame,
)

logger = get_logger(__name__)

HANDSHAKE_TIMEOUT = 10.0

FrameHandler = Callable[["Link", Frame], Awaitable[None]]


@dataclass(frozen=True)
class PeerInfo:
    """What a neighbour said about itself in its HELLO."""

    node_id: str
    display_name: str = ""
    is_relay: bool = False
    is_client: bool = False
    version: int = PROTOCOL_VERSION

    @classmethod
    def from_hello(cls, body: Dict[str, Any]) -> "PeerInfo":
        try:
            return cls(
                node_id=str(body["nodeId"]),
                display_name=str(body.get("displayName", "")),
                is_relay=bool(body.get("isRelay", False)),
                is_client=bool(body.get("client", False)),
                version=int(body["version"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"malformed HELLO: {e}") from e


def hello_body(
    node_id: str, display_name: str = "", relay: bool = False, client: bool = False
) -> Dict[str, Any]:
    return {
        "version": PROTOCOL_VERSION,
        "nodeId": node_id,
        "displayName": display_name,
        "isRelay": relay,
        "client": client,
    }


class Link:
    """Framed byte stream to one peer.

    The reader side is driven by ``run``; writes from any task are serialized
    by a lock so frames never interleave.
    """

    def __init__(self, reader: asyncio.StreamReader, writer: Any, label: str = ""):
        self.reader = reader
        self.writer = writer
        self.label = label
        self.peer: Optional[PeerInfo] = None
        self.closed = asyncio.Event()
        self.last_seen = asyncio.get_running_loop().time()
        self._write_lock = asyncio.Lock()

    @property
    def peer_id(self) -> str:
        return self.peer.node_id if self.peer else ""

    @property
    def is_closed(self) -> bool:
        return self.closed.is_set()

    def __repr__(self) -> str:
        return f"Link({self.peer_id[:8] or self.label or '?'})"

    async def send(self, frame: Frame) -> None:
        if self.is_closed:
            raise TransportError(f"link to {self.peer_id or self.label} is closed")
        async with self._write_lock:
            try:
                await write_frame(self.writer, frame)
            except (ConnectionError, OSError) as e:
                self.close()
                raise TransportError(f"write to {self.peer_id} failed: {e}") from e

    async def handshake(
        self, hello: Dict[str, Any], timeout: float = HANDSHAKE_TIMEOUT
    ) -> PeerInfo:
        """Exchange HELLO frames and check the peer.

        Raises:
            VersionMismatch: The peer speaks another protocol version.
            SelfConnection: The peer is this node.
            TransportError: The connection failed or timed out.
        """
        try:
            await self.send(Frame(MessageType.HELLO, hello))
            frame = await asyncio.wait_for(read_frame(self.reader), timeout)
        except asyncio.TimeoutError:
            self.close()
            raise TransportError("timed out waiting for HELLO") from None
        except FlowmeshError:
            self.close()
            raise
        except (ConnectionError, OSError) as e:
            self.close()
            raise TransportError(f"handshake failed: {e}") from e
        if frame is None or frame.type is not MessageType.HELLO:
            self.close()
            raise ProtocolError("expected HELLO as the first frame")
        peer = PeerInfo.from_hello(frame.body)
        if peer.version != PROTOCOL_VERSION:
            self.close()
            raise VersionMismatch(
                f"peer speaks protocol {peer.version}, expected {PROTOCOL_VERSION}",
                {"version": peer.version},
            )
        if peer.node_id == hello.get("nodeId"):
            self.close()
            raise SelfConnection("connected to this node itself")
        self.peer = peer
        self.last_seen = asyncio.get_running_loop().time()
        return peer

    async def run(self, handler: FrameHandler) -> None:
        """Read frames until the stream ends, answering link pings inline."""
        try:
            while not self.is_closed:
                frame = await read_frame(self.reader)
                if frame is None:
                    break
                self.last_seen = asyncio.get_running_loop().time()
                if frame.type is MessageType.PING and not frame.is_routed:
                    await self.send(Frame(MessageType.PONG, {}))
                    continue
                if frame.type is MessageType.PONG and not frame.is_routed:
                    continue
                await handler(self, frame)
        except ProtocolError as e:
            logger.warning("Closing %r: %s", self, e)
        except (TransportError, ConnectionError, OSError) as e:
            logger.debug("Link %r read ended: %s", self, e)
        finally:
            self.close()

    async def keepalive(self, interval: float, misses: int) -> None:
        """Ping every ``interval``; declare the link dead after ``misses``."""
        loop = asyncio.get_running_loop()
        while not self.is_closed:
            try:
                await asyncio.wait_for(self.closed.wait(), interval)
                return
            except asyncio.TimeoutError:
                pass
            if loop.time() - self.last_seen > interval * misses:
                logger.info("Link %r missed %d pings, closing", self, misses)
                self.close()
                return
            try:
                await self.send(Frame(MessageType.PING, {}))
            except TransportError:
                return

    def close(self) -> None:
        if self.is_closed:
            return
        self.closed.set()
        try:
            self.writer.close()
        except Exception:  # pragma: no cover - transport already gone
            pass
