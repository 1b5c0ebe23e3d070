"""Command-line side of the daemon connection.

The CLI connects like any other peer but says ``client: true`` in its HELLO,
so it is never announced and never receives floods. Requests are routed
frames addressed to the daemon itself.
"""

import asyncio
import secrets
from typing import Any, Dict, Optional

from flowmesh.exceptions import (
    FlowmeshError,
    TransportError,
    TransportLost,
    error_from_wire,
)
from flowmesh.logging_config import get_logger
from flowmesh.network.framing import Frame, MessageType
from flowmesh.network.links import Link, PeerInfo, hello_body

logger = get_logger(__name__)

DEFAULT_TIMEOUT = 60.0


class DaemonClient:
    """RPC client for one daemon.

    Use as an async context manager::

        async with DaemonClient("127.0.0.1", 21000) as client:
            info = await client.call("node_info")
    """

    def __init__(self, host: str, port: int, timeout: float = DEFAULT_TIMEOUT):
        self.host = host
        self.port = port
        self.timeout = timeout
        self.client_id = secrets.token_hex(16)
        self.peer: Optional[PeerInfo] = None
        self.events: "asyncio.Queue[Dict[str, Any]]" = asyncio.Queue()
        self._link: Optional[Link] = None
        self._reader_task: Optional[asyncio.Task] = None
        self._pending: Dict[str, asyncio.Future] = {}

    async def __aenter__(self) -> "DaemonClient":
        await self.connect()
        return self

    async def __aexit__(self, *exc_info: Any) -> None:
        await self.close()

    @property
    def daemon_id(self) -> str:
        return self.peer.node_id if self.peer else ""

    async def connect(self) -> PeerInfo:
        """Raises TransportError when no daemon listens at the address."""
        try:
            reader, writer = await asyncio.open_connection(self.host, self.port)
        except OSError as e:
            raise TransportError(
                f"no daemon at {self.host}:{self.port} ({e})",
                {"host": self.host, "port": self.port},
            ) from e
        self._link = Link(reader, writer, f"{self.host}:{self.port}")
        self.peer = await self._link.handshake(
            hello_body(self.client_id, "cli", client=True)
        )
        self._reader_task = asyncio.create_task(self._read())
        return self.peer

    async def _read(self) -> None:
        assert self._link is not None
        try:
            await self._link.run(self._on_frame)
        finally:
            for future in self._pending.values():
                if not future.done():
                    future.set_exception(
                        TransportLost(f"daemon {self.host}:{self.port} went away")
                    )

    async def _on_frame(self, link: Link, frame: Frame) -> None:
        envelope = frame.body
        body = envelope.get("body") or {}
        if frame.type is MessageType.RPC_RESP:
            future = self._pending.get(str(body.get("callId")))
            if future is None or future.done():
                return
            if "error" in body:
                future.set_exception(error_from_wire(body["error"]))
            else:
                future.set_result(body.get("result"))
        elif frame.type is MessageType.EVENT:
            self.events.put_nowait(body)
        elif frame.type is MessageType.PING and "dst" in envelope:
            await self._send(envelope.get("src", ""), MessageType.PONG, body)

    async def _send(self, dst: str, message_type: MessageType, body: Dict[str, Any]):
        if self._link is None:
            raise TransportError("not connected")
        await self._link.send(
            Frame(
                message_type,
                {
                    "src": self.client_id,
                    "dst": dst,
                    "ttl": 1,
                    "id": secrets.token_hex(8),
                    "body": body,
                },
            )
        )

    async def call(
        self,
        method: str,
        params: Optional[Dict[str, Any]] = None,
        timeout: Optional[float] = None,
    ) -> Any:
        """Call ``method`` on the daemon; remote errors re-raise as their type."""
        call_id = secrets.token_hex(16)
        future = asyncio.get_running_loop().create_future()
        self._pending[call_id] = future
        try:
            await self._send(
                self.daemon_id,
                MessageType.RPC_REQ,
                {"method": method, "callId": call_id, "params": params or {}},
            )
            return await asyncio.wait_for(future, timeout or self.timeout)
        except asyncio.TimeoutError:
            raise TransportLost(f"daemon did not answer {method} in time") from None
        finally:
            self._pending.pop(call_id, None)

    async def next_event(self, timeout: Optional[float] = None) -> Dict[str, Any]:
        return await asyncio.wait_for(self.events.get(), timeout)

    async def close(self) -> None:
        if self._link is not None:
            self._link.close()
        if self._reader_task is not None:
            try:
                await self._reader_task
            except FlowmeshError:
                pass
