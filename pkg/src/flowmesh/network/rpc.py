"""Request/response calls over routed frames.

``RPC_REQ`` bodies are ``{method, callId, params}``; ``RPC_RESP`` bodies are
``{callId, result}`` or ``{callId, error: {code, message, detail}}``. A host
serves each ``(caller, callId)`` once and answers duplicates from its cache.
While a call is outstanding the caller pings the destination end to end and
fails the call with ``TransportLost`` when the pings stop coming back.
"""

import asyncio
import secrets
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Awaitable, Callable, Dict, Optional, Tuple

from flowmesh.exceptions import (
    CallTimeout,
    FlowmeshError,
    ProtocolError,
    TransportError,
    TransportLost,
    error_from_wire,
)
from flowmesh.logging_config import get_logger
from flowmesh.network.framing import MessageType
from flowmesh.network.mesh import Envelope, Mesh

logger = get_logger(__name__)

SERVED_CACHE_SIZE = 4096
DEFAULT_CALL_TIMEOUT = 7200.0


@dataclass(frozen=True)
class CallContext:
    """Who is calling: the origin node and the neighbour the call came through."""

    caller: str
    call_id: str
    via: Optional[str] = None


RpcHandler = Callable[[Dict[str, Any], CallContext], Awaitable[Any]]


@dataclass
class _PendingCall:
    dst: str
    method: str
    future: asyncio.Future
    hop: Optional[str] = None
    started: float = 0.0
    watcher: Optional[asyncio.Task] = field(default=None, repr=False)

    def fail(self, error: BaseException) -> None:
        if not self.future.done():
            self.future.set_exception(error)


_IN_PROGRESS = object()


class RpcEndpoint:
    """Client and server side of RPC for one node."""

    def __init__(self, mesh: Mesh, call_timeout: float = DEFAULT_CALL_TIMEOUT):
        self.mesh = mesh
        self.call_timeout = call_timeout
        self._methods: Dict[str, RpcHandler] = {}
        self._pending: Dict[str, _PendingCall] = {}
        self._served: "OrderedDict[Tuple[str, str], Any]" = OrderedDict()
        self._last_pong: Dict[str, float] = {}
        mesh.on(MessageType.RPC_REQ, self._on_request)
        mesh.on(MessageType.RPC_RESP, self._on_response)
        mesh.on(MessageType.PONG, self._on_pong)
        mesh.on(MessageType.NACK, self._on_nack)
        mesh.link_down_listeners.append(self._on_link_down)

    def register(self, method: str, handler: RpcHandler) -> None:
        self._methods[method] = handler

    @property
    def methods(self) -> Tuple[str, ...]:
        return tuple(sorted(self._methods))

    # --- calling ------------------------------------------------------------

    async def call(
        self,
        dst: str,
        method: str,
        params: Optional[Dict[str, Any]] = None,
        timeout: Optional[float] = None,
    ) -> Any:
        """Invoke ``method`` on ``dst`` and return its result.

        Raises:
            NoRoute: ``dst`` is unknown.
            TransportLost: The destination stopped answering.
            CallTimeout: No answer within ``timeout`` (default ``call_timeout``).
            FlowmeshError: Whatever the remote handler raised, rebuilt locally.
        """
        loop = asyncio.get_running_loop()
        call_id = secrets.token_hex(16)
        pending = _PendingCall(
            dst=dst,
            method=method,
            future=loop.create_future(),
            hop=self.mesh.routes.get(dst),
            started=loop.time(),
        )
        self._pending[call_id] = pending
        try:
            try:
                await self.mesh.send_to(
                    dst,
                    MessageType.RPC_REQ,
                    {"method": method, "callId": call_id, "params": params or {}},
                )
            except TransportError as e:
                raise TransportLost(f"{method} to {dst}: {e}", {"nodeId": dst}) from e
            if dst != self.mesh.node_id:
                pending.watcher = asyncio.create_task(self._watch(call_id))
            deadline = self.call_timeout if timeout is None else timeout
            try:
                return await asyncio.wait_for(pending.future, deadline)
            except asyncio.TimeoutError:
                raise CallTimeout(
                    f"{method} to {dst} got no answer in {deadline}s", {"nodeId": dst}
                ) from None
        finally:
            self._pending.pop(call_id, None)
            if pending.watcher is not None:
                pending.watcher.cancel()

    async def _watch(self, call_id: str) -> None:
        loop = asyncio.get_running_loop()
        interval = self.mesh.ping_interval
        limit = interval * self.mesh.ping_misses
        while True:
            await asyncio.sleep(interval)
            pending = self._pending.get(call_id)
            if pending is None or pending.future.done():
                return
            last = max(self._last_pong.get(pending.dst, 0.0), pending.started)
            if loop.time() - last > limit:
                pending.fail(
                    TransportLost(
                        f"{pending.dst} stopped answering during {pending.method}",
                        {"nodeId": pending.dst},
                    )
                )
                return
            try:
                await self.mesh.send_to(
                    pending.dst, MessageType.PING, {"nonce": secrets.token_hex(4)}
                )
            except FlowmeshError as e:
                pending.fail(
                    TransportLost(
                        f"lost {pending.dst} during {pending.method}: {e}",
                        {"nodeId": pending.dst},
                    )
                )
                return

    def _on_pong(self, envelope: Envelope) -> None:
        self._last_pong[envelope.src] = asyncio.get_running_loop().time()

    def _on_nack(self, envelope: Envelope) -> None:
        dst = envelope.body.get("dst")
        for pending in list(self._pending.values()):
            if pending.dst == dst:
                pending.fail(
                    TransportLost(
                        f"{dst} unreachable ({envelope.body.get('code')})",
                        {"nodeId": dst},
                    )
                )

    def _on_link_down(self, peer_id: str) -> None:
        for pending in list(self._pending.values()):
            if pending.hop == peer_id or pending.dst == peer_id:
                pending.fail(
                    TransportLost(
                        f"link to {peer_id} closed during {pending.method}",
                        {"nodeId": pending.dst},
                    )
                )

    def _on_response(self, envelope: Envelope) -> None:
        body = envelope.body
        pending = self._pending.get(str(body.get("callId")))
        if pending is None or pending.future.done():
            return
        if pending.dst != envelope.src:
            logger.warning(
                "Ignoring response for %s from %s", body.get("callId"), envelope.src
            )
            return
        if "error" in body:
            pending.future.set_exception(error_from_wire(body["error"]))
        else:
            pending.future.set_result(body.get("result"))

    # --- serving ------------------------------------------------------------

    def _on_request(self, envelope: Envelope) -> None:
        call_id = str(envelope.body.get("callId", ""))
        key = (envelope.src, call_id)
        cached = self._served.get(key)
        if cached is _IN_PROGRESS:
            logger.debug("Call %s from %s already running", call_id, envelope.src)
            return
        if isinstance(cached, dict):
            logger.debug("Repeating response to call %s", call_id)
            self.mesh.spawn(self._respond(envelope.src, cached), name="rpc-resp")
            return
        self._served[key] = _IN_PROGRESS
        while len(self._served) > SERVED_CACHE_SIZE:
            self._served.popitem(last=False)
        self.mesh.spawn(self._serve(envelope, key), name=f"rpc-{call_id[:8]}")

    async def _serve(self, envelope: Envelope, key: Tuple[str, str]) -> None:
        method = envelope.body.get("method")
        params = envelope.body.get("params") or {}
        context = CallContext(envelope.src, key[1], envelope.via)
        try:
            handler = self._methods.get(str(method))
            if handler is None:
                raise ProtocolError(f"unknown method {method!r}", {"method": method})
            result = await handler(params, context)
            response: Dict[str, Any] = {"callId": key[1], "result": result}
        except FlowmeshError as e:
            response = {"callId": key[1], "error": e.to_wire()}
        except Exception as e:
            logger.exception("RPC %s from %s failed", method, envelope.src)
            response = {"callId": key[1], "error": FlowmeshError(str(e)).to_wire()}
        self._served[key] = response
        await self._respond(envelope.src, response)

    async def _respond(self, dst: str, response: Dict[str, Any]) -> None:
        try:
            await self.mesh.send_to(dst, MessageType.RPC_RESP, response)
        except FlowmeshError as e:
            logger.warning("Cannot deliver response to %s: %s", dst, e)
