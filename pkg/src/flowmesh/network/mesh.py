"""Announcement flooding and reverse-path routing between nodes.

Every node floods a ``NodeAnnouncement`` and its public publication list.
A receiver accepts a flood entry when its ``seq`` is newer than the one it
knows, or equal while it has no route to the origin; it then points
``routes[origin]`` at the neighbour it came from. Only relays pass entries
and routed frames on to other neighbours.

Routed frames travel in an envelope ``{src, dst, ttl, id, body}``. The TTL is
decremented at every forwarding hop; the body is never touched.
"""

import asyncio
import contextvars
import secrets
import time
from dataclasses import dataclass
from typing import (
    Any,
    Callable,
    Coroutine,
    Dict,
    List,
    Optional,
    Set,
    Tuple,
)

from flowmesh.exceptions import (
    FlowmeshError,
    NoRoute,
    ProtocolError,
    TransportError,
)
from flowmesh.logging_config import bind_node, get_logger
from flowmesh.models.records import NodeAnnouncement, PublicationRecord
from flowmesh.network.framing import Frame, MessageType
from flowmesh.network.identity import publications_digest
from flowmesh.network.links import Link, PeerInfo, hello_body

logger = get_logger(__name__)

DEFAULT_TTL = 16
NACK_UNREACHABLE = "UNREACHABLE"
NACK_TTL_EXCEEDED = "TTL_EXCEEDED"


@dataclass(frozen=True)
class Envelope:
    """A routed frame as delivered to a local handler."""

    type: MessageType
    src: str
    dst: str
    ttl: int
    id: str
    body: Dict[str, Any]
    via: Optional[str] = None

    @classmethod
    def from_frame(cls, frame: Frame, via: Optional[str]) -> "Envelope":
        data = frame.body
        try:
            return cls(
                type=frame.type,
                src=str(data["src"]),
                dst=str(data["dst"]),
                ttl=int(data["ttl"]),
                id=str(data["id"]),
                body=dict(data.get("body") or {}),
                via=via,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"malformed {frame.type.name} envelope: {e}") from e

    def to_frame(self, ttl: Optional[int] = None) -> Frame:
        return Frame(
            self.type,
            {
                "src": self.src,
                "dst": self.dst,
                "ttl": self.ttl if ttl is None else ttl,
                "id": self.id,
                "body": self.body,
            },
        )


Handler = Callable[[Envelope], None]
TraceSink = Callable[[str, Dict[str, Any]], None]


class Mesh:
    """Links, flood state and the routing table of one node.

    Args:
        node_id: This node's id.
        display_name: Name shown in announcements.
        relay: Forward floods and routed frames between neighbours.
        ttl: Hop budget of frames this node originates.
        ping_interval: Link ping period in seconds.
        ping_misses: Missed pings before a link is declared dead.
        make_id: Source of frame ids.
        initial_seq: First announcement sequence number; defaults to the
            current time in milliseconds so restarts still move forward.
        trace: Receives ``(kind, detail)`` for every frame sent or received.
    """

    def __init__(
        self,
        node_id: str,
        display_name: str = "",
        relay: bool = False,
        ttl: int = DEFAULT_TTL,
        ping_interval: float = 5.0,
        ping_misses: int = 3,
        make_id: Optional[Callable[[], str]] = None,
        initial_seq: Optional[int] = None,
        trace: Optional[TraceSink] = None,
    ):
        self.node_id = node_id
        self.display_name = display_name
        self.relay = relay
        self.ttl = ttl
        self.ping_interval = ping_interval
        self.ping_misses = ping_misses
        self.make_id = make_id or (lambda: secrets.token_hex(8))
        self.trace = trace

        self.links: Dict[str, Link] = {}
        self.routes: Dict[str, str] = {}
        self.announcements: Dict[str, NodeAnnouncement] = {}
        self.publication_sets: Dict[str, Tuple[int, List[PublicationRecord]]] = {}

        self.seq = initial_seq if initial_seq is not None else int(time.time() * 1000)
        self._public: List[PublicationRecord] = []
        self._digest = publications_digest([])
        self._groups: Tuple[str, ...] = ()

        self._handlers: Dict[MessageType, List[Handler]] = {}
        self.link_up_listeners: List[Callable[[str], None]] = []
        self.link_down_listeners: List[Callable[[str], None]] = []
        self.announcement_listeners: List[Callable[[NodeAnnouncement], None]] = []
        self._tasks: Set[asyncio.Task] = set()
        self._link_tasks: Set[asyncio.Task] = set()
        self._server: Optional[asyncio.AbstractServer] = None

    # --- state --------------------------------------------------------------

    @property
    def announcement(self) -> NodeAnnouncement:
        return NodeAnnouncement(
            node_id=self.node_id,
            display_name=self.display_name,
            is_relay=self.relay,
            seq=self.seq,
            publications_digest=self._digest,
            groups=self._groups,
        )

    def known_nodes(self) -> List[str]:
        return sorted(self.announcements)

    def is_reachable(self, node_id: str) -> bool:
        return node_id == self.node_id or node_id in self.routes

    def remote_publications(self) -> List[PublicationRecord]:
        """Public publications of every reachable remote node."""
        found = []
        for node_id, (_, records) in sorted(self.publication_sets.items()):
            if self.is_reachable(node_id):
                found.extend(records)
        return found

    def peers(self) -> List[PeerInfo]:
        return [link.peer for link in self.links.values() if link.peer is not None]

    # --- background tasks ---------------------------------------------------

    def spawn(self, coro: Coroutine[Any, Any, Any], name: str = "") -> asyncio.Task:
        """Run short-lived work without blocking the link readers."""
        task = self._create_task(coro, name or None)
        self._tasks.add(task)
        task.add_done_callback(self._task_done)
        return task

    def _spawn_link_task(self, coro: Coroutine[Any, Any, Any], name: str) -> None:
        task = self._create_task(coro, name)
        self._link_tasks.add(task)
        task.add_done_callback(self._task_done)

    def _create_task(
        self, coro: Coroutine[Any, Any, Any], name: Optional[str]
    ) -> asyncio.Task:
        # the task copies this context, so its records name this node
        context = contextvars.copy_context()
        context.run(bind_node, self.node_id)
        return context.run(asyncio.create_task, coro, name=name)

    def _task_done(self, task: asyncio.Task) -> None:
        self._tasks.discard(task)
        self._link_tasks.discard(task)
        if task.cancelled():
            return
        error = task.exception()
        if error is not None and not isinstance(error, FlowmeshError):
            logger.error(
                "Background task %s failed", task.get_name(), exc_info=error
            )

    @property
    def busy(self) -> bool:
        """True while short-lived work spawned by this node is pending."""
        return any(not t.done() for t in self._tasks)

    # --- handlers -----------------------------------------------------------

    def on(self, message_type: MessageType, handler: Handler) -> None:
        self._handlers.setdefault(message_type, []).append(handler)

    def _dispatch(self, envelope: Envelope) -> None:
        handlers = self._handlers.get(envelope.type, [])
        if not handlers:
            logger.debug("No handler for %s from %s", envelope.type.name, envelope.src)
        for handler in list(handlers):
            try:
                handler(envelope)
            except Exception:
                logger.exception("Handler for %s failed", envelope.type.name)

    def _trace(self, kind: str, frame: Frame, peer: str = "") -> None:
        if self.trace is None:
            return
        body = frame.body
        self.trace(
            kind,
            {
                "node": self.node_id,
                "type": frame.type.name,
                "peer": peer,
                "src": body.get("src", body.get("nodeId", "")),
                "dst": body.get("dst", ""),
                "id": body.get("id", body.get("seq", "")),
            },
        )

    # --- links --------------------------------------------------------------

    async def listen(self, host: str, port: int) -> Tuple[str, int]:
        self._server = await asyncio.start_server(self._accept, host, port)
        address = self._server.sockets[0].getsockname()
        logger.info("Listening on %s:%s", address[0], address[1])
        return address[0], address[1]

    async def _accept(self, reader: asyncio.StreamReader, writer: Any) -> None:
        try:
            await self.attach(reader, writer)
        except FlowmeshError as e:
            logger.warning("Rejected incoming connection: %s", e)

    async def connect(self, host: str, port: int) -> PeerInfo:
        """Open a TCP link to ``host:port``.

        Raises:
            TransportError: The peer is not reachable.
            VersionMismatch / SelfConnection: The handshake was refused.
        """
        try:
            reader, writer = await asyncio.open_connection(host, port)
        except OSError as e:
            raise TransportError(f"cannot connect to {host}:{port}: {e}") from e
        return await self.attach(reader, writer, label=f"{host}:{port}")

    async def attach(
        self, reader: asyncio.StreamReader, writer: Any, label: str = ""
    ) -> PeerInfo:
        """Handshake over an open stream and start serving it."""
        link = Link(reader, writer, label)
        peer = await link.handshake(
            hello_body(self.node_id, self.display_name, self.relay)
        )
        existing = self.links.get(peer.node_id)
        if existing is not None and not existing.is_closed:
            logger.info("Collapsing duplicate link to %s", peer.node_id)
            link.close()
            return existing.peer or peer
        self.links[peer.node_id] = link
        self.routes[peer.node_id] = peer.node_id
        logger.info(
            "Link up: %s (%s%s)",
            peer.node_id,
            peer.display_name or "-",
            ", relay" if peer.is_relay else (", client" if peer.is_client else ""),
        )
        self._spawn_link_task(self._serve(link), name=f"link-{peer.node_id}")
        self._spawn_link_task(
            link.keepalive(self.ping_interval, self.ping_misses),
            name=f"link-keepalive-{peer.node_id}",
        )
        if not peer.is_client:
            await self._greet(link)
        for listener in list(self.link_up_listeners):
            listener(peer.node_id)
        return peer

    async def _greet(self, link: Link) -> None:
        frames = [
            Frame(MessageType.ANNOUNCE, self.announcement.to_json()),
            Frame(MessageType.PUBLISH_SET, self._publish_set_body()),
        ]
        if self.relay:
            for node_id, ann in sorted(self.announcements.items()):
                if node_id == link.peer_id:
                    continue
                frames.append(Frame(MessageType.ANNOUNCE, ann.to_json()))
                if node_id in self.publication_sets:
                    seq, records = self.publication_sets[node_id]
                    frames.append(
                        Frame(
                            MessageType.PUBLISH_SET,
                            _publish_set(node_id, seq, records),
                        )
                    )
        for frame in frames:
            await self._send_on(link, frame)

    async def _serve(self, link: Link) -> None:
        try:
            await link.run(self._on_frame)
        finally:
            self._link_down(link)

    def _link_down(self, link: Link) -> None:
        peer_id = link.peer_id
        if self.links.get(peer_id) is not link:
            return
        del self.links[peer_id]
        for dst, hop in list(self.routes.items()):
            if hop == peer_id:
                del self.routes[dst]
        logger.info("Link down: %s", peer_id)
        for listener in list(self.link_down_listeners):
            try:
                listener(peer_id)
            except Exception:
                logger.exception("Link-down listener failed")

    def drop_link(self, peer_id: str) -> None:
        link = self.links.get(peer_id)
        if link is not None:
            link.close()
            self._link_down(link)

    async def _send_on(self, link: Link, frame: Frame) -> bool:
        try:
            await link.send(frame)
        except TransportError as e:
            logger.debug("Send to %s failed: %s", link.peer_id, e)
            return False
        self._trace("send", frame, link.peer_id)
        return True

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        for link in list(self.links.values()):
            link.close()
        tasks = [*self._tasks, *self._link_tasks]
        for task in tasks:
            task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)

    # --- flooding -----------------------------------------------------------

    def update_local(
        self,
        public: List[PublicationRecord],
        all_records: List[PublicationRecord],
        groups: List[str],
    ) -> None:
        """Bump ``seq`` after a publication change and flood the new state."""
        self.seq += 1
        self._public = list(public)
        self._digest = publications_digest(all_records)
        self._groups = tuple(sorted(set(groups)))
        frames = [
            Frame(MessageType.ANNOUNCE, self.announcement.to_json()),
            Frame(MessageType.PUBLISH_SET, self._publish_set_body()),
        ]
        for link in list(self.links.values()):
            if link.peer is not None and not link.peer.is_client:
                for frame in frames:
                    self.spawn(self._send_on(link, frame), name="flood")

    def _publish_set_body(self) -> Dict[str, Any]:
        return _publish_set(self.node_id, self.seq, self._public)

    def _accepts(self, node_id: str, seq: int, known: Optional[int]) -> bool:
        if node_id == self.node_id:
            return False
        if known is None or seq > known:
            return True
        return seq == known and node_id not in self.routes

    def _learn_route(self, node_id: str, link: Link) -> None:
        direct = self.links.get(node_id)
        if direct is not None and direct.peer is not None and not direct.is_closed:
            self.routes[node_id] = node_id
        else:
            self.routes[node_id] = link.peer_id

    async def _on_announce(self, link: Link, frame: Frame) -> None:
        try:
            ann = NodeAnnouncement.from_json(frame.body)
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"malformed ANNOUNCE: {e}") from e
        known = self.announcements.get(ann.node_id)
        if not self._accepts(ann.node_id, ann.seq, known.seq if known else None):
            self._trace("drop", frame, link.peer_id)
            return
        self.announcements[ann.node_id] = ann
        self._learn_route(ann.node_id, link)
        for listener in list(self.announcement_listeners):
            try:
                listener(ann)
            except Exception:
                logger.exception("Announcement listener failed")
        await self._flood(link, frame)

    async def _on_publish_set(self, link: Link, frame: Frame) -> None:
        body = frame.body
        try:
            node_id = str(body["nodeId"])
            seq = int(body["seq"])
            records = [PublicationRecord.from_json(r) for r in body["publications"]]
        except (KeyError, TypeError, ValueError, FlowmeshError) as e:
            raise ProtocolError(f"malformed PUBLISH_SET: {e}") from e
        known = self.publication_sets.get(node_id)
        if known is not None and seq <= known[0]:
            self._trace("drop", frame, link.peer_id)
            return
        if any(r.host_node != node_id for r in records):
            raise ProtocolError(f"PUBLISH_SET of {node_id} names another host")
        self.publication_sets[node_id] = (seq, records)
        if node_id not in self.routes and node_id != self.node_id:
            self._learn_route(node_id, link)
        await self._flood(link, frame)

    async def _flood(self, source: Link, frame: Frame) -> None:
        if not self.relay:
            return
        for peer_id, link in sorted(self.links.items()):
            if link is source or link.peer is None or link.peer.is_client:
                continue
            await self._send_on(link, frame)

    # --- routed frames ------------------------------------------------------

    async def _on_frame(self, link: Link, frame: Frame) -> None:
        self._trace("recv", frame, link.peer_id)
        if frame.type is MessageType.ANNOUNCE:
            await self._on_announce(link, frame)
        elif frame.type is MessageType.PUBLISH_SET:
            await self._on_publish_set(link, frame)
        elif frame.type is MessageType.HELLO:
            raise ProtocolError("unexpected HELLO on an established link")
        elif frame.is_routed:
            await self._on_routed(link, Envelope.from_frame(frame, link.peer_id))
        else:
            logger.debug("Ignoring link-local %s", frame.type.name)

    async def _on_routed(self, link: Link, envelope: Envelope) -> None:
        if envelope.dst == self.node_id:
            self._deliver(envelope)
            return
        if not self.relay:
            logger.debug(
                "Not a relay, dropping %s for %s", envelope.type.name, envelope.dst
            )
            return
        ttl = envelope.ttl - 1
        if ttl <= 0:
            logger.debug(
                "TTL exhausted for %s frame %s", envelope.type.name, envelope.id
            )
            await self._nack(envelope, NACK_TTL_EXCEEDED)
            return
        hop = self.routes.get(envelope.dst)
        next_link = self.links.get(hop) if hop else None
        if next_link is None or not await self._send_on(
            next_link, envelope.to_frame(ttl)
        ):
            await self._nack(envelope, NACK_UNREACHABLE)

    def _deliver(self, envelope: Envelope) -> None:
        if envelope.type is MessageType.PING:
            self.spawn(
                self._reply_pong(envelope), name=f"pong-{envelope.src[:8]}"
            )
            return
        if envelope.type is MessageType.NACK:
            self._on_nack(envelope)
        self._dispatch(envelope)

    async def _reply_pong(self, ping: Envelope) -> None:
        try:
            await self.send_to(ping.src, MessageType.PONG, ping.body)
        except FlowmeshError as e:
            logger.debug("Cannot answer ping from %s: %s", ping.src, e)

    def _on_nack(self, envelope: Envelope) -> None:
        code = envelope.body.get("code")
        dst = envelope.body.get("dst")
        if code == NACK_UNREACHABLE and dst and dst not in self.links:
            if self.routes.pop(dst, None) is not None:
                logger.info("Dropped stale route to %s", dst)

    async def _nack(self, envelope: Envelope, code: str) -> None:
        if envelope.type is MessageType.NACK or envelope.src == self.node_id:
            return
        try:
            await self.send_to(
                envelope.src,
                MessageType.NACK,
                {"code": code, "ref": envelope.id, "dst": envelope.dst},
            )
        except FlowmeshError:
            logger.debug("Cannot NACK frame %s back to %s", envelope.id, envelope.src)

    async def send_to(
        self, dst: str, message_type: MessageType, body: Dict[str, Any]
    ) -> str:
        """Send a routed frame towards ``dst`` and return its frame id.

        Raises:
            NoRoute: ``dst`` is not in the routing table.
            TransportError: The next-hop link failed.
        """
        envelope = Envelope(
            type=message_type,
            src=self.node_id,
            dst=dst,
            ttl=self.ttl,
            id=self.make_id(),
            body=body,
        )
        if dst == self.node_id:
            asyncio.get_running_loop().call_soon(self._deliver, envelope)
            return envelope.id
        hop = self.routes.get(dst)
        link = self.links.get(hop) if hop else None
        if link is None:
            raise NoRoute(f"no route to {dst}", {"nodeId": dst})
        frame = envelope.to_frame()
        await link.send(frame)
        self._trace("send", frame, link.peer_id)
        return envelope.id


def _publish_set(
    node_id: str, seq: int, records: List[PublicationRecord]
) -> Dict[str, Any]:
    return {
        "nodeId": node_id,
        "seq": seq,
        "publications": [r.to_json() for r in records],
    }
