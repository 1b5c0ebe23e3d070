"""Tool publication, the merged component catalog and group disclosure.

Public publications ride on ``PUBLISH_SET`` floods. Group publications are
only ever sent in a ``QUERY_RESULT`` addressed to a requester that proved the
group key in the current link session:

    requester                          host
      QUERY {queryId, keyIds}    ->
                                 <-   GROUP_CHALLENGE {queryId, nonce, keyIds}
      GROUP_PROOF {queryId, proofs} ->
                                 <-   QUERY_RESULT {queryId, publications}
"""

import asyncio
import json
import secrets
import time
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, List, Optional, Set, Tuple

from flowmesh.core.manifests import ToolRegistry
from flowmesh.core.validation import Catalog
from flowmesh.exceptions import (
    BadProof,
    FlowmeshError,
    NotAuthorized,
    ToolNotFound,
    UnknownTool,
)
from flowmesh.logging_config import get_logger
from flowmesh.models.manifest import ToolManifest
from flowmesh.models.records import NodeAnnouncement, PublicationRecord
from flowmesh.models.workflow import Channel
from flowmesh.network.framing import MessageType
from flowmesh.network.identity import (
    PUBLIC_GROUP,
    KeyRing,
    make_proof,
    new_nonce,
    verify_proof,
)
from flowmesh.network.mesh import Envelope, Mesh

logger = get_logger(__name__)

QUERY_TIMEOUT = 10.0
CHALLENGE_TTL = 30.0
MAX_OPEN_CHALLENGES = 1024

# nonce, wanted key ids, monotonic issue time
_Challenge = Tuple[bytes, Set[str], float]


def publication_for(
    manifest: ToolManifest, host_node: str, group: str = PUBLIC_GROUP
) -> PublicationRecord:
    return PublicationRecord(
        host_node=host_node,
        tool_id=manifest.tool_id,
        channel=manifest.channel,
        display_name=manifest.display_name,
        ports=tuple(manifest.ports),
        group=group,
    )


class PublicationService:
    """Publishes local tools and assembles what this node may use.

    Args:
        mesh: The node's mesh; announcements are flooded through it.
        registry: Locally installed tools.
        keyring: Group keys held by this node.
        path: ``publications.json``; ``None`` keeps publications in memory.
        query_timeout: Seconds to wait for a host's QUERY_RESULT.
        challenge_ttl: Seconds a GROUP_CHALLENGE stays answerable.
    """

    def __init__(
        self,
        mesh: Mesh,
        registry: ToolRegistry,
        keyring: KeyRing,
        path: Optional[Path] = None,
        query_timeout: float = QUERY_TIMEOUT,
        challenge_ttl: float = CHALLENGE_TTL,
    ):
        self.mesh = mesh
        self.registry = registry
        self.keyring = keyring
        self.path = Path(path) if path is not None else None
        self.query_timeout = query_timeout
        self.challenge_ttl = challenge_ttl
        self._published: Dict[Tuple[str, Channel], str] = self._load()
        # (requester, neighbour that reaches it) -> proven key ids
        self._authorized: Dict[Tuple[str, str], Set[str]] = {}
        # keyed by (requester, queryId)
        self._challenges: "OrderedDict[Tuple[str, str], _Challenge]" = OrderedDict()
        self._queries: Dict[str, asyncio.Future] = {}
        self._group_cache: Dict[str, List[PublicationRecord]] = {}

        mesh.on(MessageType.QUERY, self._on_query)
        mesh.on(MessageType.GROUP_CHALLENGE, self._on_challenge)
        mesh.on(MessageType.GROUP_PROOF, self._on_proof)
        mesh.on(MessageType.QUERY_RESULT, self._on_result)
        mesh.announcement_listeners.append(self._on_announcement)
        mesh.link_down_listeners.append(self._on_link_down)

    @property
    def node_id(self) -> str:
        return self.mesh.node_id

    # --- own publications ---------------------------------------------------

    def _load(self) -> Dict[Tuple[str, Channel], str]:
        if self.path is None or not self.path.exists():
            return {}
        try:
            entries = json.loads(self.path.read_text(encoding="utf-8"))
            return {
                (e["toolId"], Channel(e["channel"])): e.get("group", PUBLIC_GROUP)
                for e in entries
            }
        except (ValueError, KeyError, TypeError) as e:
            logger.warning("Ignoring unreadable %s: %s", self.path, e)
            return {}

    def _save(self) -> None:
        if self.path is None:
            return
        entries = [
            {"toolId": tool_id, "channel": channel.value, "group": group}
            for (tool_id, channel), group in sorted(
                self._published.items(), key=lambda kv: (kv[0][0], kv[0][1].value)
            )
        ]
        self.path.write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")

    def publish(
        self, tool_id: str, channel: Channel = Channel.STABLE, group: str = PUBLIC_GROUP
    ) -> PublicationRecord:
        """Offer an installed tool to the network.

        Raises:
            UnknownTool: The tool/channel is not installed here.
            UnknownGroup: No key is held for ``group``.
        """
        try:
            manifest = self.registry.resolve(tool_id, channel)
        except ToolNotFound as e:
            raise UnknownTool(str(e), {"toolId": tool_id}) from e
        if group != PUBLIC_GROUP:
            self.keyring.get(group)
        self._published[(tool_id, channel)] = group
        self._save()
        self.announce()
        logger.info("Published %s (%s) to %s", tool_id, channel.value, group)
        return publication_for(manifest, self.node_id, group)

    def unpublish(self, tool_id: str, channel: Channel = Channel.STABLE) -> None:
        if self._published.pop((tool_id, channel), None) is None:
            raise UnknownTool(
                f"{tool_id} ({channel.value}) is not published", {"toolId": tool_id}
            )
        self._save()
        self.announce()
        logger.info("Unpublished %s (%s)", tool_id, channel.value)

    def published(self) -> List[PublicationRecord]:
        """This node's publications, with ports as the manifests declare now."""
        records = []
        for (tool_id, channel), group in sorted(
            self._published.items(), key=lambda kv: (kv[0][0], kv[0][1].value)
        ):
            try:
                manifest = self.registry.resolve(tool_id, channel)
            except FlowmeshError as e:
                logger.warning("Published tool %s is gone: %s", tool_id, e)
                continue
            records.append(publication_for(manifest, self.node_id, group))
        return records

    def announce(self) -> None:
        records = self.published()
        groups = [
            self.keyring.get(r.group).key_id
            for r in records
            if r.group != PUBLIC_GROUP and r.group in self.keyring
        ]
        self.mesh.update_local(
            [r for r in records if r.group == PUBLIC_GROUP], records, groups
        )

    # --- catalog ------------------------------------------------------------

    def local_records(self) -> List[PublicationRecord]:
        return [
            publication_for(
                m,
                self.node_id,
                self._published.get((m.tool_id, m.channel), PUBLIC_GROUP),
            )
            for m in self.registry.list_manifests()
        ]

    def query_components(
        self, tool_id: Optional[str] = None, host: Optional[str] = None
    ) -> List[PublicationRecord]:
        """Local tools plus every remote publication this node may use."""
        records = self.local_records() + self.mesh.remote_publications()
        for host_node, cached in sorted(self._group_cache.items()):
            if self.mesh.is_reachable(host_node):
                records.extend(cached)
        unique: Dict[Tuple[str, str, Channel], PublicationRecord] = {}
        for record in records:
            unique.setdefault(record.key, record)
        return sorted(
            (
                r
                for r in unique.values()
                if (tool_id is None or r.tool_id == tool_id)
                and (host is None or r.host_node == host)
            ),
            key=lambda r: (r.tool_id, r.channel.value, r.host_node),
        )

    def catalog(self) -> Catalog:
        return Catalog(publications=self.query_components(), local_node=self.node_id)

    # --- host side ----------------------------------------------------------

    def _published_key_ids(self) -> Dict[str, str]:
        found = {}
        for group in set(self._published.values()) - {PUBLIC_GROUP}:
            if group in self.keyring:
                found[self.keyring.get(group).key_id] = group
        return found

    def _session(self, requester: str) -> Tuple[str, str]:
        return (requester, self.mesh.routes.get(requester, requester))

    def authorized_key_ids(self, requester: str) -> Set[str]:
        return set(self._authorized.get(self._session(requester), ()))

    def authorize(self, requester: str, key_id: str, nonce: bytes, proof: str) -> bool:
        """Check a requester's proof for one group and remember the outcome.

        A bad proof only means the requester does not get the group.
        """
        try:
            group = self.keyring.by_key_id(key_id)
            if group is None or not verify_proof(group.key, nonce, self.node_id, proof):
                raise BadProof(f"{requester} failed the proof for group {key_id}")
        except BadProof as e:
            logger.warning("%s", e)
            return False
        self._authorized.setdefault(self._session(requester), set()).add(key_id)
        logger.info("Authorized %s for group %s", requester, group.name)
        return True

    def _on_query(self, envelope: Envelope) -> None:
        query_id = str(envelope.body.get("queryId", ""))
        offered = self._published_key_ids()
        wanted = set(envelope.body.get("keyIds") or ()) & set(offered)
        missing = wanted - self.authorized_key_ids(envelope.src)
        if not missing:
            self.mesh.spawn(self._send_result(envelope.src, query_id, wanted))
            return
        nonce = new_nonce()
        self._open_challenge((envelope.src, query_id), nonce, wanted)
        self.mesh.spawn(
            self._send(
                envelope.src,
                MessageType.GROUP_CHALLENGE,
                {"queryId": query_id, "nonce": nonce.hex(), "keyIds": sorted(missing)},
            )
        )

    @property
    def open_challenges(self) -> int:
        """GROUP_CHALLENGEs still waiting for a proof."""
        self._expire_challenges()
        return len(self._challenges)

    def _open_challenge(
        self, key: Tuple[str, str], nonce: bytes, wanted: Set[str]
    ) -> None:
        self._expire_challenges()
        self._challenges.pop(key, None)
        self._challenges[key] = (nonce, wanted, time.monotonic())
        while len(self._challenges) > MAX_OPEN_CHALLENGES:
            self._challenges.popitem(last=False)

    def _expire_challenges(self) -> None:
        cutoff = time.monotonic() - self.challenge_ttl
        while self._challenges:
            key, (_, _, issued) = next(iter(self._challenges.items()))
            if issued > cutoff:
                return
            del self._challenges[key]

    def _on_proof(self, envelope: Envelope) -> None:
        query_id = str(envelope.body.get("queryId", ""))
        self._expire_challenges()
        challenge = self._challenges.pop((envelope.src, query_id), None)
        if challenge is None:
            logger.debug("Proof from %s answers no open challenge", envelope.src)
            return
        nonce, wanted, _ = challenge
        proofs = envelope.body.get("proofs") or {}
        for key_id in sorted(wanted - self.authorized_key_ids(envelope.src)):
            self.authorize(envelope.src, key_id, nonce, str(proofs.get(key_id, "")))
        self.mesh.spawn(self._send_result(envelope.src, query_id, wanted))

    async def _send_result(
        self, requester: str, query_id: str, wanted: Set[str]
    ) -> None:
        allowed = wanted & self.authorized_key_ids(requester)
        offered = self._published_key_ids()
        groups = {offered[k] for k in allowed}
        records = [r for r in self.published() if r.group in groups]
        await self._send(
            requester,
            MessageType.QUERY_RESULT,
            {"queryId": query_id, "publications": [r.to_json() for r in records]},
        )

    async def _send(self, dst: str, message_type: MessageType, body: Dict[str, Any]):
        try:
            await self.mesh.send_to(dst, message_type, body)
        except FlowmeshError as e:
            logger.debug("Cannot send %s to %s: %s", message_type.name, dst, e)

    def _on_link_down(self, peer_id: str) -> None:
        for session in [s for s in self._authorized if s[1] == peer_id]:
            del self._authorized[session]

    # --- requester side -----------------------------------------------------

    def _shared_key_ids(self, ann: NodeAnnouncement) -> List[str]:
        return sorted(set(ann.groups) & set(self.keyring.key_ids()))

    def _on_announcement(self, ann: NodeAnnouncement) -> None:
        if self._shared_key_ids(ann):
            self.mesh.spawn(self._refresh_host(ann.node_id), name="group-query")
        else:
            self._group_cache.pop(ann.node_id, None)

    async def _refresh_host(self, host: str) -> None:
        try:
            await self.query_host(host)
        except (FlowmeshError, asyncio.TimeoutError) as e:
            logger.debug("Group query to %s failed: %s", host, e)

    async def query_host(self, host: str) -> List[PublicationRecord]:
        """Ask ``host`` for the group publications this node holds keys for."""
        ann = self.mesh.announcements.get(host)
        key_ids = self._shared_key_ids(ann) if ann is not None else []
        if not key_ids:
            self._group_cache.pop(host, None)
            return []
        query_id = secrets.token_hex(8)
        future = asyncio.get_running_loop().create_future()
        self._queries[query_id] = future
        try:
            await self.mesh.send_to(
                host, MessageType.QUERY, {"queryId": query_id, "keyIds": key_ids}
            )
            body = await asyncio.wait_for(future, self.query_timeout)
        finally:
            self._queries.pop(query_id, None)
        records = [
            r
            for r in (PublicationRecord.from_json(p) for p in body["publications"])
            if r.host_node == host
        ]
        self._group_cache[host] = records
        return records

    async def refresh(self) -> None:
        """Re-query every host that publishes to a group this node holds."""
        hosts = [
            node_id
            for node_id, ann in sorted(self.mesh.announcements.items())
            if self._shared_key_ids(ann) and self.mesh.is_reachable(node_id)
        ]
        await asyncio.gather(*(self._refresh_host(h) for h in hosts))

    def _on_challenge(self, envelope: Envelope) -> None:
        try:
            nonce = bytes.fromhex(str(envelope.body.get("nonce", "")))
        except ValueError:
            logger.warning("Malformed challenge from %s", envelope.src)
            return
        proofs = {}
        for key_id in envelope.body.get("keyIds") or ():
            group = self.keyring.by_key_id(key_id)
            if group is not None:
                proofs[key_id] = make_proof(group.key, nonce, envelope.src)
        self.mesh.spawn(
            self._send(
                envelope.src,
                MessageType.GROUP_PROOF,
                {"queryId": envelope.body.get("queryId"), "proofs": proofs},
            )
        )

    def _on_result(self, envelope: Envelope) -> None:
        future = self._queries.get(str(envelope.body.get("queryId", "")))
        if future is not None and not future.done():
            future.set_result(envelope.body)

    # --- invocation ---------------------------------------------------------

    def authorize_invocation(
        self, caller: str, tool_id: str, channel: Channel
    ) -> PublicationRecord:
        """Return the publication ``caller`` may invoke.

        Raises:
            NotAuthorized: The tool is not published to the caller.
        """
        group = self._published.get((tool_id, channel))
        if group is None:
            raise NotAuthorized(
                f"{tool_id} ({channel.value}) is not published here",
                {"toolId": tool_id},
            )
        if group != PUBLIC_GROUP:
            proven = self.authorized_key_ids(caller)
            if not (group in self.keyring and self.keyring.get(group).key_id in proven):
                raise NotAuthorized(
                    f"{caller} has not proved membership of the group of {tool_id}",
                    {"toolId": tool_id},
                )
        manifest = self.registry.resolve(tool_id, channel)
        return publication_for(manifest, self.node_id, group)
