"""Chunked blob transfer between nodes.

The sender probes whether the receiver already holds the hash, streams
``DATA_CHUNK`` frames ``{transferId, hash, size, offset, data}`` (``data`` is
base64 of at most ``CHUNK_SIZE`` raw bytes) and then commits. The receiver
admits the blob only if the SHA-256 of what arrived equals the hash; a
mismatch is retried once with a fresh transfer.
"""

import base64
import binascii
import secrets
from typing import Any, Dict, Iterable, Tuple

from flowmesh.core.blobs import BlobStore, IncomingBlob
from flowmesh.exceptions import (
    ChecksumMismatch,
    ProtocolError,
    TransferInterrupted,
    UnknownBlob,
)
from flowmesh.logging_config import get_logger
from flowmesh.models.values import DataValue
from flowmesh.network.framing import MessageType
from flowmesh.network.mesh import Envelope, Mesh
from flowmesh.network.rpc import CallContext, RpcEndpoint

logger = get_logger(__name__)

CHUNK_SIZE = 64 * 1024
MAX_ATTEMPTS = 2


class BlobTransfer:
    """Sends and receives blobs for one node."""

    def __init__(self, mesh: Mesh, rpc: RpcEndpoint, blobs: BlobStore):
        self.mesh = mesh
        self.rpc = rpc
        self.blobs = blobs
        self.chunks_sent = 0
        self.retransfers = 0
        self._incoming: Dict[Tuple[str, str], IncomingBlob] = {}
        mesh.on(MessageType.DATA_CHUNK, self._on_chunk)
        mesh.link_down_listeners.append(self._on_link_down)
        rpc.register("blob_probe", self._probe)
        rpc.register("blob_commit", self._commit)
        rpc.register("fetch_blob", self._fetch)

    # --- sending ------------------------------------------------------------

    async def push(self, dst: str, digest: str) -> int:
        """Make sure ``dst`` holds ``digest``; returns the chunks sent.

        Raises:
            UnknownBlob: This node does not hold the blob.
            ChecksumMismatch: The blob arrived corrupted twice.
        """
        if not self.blobs.has(digest):
            raise UnknownBlob(f"no blob {digest}", {"hash": digest})
        probe = await self.rpc.call(dst, "blob_probe", {"hash": digest})
        if probe.get("present"):
            logger.debug("Blob %s already on %s", digest[:12], dst)
            return 0
        size = self.blobs.size(digest)
        sent = 0
        for attempt in range(1, MAX_ATTEMPTS + 1):
            transfer_id = secrets.token_hex(8)
            sent += await self._stream(dst, digest, size, transfer_id)
            try:
                await self.rpc.call(
                    dst, "blob_commit", {"hash": digest, "transferId": transfer_id}
                )
            except ChecksumMismatch:
                if attempt == MAX_ATTEMPTS:
                    raise
                self.retransfers += 1
                logger.warning(
                    "Blob %s arrived corrupted at %s, sending again", digest[:12], dst
                )
                continue
            break
        logger.debug("Pushed blob %s to %s in %d chunks", digest[:12], dst, sent)
        return sent

    async def _stream(self, dst: str, digest: str, size: int, transfer_id: str) -> int:
        count = 0
        offset = 0
        for chunk in self.blobs.iter_chunks(digest, CHUNK_SIZE):
            await self.mesh.send_to(
                dst,
                MessageType.DATA_CHUNK,
                {
                    "transferId": transfer_id,
                    "hash": digest,
                    "size": size,
                    "offset": offset,
                    "data": base64.b64encode(chunk).decode("ascii"),
                },
            )
            offset += len(chunk)
            count += 1
        self.chunks_sent += count
        return count

    async def push_values(self, dst: str, values: Iterable[DataValue]) -> int:
        sent = 0
        for digest in sorted({h for v in values for h in v.blob_hashes()}):
            sent += await self.push(dst, digest)
        return sent

    async def fetch(self, src: str, digest: str) -> None:
        """Have ``src`` push ``digest`` to this node unless it is already here."""
        if self.blobs.has(digest):
            return
        await self.rpc.call(src, "fetch_blob", {"hash": digest})

    # --- receiving ----------------------------------------------------------

    def _on_chunk(self, envelope: Envelope) -> None:
        body = envelope.body
        key = (envelope.src, str(body.get("transferId")))
        try:
            digest = str(body["hash"])
            data = base64.b64decode(body["data"], validate=True)
            offset = int(body["offset"])
            size = int(body["size"])
        except (KeyError, TypeError, ValueError, binascii.Error) as e:
            logger.warning("Malformed DATA_CHUNK from %s: %s", envelope.src, e)
            return
        incoming = self._incoming.get(key)
        if incoming is None:
            incoming = self._incoming[key] = self.blobs.incoming(digest, size)
        incoming.write(offset, data)

    def _on_link_down(self, peer_id: str) -> None:
        for key, incoming in list(self._incoming.items()):
            if self.mesh.routes.get(key[0]) is None:
                incoming.abort()
                del self._incoming[key]

    async def _probe(self, params: Dict[str, Any], ctx: CallContext) -> Dict[str, Any]:
        return {"present": self.blobs.has(str(params.get("hash")))}

    async def _commit(self, params: Dict[str, Any], ctx: CallContext) -> Dict[str, Any]:
        digest = str(params.get("hash"))
        incoming = self._incoming.pop((ctx.caller, str(params.get("transferId"))), None)
        if incoming is None:
            if self.blobs.has(digest):
                return {"hash": digest}
            # an empty blob has no chunks
            incoming = self.blobs.incoming(digest, 0)
        if incoming.received < incoming.size:
            incoming.abort()
            raise TransferInterrupted(
                f"blob {digest} incomplete: {incoming.received} of "
                f"{incoming.size} bytes",
                {"hash": digest},
            )
        try:
            incoming.commit()
        except ChecksumMismatch:
            logger.warning(
                "Rejected corrupted blob %s from %s", digest[:12], ctx.caller
            )
            raise
        return {"hash": digest}

    async def _fetch(self, params: Dict[str, Any], ctx: CallContext) -> Dict[str, Any]:
        digest = params.get("hash")
        if not isinstance(digest, str):
            raise ProtocolError("fetch_blob needs a hash")
        chunks = await self.push(ctx.caller, digest)
        return {"hash": digest, "chunks": chunks}
