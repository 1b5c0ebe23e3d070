"""Integration tests for routed RPC and chunked blob transfer."""

import asyncio

import pytest

from flowmesh.exceptions import (
    CallTimeout,
    ChecksumMismatch,
    ProtocolError,
    UnknownBlob,
)
from flowmesh.network.framing import MessageType
from flowmesh.network.transfer import CHUNK_SIZE
from flowmesh.testkit import STAR_TOPOLOGY, of_type

PAYLOAD = bytes(range(256)) * 800  # just over three chunks


class TestRpc:
    """Tests for request/response calls."""

    def test_call_across_relay(self, simulate):
        """Test a call from one leaf to another."""

        async def scenario(net):
            aero = net.node("aero-1")
            info = await net.node("laptop-1").rpc.call(aero.node_id, "node_info")
            return info, aero.node_id

        info, aero_id = simulate(STAR_TOPOLOGY, scenario)

        assert info["nodeId"] == aero_id
        assert info["displayName"] == "aero-1"

    def test_remote_error_keeps_type(self, simulate):
        """Test that a remote exception re-raises as the same class."""

        async def scenario(net):
            with pytest.raises(ProtocolError) as exc_info:
                await net.node("laptop-1").rpc.call(
                    net.node("aero-1").node_id, "no_such_method"
                )
            return exc_info.value.detail

        assert simulate(STAR_TOPOLOGY, scenario) == {"method": "no_such_method"}

    def test_duplicate_request_served_once(self, simulate):
        """Test that a repeated call id runs the handler only once."""

        async def scenario(net):
            aero, laptop = net.node("aero-1"), net.node("laptop-1")
            calls = []

            async def count(params, ctx):
                calls.append(ctx.caller)
                return len(calls)

            aero.rpc.register("count", count)
            request = {"method": "count", "callId": "fixed", "params": {}}
            for _ in range(3):
                await laptop.mesh.send_to(aero.node_id, MessageType.RPC_REQ, request)
                await net.settle()
            return calls, laptop.node_id

        calls, laptop_id = simulate(STAR_TOPOLOGY, scenario)

        assert calls == [laptop_id]

    def test_default_deadline(self, simulate):
        """Test that a call without a timeout still ends at the call deadline."""

        async def scenario(net):
            aero, laptop = net.node("aero-1"), net.node("laptop-1")

            async def hang(params, ctx):
                await asyncio.sleep(60)

            aero.rpc.register("hang", hang)
            laptop.rpc.call_timeout = 0.3
            with pytest.raises(CallTimeout) as exc_info:
                await laptop.rpc.call(aero.node_id, "hang")
            return exc_info.value.detail, aero.node_id

        detail, aero_id = simulate(STAR_TOPOLOGY, scenario)

        assert detail == {"nodeId": aero_id}

    def test_call_to_self(self, simulate):
        """Test that a node can call its own methods."""

        async def scenario(net):
            relay = net.node("relay")
            return await relay.rpc.call(relay.node_id, "node_info")

        assert simulate(STAR_TOPOLOGY, scenario)["isRelay"] is True


class TestBlobTransfer:
    """Tests for pushing and fetching blobs."""

    def test_push_in_chunks(self, simulate):
        """Test that a blob arrives intact in 64 KiB chunks."""

        async def scenario(net):
            laptop, aero = net.node("laptop-1"), net.node("aero-1")
            digest = laptop.blobs.put_bytes(PAYLOAD)
            chunks = await laptop.transfer.push(aero.node_id, digest)
            again = await laptop.transfer.push(aero.node_id, digest)
            return chunks, again, aero.blobs.get_bytes(digest)

        chunks, again, received = simulate(STAR_TOPOLOGY, scenario)

        assert chunks == -(-len(PAYLOAD) // CHUNK_SIZE)
        assert again == 0
        assert received == PAYLOAD

    def test_empty_blob(self, simulate):
        """Test that an empty blob needs no chunks."""

        async def scenario(net):
            laptop, aero = net.node("laptop-1"), net.node("aero-1")
            digest = laptop.blobs.put_bytes(b"")
            chunks = await laptop.transfer.push(aero.node_id, digest)
            return chunks, aero.blobs.has(digest)

        assert simulate(STAR_TOPOLOGY, scenario) == (0, True)

    def test_corrupted_once_is_resent(self, simulate):
        """Test that one corrupted chunk triggers a single retransfer."""

        async def scenario(net):
            laptop, aero = net.node("laptop-1"), net.node("aero-1")
            net.wire("relay", "aero-1").corrupt(of_type(MessageType.DATA_CHUNK))
            digest = laptop.blobs.put_bytes(PAYLOAD)
            await laptop.transfer.push(aero.node_id, digest)
            return laptop.transfer.retransfers, aero.blobs.get_bytes(digest)

        retransfers, received = simulate(STAR_TOPOLOGY, scenario)

        assert retransfers == 1
        assert received == PAYLOAD

    def test_always_corrupted(self, simulate):
        """Test that a second mismatch is reported and nothing is stored."""

        async def scenario(net):
            laptop, aero = net.node("laptop-1"), net.node("aero-1")
            wire = net.wire("relay", "aero-1")
            wire.corrupt(of_type(MessageType.DATA_CHUNK), count=0)
            digest = laptop.blobs.put_bytes(PAYLOAD)
            with pytest.raises(ChecksumMismatch):
                await laptop.transfer.push(aero.node_id, digest)
            return aero.blobs.has(digest), wire.stats.corrupted

        stored, corrupted = simulate(STAR_TOPOLOGY, scenario)

        assert not stored
        assert corrupted == 2 * -(-len(PAYLOAD) // CHUNK_SIZE)

    def test_fetch(self, simulate):
        """Test pulling a blob from the node that holds it."""

        async def scenario(net):
            laptop, aero = net.node("laptop-1"), net.node("aero-1")
            digest = aero.blobs.put_text("lift 9.0\n")
            await laptop.transfer.fetch(aero.node_id, digest)
            return laptop.blobs.get_bytes(digest)

        assert simulate(STAR_TOPOLOGY, scenario) == b"lift 9.0\n"

    def test_push_unknown_blob(self, simulate):
        """Test pushing a hash this node does not hold."""

        async def scenario(net):
            with pytest.raises(UnknownBlob):
                await net.node("laptop-1").transfer.push(
                    net.node("aero-1").node_id, "0" * 64
                )

        simulate(STAR_TOPOLOGY, scenario)
