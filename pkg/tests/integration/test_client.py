"""Integration tests for nodes on real TCP sockets and the daemon client."""

import asyncio
import json
import socket

import pytest

from flowmesh.client import DaemonClient
from flowmesh.config import Profile
from flowmesh.exceptions import ProtocolError, TransportError
from flowmesh.node import Node
from flowmesh.testkit import install_fixture, wait_until

ECHO_RUN = {
    "name": "echo-tcp",
    "components": [
        {
            "id": "source",
            "kind": "builtin",
            "builtin": "value_source",
            "config": {"message": "over tcp"},
        },
        {
            "id": "echo",
            "kind": "tool",
            "tool": "echo",
            "ports": [
                {"name": "message", "type": "text", "direction": "input"},
                {"name": "echoed", "type": "text", "direction": "output"},
            ],
        },
    ],
    "connections": [{"from": "source.message", "to": "echo.message"}],
}


async def start_node(root, name, tools=()):
    """A listening node on an ephemeral localhost port."""
    node = Node(Profile(root=root / name, name=name))
    for tool in tools:
        install_fixture(node, tool)
        node.publications.publish(tool)
    await node.start(listen=True, host="127.0.0.1", port=0)
    return node


def free_port():
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class TestDaemonClient:
    """Tests for DaemonClient against a running node."""

    def test_node_info(self, tmp_path):
        """Test that the client reaches the daemon it connected to."""

        async def main():
            node = await start_node(tmp_path, "desk")
            try:
                async with DaemonClient(*node.address, timeout=10) as client:
                    return await client.call("node_info"), client.daemon_id, node
            finally:
                await node.stop()

        info, daemon_id, node = asyncio.run(main())

        assert info["nodeId"] == node.node_id == daemon_id
        assert info["displayName"] == "desk"
        assert [link["client"] for link in info["links"]] == [True]

    def test_unknown_method(self, tmp_path):
        """Test that an unknown method comes back as a ProtocolError."""

        async def main():
            node = await start_node(tmp_path, "desk")
            try:
                async with DaemonClient(*node.address, timeout=10) as client:
                    with pytest.raises(ProtocolError):
                        await client.call("no_such_method")
            finally:
                await node.stop()

        asyncio.run(main())

    def test_no_daemon(self):
        """Test that connecting to a closed port raises TransportError."""

        async def main():
            client = DaemonClient("127.0.0.1", free_port(), timeout=2)
            with pytest.raises(TransportError):
                await client.connect()

        asyncio.run(main())

    def test_events_streamed(self, tmp_path):
        """Test that a submitting client receives the run's events."""

        async def main():
            node = await start_node(tmp_path, "desk", tools=("echo",))
            try:
                async with DaemonClient(*node.address, timeout=30) as client:
                    submitted = await client.call(
                        "submit_run", {"workflow": json.dumps(ECHO_RUN)}
                    )
                    events = []
                    while not events or events[-1]["event"] != "RunFinished":
                        events.append(await client.next_event(timeout=30))
                    return submitted, events, node.node_id
            finally:
                await node.stop()

        submitted, events, node_id = asyncio.run(main())

        assert submitted["controller"] == node_id
        assert {e["runId"] for e in events} == {submitted["runId"]}
        assert "FiringFinished" in [e["event"] for e in events]


class TestTcpMesh:
    """Tests for two nodes linked over TCP."""

    def test_connect_and_list(self, tmp_path):
        """Test that a linked node's publications show up through the client."""

        async def main():
            desk = await start_node(tmp_path, "desk")
            lab = await start_node(tmp_path, "lab", tools=("echo",))
            try:
                async with DaemonClient(*desk.address, timeout=10) as client:
                    peer = await client.call(
                        "net_connect",
                        {"host": lab.address[0], "port": lab.address[1]},
                    )
                    await wait_until(
                        lambda: desk.publications.query_components(tool_id="echo")
                    )
                    listed = await client.call("components_list")
                    info = await client.call("node_info")
                return peer, listed["components"], info, lab.node_id
            finally:
                await desk.stop()
                await lab.stop()

        peer, components, info, lab_id = asyncio.run(main())

        assert peer["nodeId"] == lab_id
        assert [(c["toolId"], c["hostNode"]) for c in components] == [("echo", lab_id)]
        servers = [link["nodeId"] for link in info["links"] if not link["client"]]
        assert servers == [lab_id]

    def test_client_is_not_announced(self, tmp_path):
        """Test that a connected client never becomes a known node."""

        async def main():
            desk = await start_node(tmp_path, "desk")
            try:
                async with DaemonClient(*desk.address, timeout=10) as client:
                    await client.call("node_info")
                    return set(desk.mesh.known_nodes()), client.client_id
            finally:
                await desk.stop()

        known, client_id = asyncio.run(main())

        assert client_id not in known
