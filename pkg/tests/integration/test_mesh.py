"""Integration tests for announcement flooding and routed delivery."""

import pytest

from flowmesh.exceptions import NoRoute, TransportLost
from flowmesh.testkit import STAR_TOPOLOGY, NodeSpec, TopologySpec, wait_until


def chain(*nodes: NodeSpec) -> TopologySpec:
    names = [n.name for n in nodes]
    return TopologySpec(tuple(nodes), tuple(zip(names, names[1:])))


def ids(net):
    return {name: node.node_id for name, node in net.nodes.items()}


class TestFlooding:
    """Tests for announcement floods."""

    def test_star_everyone_knows_everyone(self, simulate):
        """Test that the relay spreads every leaf's announcement."""

        async def scenario(net):
            return ids(net), {
                name: set(node.mesh.known_nodes()) for name, node in net.nodes.items()
            }

        node_ids, known = simulate(STAR_TOPOLOGY, scenario)

        for name, seen in known.items():
            assert seen == set(node_ids.values()) - {node_ids[name]}

    def test_routes_point_at_relay(self, simulate):
        """Test that leaves reach each other through the relay."""

        async def scenario(net):
            laptop = net.node("laptop-1").mesh
            return ids(net), dict(laptop.routes)

        node_ids, routes = simulate(STAR_TOPOLOGY, scenario)

        assert routes[node_ids["aero-1"]] == node_ids["relay"]
        assert routes[node_ids["relay"]] == node_ids["relay"]

    def test_plain_node_does_not_forward(self, simulate):
        """Test that a node without the relay flag keeps floods to itself."""

        async def scenario(net):
            a, c = net.node("a"), net.node("c")
            known = set(a.mesh.known_nodes())
            with pytest.raises(NoRoute):
                await a.rpc.call(c.node_id, "node_info")
            return ids(net), known

        node_ids, known = simulate(
            chain(NodeSpec("a"), NodeSpec("b"), NodeSpec("c")), scenario
        )

        assert known == {node_ids["b"]}

    def test_announcement_delivered_once(self, simulate):
        """Test that a leaf receives another leaf's announcement exactly once."""

        async def scenario(net):
            origin = net.node("aero-1").node_id
            return [
                detail
                for kind, detail in net.events(kinds=("recv",))
                if detail["type"] == "ANNOUNCE"
                and detail["at"] == "laptop-1"
                and detail["src"] == origin
            ]

        assert len(simulate(STAR_TOPOLOGY, scenario)) == 1

    def test_publication_change_reaches_peers(self, simulate):
        """Test that unpublishing floods a newer publication set."""

        async def scenario(net):
            aero = net.node("aero-2")
            laptop = net.node("laptop-1")
            before = laptop.publications.query_components(tool_id="echo")
            seq = aero.mesh.seq
            aero.publications.unpublish("echo")
            await net.settle()
            after = laptop.publications.query_components(tool_id="echo")
            return before, after, seq, aero.mesh.seq

        before, after, old_seq, new_seq = simulate(STAR_TOPOLOGY, scenario)

        assert [r.tool_id for r in before] == ["echo"]
        assert after == []
        assert new_seq == old_seq + 1

    def test_deterministic_trace(self, simulate, tmp_path):
        """Test that the same seed produces the same frame trace."""

        async def scenario(net):
            return [
                (kind, d["type"], d["at"], d["src"], d["dst"], d["id"])
                for kind, d in net.events()
            ]

        first = simulate(STAR_TOPOLOGY, scenario, root=tmp_path / "one", seed=3)
        second = simulate(STAR_TOPOLOGY, scenario, root=tmp_path / "two", seed=3)

        assert first == second
        assert first


class TestRoutedDelivery:
    """Tests for routed frames and their failures."""

    def test_call_through_relays(self, simulate):
        """Test an RPC across several relays."""
        spec = chain(
            NodeSpec("a"),
            NodeSpec("r1", relay=True),
            NodeSpec("r2", relay=True),
            NodeSpec("d"),
        )

        async def scenario(net):
            d = net.node("d")
            return d.node_id, await net.node("a").rpc.call(d.node_id, "node_info")

        node_id, info = simulate(spec, scenario)

        assert info["nodeId"] == node_id

    def test_ttl_exceeded(self, simulate):
        """Test that a frame with too few hops left is refused with a NACK."""
        spec = chain(
            NodeSpec("a"),
            NodeSpec("r1", relay=True),
            NodeSpec("r2", relay=True),
            NodeSpec("r3", relay=True),
            NodeSpec("d"),
        )

        async def scenario(net):
            a, d = net.node("a"), net.node("d")
            a.mesh.ttl = 2
            with pytest.raises(TransportLost) as exc_info:
                await a.rpc.call(d.node_id, "node_info")
            a.mesh.ttl = 4
            info = await a.rpc.call(d.node_id, "node_info")
            return str(exc_info.value), info["nodeId"] == d.node_id

        message, reached = simulate(spec, scenario)

        assert "TTL_EXCEEDED" in message
        assert reached

    def test_unreachable_nack(self, simulate):
        """Test that a relay without a route answers UNREACHABLE."""
        spec = chain(NodeSpec("a"), NodeSpec("relay", relay=True), NodeSpec("c"))

        async def scenario(net):
            a, c = net.node("a"), net.node("c")
            net.kill_link("relay", "c")
            await net.settle()
            stale = a.mesh.is_reachable(c.node_id)
            with pytest.raises(TransportLost) as exc_info:
                await a.rpc.call(c.node_id, "node_info")
            return stale, str(exc_info.value), a.mesh.is_reachable(c.node_id)

        stale, message, reachable = simulate(spec, scenario)

        assert stale
        assert "UNREACHABLE" in message
        assert not reachable

    def test_silent_link_death(self, simulate):
        """Test that missed pings take a stalled link down."""

        async def scenario(net):
            net.kill_link("relay", "laptop-1", silent=True)
            await wait_until(lambda: not net.routable("laptop-1", "relay"), 5.0)
            await net.settle()
            return net.routable("relay", "laptop-1")

        assert simulate(STAR_TOPOLOGY, scenario) is False

    def test_partition(self, simulate):
        """Test that a partition cuts the routes across it."""

        async def scenario(net):
            cut = net.partition(["relay", "laptop-1"])
            await net.settle()
            return (
                len(cut),
                net.routable("laptop-1", "relay"),
                net.routable("relay", "aero-1"),
            )

        cut, inside, across = simulate(STAR_TOPOLOGY, scenario)

        assert cut == 6
        assert inside
        assert not across
