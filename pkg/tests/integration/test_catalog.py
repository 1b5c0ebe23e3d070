"""Integration tests for publications, the merged catalog and access groups."""

import pytest

from flowmesh.exceptions import NotAuthorized, UnknownGroup, UnknownTool
from flowmesh.models.values import DataValue
from flowmesh.network import catalog
from flowmesh.network.framing import MessageType
from flowmesh.network.identity import generate_key, new_nonce
from flowmesh.testkit import STAR_TOPOLOGY, of_type

GROUP_KEY = generate_key()


async def restrict_lift(net, *members):
    """Move quadratic-lift on aero-1 into the "aero" group known to ``members``."""
    for name in members:
        net.node(name).keyring.add("aero", GROUP_KEY)
    aero = net.node("aero-1")
    aero.keyring.add("aero", GROUP_KEY)
    aero.publications.publish("quadratic-lift", group="aero")
    await net.settle()
    for name in members:
        await net.node(name).publications.refresh()
    await net.settle()
    return aero


def lift_hosts(node):
    return [
        (r.host_node, r.group)
        for r in node.publications.query_components(tool_id="quadratic-lift")
    ]


class TestPublicCatalog:
    """Tests for public publications."""

    def test_remote_tools_listed(self, simulate):
        """Test that a leaf sees every public tool with its host."""

        async def scenario(net):
            records = net.node("laptop-1").publications.query_components()
            hosts = {r.tool_id: r.host_node for r in records}
            return hosts, net.node("structures-1").node_id

        hosts, structures_id = simulate(STAR_TOPOLOGY, scenario)

        assert set(hosts) == {"adder", "echo", "failer", "quadratic-lift", "sleeper"}
        assert hosts["adder"] == structures_id

    def test_unreachable_host_hidden(self, simulate):
        """Test that a host without a route drops out of the catalog."""

        async def scenario(net):
            relay = net.node("relay")
            before = relay.publications.query_components(tool_id="echo")
            net.kill_link("relay", "aero-2")
            await net.settle()
            return before, relay.publications.query_components(tool_id="echo")

        before, after = simulate(STAR_TOPOLOGY, scenario)

        assert len(before) == 1
        assert after == []

    def test_publish_checks(self, simulate):
        """Test publishing a tool that is not installed or to an unknown group."""

        async def scenario(net):
            aero = net.node("aero-1")
            with pytest.raises(UnknownTool):
                aero.publications.publish("adder")
            with pytest.raises(UnknownGroup):
                aero.publications.publish("quadratic-lift", group="secret")
            with pytest.raises(UnknownTool):
                aero.publications.unpublish("adder")

        simulate(STAR_TOPOLOGY, scenario)


class TestAccessGroups:
    """Tests for group-restricted publications."""

    def test_member_sees_group_tool(self, simulate):
        """Test that a key holder learns the tool after proving membership."""

        async def scenario(net):
            aero = await restrict_lift(net, "laptop-2")
            return aero.node_id, lift_hosts(net.node("laptop-2"))

        aero_id, hosts = simulate(STAR_TOPOLOGY, scenario)

        assert hosts == [(aero_id, "aero")]

    def test_outsiders_see_nothing(self, simulate):
        """Test that the relay and nodes with another key never see the tool."""

        async def scenario(net):
            net.node("laptop-1").keyring.add("aero", generate_key())
            await restrict_lift(net, "laptop-2")
            await net.node("laptop-1").publications.refresh()
            return lift_hosts(net.node("laptop-1")), lift_hosts(net.node("relay"))

        laptop, relay = simulate(STAR_TOPOLOGY, scenario)

        assert laptop == []
        assert relay == []

    def test_group_id_announced(self, simulate):
        """Test that the host advertises the group's key id, not its name."""

        async def scenario(net):
            aero = await restrict_lift(net)
            ann = net.node("laptop-1").mesh.announcements[aero.node_id]
            return ann.groups, aero.keyring.get("aero").key_id

        groups, key_id = simulate(STAR_TOPOLOGY, scenario)

        assert groups == (key_id,)

    def test_invocation_requires_membership(self, simulate):
        """Test that only a proven member can run a group tool."""

        async def scenario(net):
            await restrict_lift(net, "laptop-2")
            member = net.node("laptop-2")
            (record,) = member.publications.query_components(tool_id="quadratic-lift")
            result = await member.dispatcher.invoke_remote(
                record, {"span": DataValue.float_(2.0)}
            )
            with pytest.raises(NotAuthorized):
                await net.node("laptop-1").dispatcher.invoke_remote(
                    record, {"span": DataValue.float_(2.0)}
                )
            return result.outputs["lift"]

        assert simulate(STAR_TOPOLOGY, scenario) == [DataValue.float_(8.0)]

    def test_bad_proof_rejected(self, simulate):
        """Test that a wrong proof does not authorize the requester."""

        async def scenario(net):
            aero = await restrict_lift(net)
            key_id = aero.keyring.get("aero").key_id
            laptop_id = net.node("laptop-1").node_id
            accepted = aero.publications.authorize(
                laptop_id, key_id, new_nonce(), "00" * 32
            )
            return accepted, aero.publications.authorized_key_ids(laptop_id)

        accepted, proven = simulate(STAR_TOPOLOGY, scenario)

        assert accepted is False
        assert proven == set()

    def test_authorization_ends_with_link(self, simulate):
        """Test that a proof only holds for the link session it was made in."""

        async def scenario(net):
            aero = await restrict_lift(net, "laptop-2")
            member_id = net.node("laptop-2").node_id
            before = aero.publications.authorized_key_ids(member_id)
            net.kill_link("relay", "aero-1")
            await net.settle()
            return before, aero.publications.authorized_key_ids(member_id)

        before, after = simulate(STAR_TOPOLOGY, scenario)

        assert len(before) == 1
        assert after == set()


async def unanswered_queries(net, count):
    """Send ``count`` group queries to aero-1 whose proofs never arrive."""
    aero = await restrict_lift(net)
    net.wire("relay", "aero-1").drop(of_type(MessageType.GROUP_PROOF))
    key_id = aero.keyring.get("aero").key_id
    laptop = net.node("laptop-1")
    for index in range(count):
        await laptop.mesh.send_to(
            aero.node_id,
            MessageType.QUERY,
            {"queryId": f"q{index}", "keyIds": [key_id]},
        )
    await net.settle()
    return aero


class TestChallenges:
    """Tests for bookkeeping of open group challenges."""

    def test_expire_by_age(self, simulate):
        """Test that challenges nobody answers are forgotten after their lifetime."""

        async def scenario(net):
            aero = await unanswered_queries(net, 3)
            piled = aero.publications.open_challenges
            aero.publications.challenge_ttl = 0.0
            return piled, aero.publications.open_challenges

        assert simulate(STAR_TOPOLOGY, scenario) == (3, 0)

    def test_capped(self, simulate, monkeypatch):
        """Test that the oldest challenges give way once the table is full."""
        monkeypatch.setattr(catalog, "MAX_OPEN_CHALLENGES", 2)

        async def scenario(net):
            aero = await unanswered_queries(net, 5)
            return aero.publications.open_challenges

        assert simulate(STAR_TOPOLOGY, scenario) == 2
