"""Unit tests for topology descriptions."""

import json
import random

import pytest

from flowmesh.exceptions import TopologySpecError
from flowmesh.testkit import (
    STAR_TOPOLOGY,
    NodeSpec,
    TopologySpec,
    articulation_points,
    flood_reach,
    random_topology,
)

CHAIN = TopologySpec(
    nodes=(NodeSpec("a"), NodeSpec("b", relay=True), NodeSpec("c")),
    links=(("a", "b"), ("b", "c")),
)


class TestTopologySpec:
    """Tests for TopologySpec."""

    def test_star_is_valid(self):
        """Test the bundled star topology."""
        spec = STAR_TOPOLOGY.validate()

        assert spec.neighbours()["relay"] == set(spec.names) - {"relay"}

    @pytest.mark.parametrize(
        "nodes, links",
        [
            ((NodeSpec("a"), NodeSpec("a")), ()),
            ((NodeSpec(""),), ()),
            ((NodeSpec("a"),), (("a", "ghost"),)),
            ((NodeSpec("a"),), (("a", "a"),)),
            ((NodeSpec("a"), NodeSpec("b")), (("a", "b"), ("b", "a"))),
            ((NodeSpec("a", tools=("hammer",)),), ()),
        ],
    )
    def test_invalid(self, nodes, links):
        """Test duplicate names, dangling links, self links and unknown tools."""
        with pytest.raises(TopologySpecError):
            TopologySpec(nodes, links).validate()

    def test_json_round_trip(self):
        """Test that the JSON form reproduces the topology."""
        assert TopologySpec.from_json(STAR_TOPOLOGY.to_json()) == STAR_TOPOLOGY

    def test_load(self, tmp_path):
        """Test loading a topology file."""
        path = tmp_path / "chain.json"
        path.write_text(json.dumps(CHAIN.to_json()))

        assert TopologySpec.load(path) == CHAIN

    def test_load_malformed(self, tmp_path):
        """Test that unreadable files raise TopologySpecError."""
        path = tmp_path / "broken.json"
        path.write_text('{"links": []}')

        with pytest.raises(TopologySpecError):
            TopologySpec.load(path)
        with pytest.raises(TopologySpecError):
            TopologySpec.load(tmp_path / "missing.json")

    def test_node_lookup(self):
        """Test finding a node by name."""
        assert CHAIN.node("b").relay
        with pytest.raises(KeyError):
            CHAIN.node("z")


class TestArticulationPoints:
    """Tests for articulation_points."""

    def test_chain(self):
        """Test that the middle of a chain is a cut vertex."""
        assert articulation_points("abc", [("a", "b"), ("b", "c")]) == {"b"}

    def test_cycle(self):
        """Test that a cycle has no cut vertices."""
        links = [("a", "b"), ("b", "c"), ("c", "d"), ("d", "a")]

        assert articulation_points("abcd", links) == set()

    def test_star_hub(self):
        """Test that the hub of a star is the only cut vertex."""
        names = STAR_TOPOLOGY.names

        assert articulation_points(names, STAR_TOPOLOGY.links) == {"relay"}


class TestFloodReach:
    """Tests for flood_reach."""

    def test_through_relay(self):
        """Test that a relay passes announcements on."""
        assert flood_reach(CHAIN, "a") == {"a", "b", "c"}

    def test_plain_node_does_not_forward(self):
        """Test that a non-relay interior blocks the flood."""
        nodes = (NodeSpec("a"), NodeSpec("b"), NodeSpec("c"))
        spec = TopologySpec(nodes, CHAIN.links)

        assert flood_reach(spec, "a") == {"a", "b"}

    def test_star_reaches_everyone(self):
        """Test that every leaf of the star hears every other leaf."""
        for name in STAR_TOPOLOGY.names:
            assert flood_reach(STAR_TOPOLOGY, name) == set(STAR_TOPOLOGY.names)


class TestRandomTopology:
    """Tests for random_topology."""

    @pytest.mark.parametrize("seed", range(5))
    def test_tree_reaches_everyone(self, seed):
        """Test that relays on cut vertices connect every node of a tree."""
        spec = random_topology(random.Random(seed), 12)

        assert len(spec.links) == 11
        for name in spec.names:
            assert flood_reach(spec, name) == set(spec.names)

    def test_relays_are_cut_vertices(self):
        """Test that exactly the articulation points are relays."""
        spec = random_topology(random.Random(7), 15, extra_links=4)

        relays = {n.name for n in spec.nodes if n.relay}
        assert relays == articulation_points(spec.names, spec.links)

    def test_seeded(self):
        """Test that a seed fixes the graph."""
        first = random_topology(random.Random(3), 10, extra_links=3)
        second = random_topology(random.Random(3), 10, extra_links=3)

        assert first == second

    def test_single_node(self):
        """Test the smallest topology."""
        spec = random_topology(random.Random(0), 1, extra_links=2)

        assert spec.names == ["n00"]
        assert spec.links == ()

    def test_empty(self):
        """Test that zero nodes are refused."""
        with pytest.raises(TopologySpecError):
            random_topology(random.Random(0), 0)
