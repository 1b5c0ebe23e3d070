"""In-process multi-node simulation and fixture tools for tests."""

from flowmesh.testkit.memory import MemoryWire, corrupt_chunk, of_type
from flowmesh.testkit.topology import (
    FIXTURES_DIR,
    STAR_TOPOLOGY,
    NodeSpec,
    SimulatedNetwork,
    TopologySpec,
    articulation_points,
    build_topology,
    flood_reach,
    install_fixture,
    random_topology,
    wait_until,
)

__all__ = [
    "FIXTURES_DIR",
    "STAR_TOPOLOGY",
    "MemoryWire",
    "NodeSpec",
    "SimulatedNetwork",
    "TopologySpec",
    "articulation_points",
    "build_topology",
    "corrupt_chunk",
    "flood_reach",
    "install_fixture",
    "of_type",
    "random_topology",
    "wait_until",
]
