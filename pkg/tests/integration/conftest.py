"""Fixtures for multi-node tests on simulated networks."""

import asyncio
from pathlib import Path
from typing import Any, Awaitable, Callable, Optional

import pytest

from flowmesh.testkit import SimulatedNetwork, TopologySpec, build_topology

Scenario = Callable[[SimulatedNetwork], Awaitable[Any]]


@pytest.fixture
def simulate(tmp_path: Path):
    """Run ``scenario`` on a freshly built network and tear it down afterwards."""

    def runner(
        spec: TopologySpec,
        scenario: Scenario,
        root: Optional[Path] = None,
        **options: Any,
    ) -> Any:
        async def main() -> Any:
            network = await build_topology(spec, root or tmp_path / "net", **options)
            async with network:
                return await scenario(network)

        return asyncio.run(main())

    return runner

