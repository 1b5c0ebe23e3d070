"""Simulated multi-node networks built from topology descriptions.

Every node runs the full stack (engine, mesh, publication service, tool host)
in one event loop; links are ``MemoryWire`` objects. Node ids, frame ids and
wire loss are drawn from seeded generators, so the same seed and fault script
give the same frame trace.
"""

import asyncio
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import (
    Any,
    Callable,
    Dict,
    FrozenSet,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Set,
    Tuple,
    Union,
)

from flowmesh.config import (
    NODE_ID_FILENAME,
    Config,
    ExecutionSection,
    NetworkSection,
    NodeSection,
    Profile,
)
from flowmesh.exceptions import FlowmeshError, TopologySpecError
from flowmesh.logging_config import get_logger
from flowmesh.models.manifest import ToolManifest
from flowmesh.models.workflow import Channel
from flowmesh.node import Node
from flowmesh.testkit.memory import MemoryWire

logger = get_logger(__name__)

FIXTURES_DIR = Path(__file__).parent / "fixtures"
FIXTURE_TOOLS = ("adder", "echo", "failer", "quadratic-lift", "sleeper")

TraceEntry = Tuple[str, Dict[str, Any]]


@dataclass(frozen=True)
class NodeSpec:
    name: str
    relay: bool = False
    # fixture tools installed and published (public, stable) at start
    tools: Tuple[str, ...] = ()


@dataclass(frozen=True)
class TopologySpec:
    """Nodes and undirected links of a simulated network."""

    nodes: Tuple[NodeSpec, ...]
    links: Tuple[Tuple[str, str], ...] = ()

    @property
    def names(self) -> List[str]:
        return [n.name for n in self.nodes]

    def node(self, name: str) -> NodeSpec:
        for spec in self.nodes:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def neighbours(self) -> Dict[str, Set[str]]:
        adjacency: Dict[str, Set[str]] = {n.name: set() for n in self.nodes}
        for a, b in self.links:
            adjacency[a].add(b)
            adjacency[b].add(a)
        return adjacency

    def validate(self) -> "TopologySpec":
        """Raise TopologySpecError for duplicate or dangling names."""
        seen: Set[str] = set()
        for spec in self.nodes:
            if not spec.name:
                raise TopologySpecError("node name must not be empty")
            if spec.name in seen:
                raise TopologySpecError(f"duplicate node name {spec.name!r}")
            seen.add(spec.name)
            for tool in spec.tools:
                if tool not in FIXTURE_TOOLS:
                    raise TopologySpecError(
                        f"node {spec.name!r}: unknown fixture tool {tool!r}"
                    )
        pairs: Set[FrozenSet[str]] = set()
        for a, b in self.links:
            for end in (a, b):
                if end not in seen:
                    raise TopologySpecError(f"link names unknown node {end!r}")
            if a == b:
                raise TopologySpecError(f"node {a!r} cannot link to itself")
            pair = frozenset((a, b))
            if pair in pairs:
                raise TopologySpecError(f"duplicate link {a} - {b}")
            pairs.add(pair)
        return self

    def to_json(self) -> Dict[str, Any]:
        return {
            "nodes": [
                {"name": n.name, "relay": n.relay, "tools": list(n.tools)}
                for n in self.nodes
            ],
            "links": [list(link) for link in self.links],
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "TopologySpec":
        try:
            nodes = tuple(
                NodeSpec(
                    name=str(n["name"]),
                    relay=bool(n.get("relay", False)),
                    tools=tuple(n.get("tools", ())),
                )
                for n in data["nodes"]
            )
            links = tuple((str(a), str(b)) for a, b in data.get("links", ()))
        except (KeyError, TypeError, ValueError) as e:
            raise TopologySpecError(f"malformed topology: {e}") from e
        return cls(nodes, links).validate()

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TopologySpec":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise TopologySpecError(f"cannot read topology {path}: {e}") from e
        return cls.from_json(data)


# A relay joining the machines of four teams.
STAR_TOPOLOGY = TopologySpec(
    nodes=(
        NodeSpec("relay", relay=True),
        NodeSpec("laptop-1"),
        NodeSpec("laptop-2"),
        NodeSpec("aero-1", tools=("quadratic-lift",)),
        NodeSpec("aero-2", tools=("echo",)),
        NodeSpec("structures-1", tools=("adder",)),
        NodeSpec("systems-1", tools=("sleeper",)),
        NodeSpec("systems-2", tools=("failer",)),
    ),
    links=tuple(
        ("relay", leaf)
        for leaf in (
            "laptop-1",
            "laptop-2",
            "aero-1",
            "aero-2",
            "structures-1",
            "systems-1",
            "systems-2",
        )
    ),
)


def articulation_points(
    names: Iterable[str], links: Iterable[Tuple[str, str]]
) -> Set[str]:
    """Nodes whose removal disconnects the graph."""
    adjacency: Dict[str, List[str]] = {name: [] for name in names}
    for a, b in links:
        adjacency[a].append(b)
        adjacency[b].append(a)
    order: Dict[str, int] = {}
    low: Dict[str, int] = {}
    found: Set[str] = set()

    def visit(v: str, parent: Optional[str]) -> None:
        order[v] = low[v] = len(order)
        children = 0
        for w in sorted(adjacency[v]):
            if w == parent:
                continue
            if w in order:
                low[v] = min(low[v], order[w])
                continue
            children += 1
            visit(w, v)
            low[v] = min(low[v], low[w])
            if parent is not None and low[w] >= order[v]:
                found.add(v)
        if parent is None and children > 1:
            found.add(v)

    for name in sorted(adjacency):
        if name not in order:
            visit(name, None)
    return found


def random_topology(
    rng: random.Random, size: int, extra_links: int = 0
) -> TopologySpec:
    """A connected random graph with relays on every cut vertex.

    Starts from a random spanning tree and adds up to ``extra_links`` chords.
    """
    if size < 1:
        raise TopologySpecError("a topology needs at least one node")
    names = [f"n{i:02d}" for i in range(size)]
    pairs: Set[FrozenSet[str]] = set()
    links: List[Tuple[str, str]] = []
    for i in range(1, size):
        a, b = names[rng.randrange(i)], names[i]
        pairs.add(frozenset((a, b)))
        links.append((a, b))
    for _ in range(extra_links):
        if size < 3:
            break
        a, b = rng.sample(names, 2)
        if frozenset((a, b)) not in pairs:
            pairs.add(frozenset((a, b)))
            links.append((a, b))
    relays = articulation_points(names, links)
    nodes = tuple(NodeSpec(name, relay=name in relays) for name in names)
    return TopologySpec(nodes, tuple(links)).validate()


def flood_reach(spec: TopologySpec, origin: str) -> Set[str]:
    """Nodes that learn ``origin``'s announcement: paths with relay interiors."""
    adjacency = spec.neighbours()
    relays = {n.name for n in spec.nodes if n.relay}
    reached = {origin}
    frontier = [origin]
    while frontier:
        current = frontier.pop()
        if current != origin and current not in relays:
            continue
        for neighbour in sorted(adjacency[current]):
            if neighbour not in reached:
                reached.add(neighbour)
                frontier.append(neighbour)
    return reached


def install_fixture(
    node: Node, tool: str, channel: Channel = Channel.STABLE
) -> ToolManifest:
    """Install one of the bundled fixture tools on ``node``."""
    bundle = FIXTURES_DIR / "tools" / tool
    if not bundle.is_dir():
        raise TopologySpecError(f"unknown fixture tool {tool!r}")
    return node.registry.install(bundle, channel)


class SimulatedNetwork:
    """Running nodes joined by in-memory wires.

    Args:
        root: Directory the node profiles live under.
        seed: Seeds node ids, frame ids and wire loss.
        ping_interval: Link ping period of every node.
        ping_misses: Missed pings before a link counts as dead.
        delay: Seconds each frame spends on a wire.
        loss: Probability of losing a frame on a wire.
        max_parallel_firings: Firing cap per node.
        sequential: Run every engine one firing at a time.
    """

    def __init__(
        self,
        root: Union[str, Path],
        seed: int = 0,
        ping_interval: float = 0.2,
        ping_misses: int = 3,
        delay: float = 0.0,
        loss: float = 0.0,
        max_parallel_firings: int = 4,
        sequential: bool = False,
    ):
        self.root = Path(root)
        self.seed = seed
        self.rng = random.Random(seed)
        self.ping_interval = ping_interval
        self.ping_misses = ping_misses
        self.delay = delay
        self.loss = loss
        self.max_parallel_firings = max_parallel_firings
        self.sequential = sequential
        self.nodes: Dict[str, Node] = {}
        self.wires: Dict[FrozenSet[str], MemoryWire] = {}
        self.trace: List[TraceEntry] = []

    async def __aenter__(self) -> "SimulatedNetwork":
        return self

    async def __aexit__(self, *exc_info: Any) -> None:
        await self.close()

    def node(self, name: str) -> Node:
        try:
            return self.nodes[name]
        except KeyError:
            raise TopologySpecError(f"no simulated node {name!r}") from None

    def name_of(self, node_id: str) -> str:
        for name, node in self.nodes.items():
            if node.node_id == node_id:
                return name
        return node_id

    # --- building -----------------------------------------------------------

    async def add_node(
        self, name: str, relay: bool = False, tools: Sequence[str] = ()
    ) -> Node:
        if name in self.nodes:
            raise TopologySpecError(f"duplicate node name {name!r}")
        profile = Profile(root=self.root / name, name=name)
        profile.root.mkdir(parents=True, exist_ok=True)
        id_path = profile.root / NODE_ID_FILENAME
        if not id_path.exists():
            id_path.write_text(f"{self.rng.getrandbits(128):032x}\n", encoding="utf-8")
        config = Config(
            node=NodeSection(display_name=name, relay=relay),
            network=NetworkSection(
                ping_interval=self.ping_interval, ping_misses=self.ping_misses
            ),
            execution=ExecutionSection(
                max_parallel_firings=self.max_parallel_firings,
                cancel_grace=2.0,
                default_timeout=120,
            ),
        )
        ids = random.Random(f"{self.seed}:{name}")
        node = Node(
            profile,
            config,
            make_id=lambda: f"{ids.getrandbits(64):016x}",
            initial_seq=1,
            trace=self._tracer(name),
            sequential=self.sequential,
        )
        for tool in tools:
            install_fixture(node, tool)
            node.publications.publish(tool)
        await node.start(listen=False)
        self.nodes[name] = node
        return node

    def _tracer(self, name: str):
        def record(kind: str, detail: Dict[str, Any]) -> None:
            self.trace.append((kind, dict(detail, at=name)))

        return record

    async def link(self, a: str, b: str) -> MemoryWire:
        """Join two nodes and wait for both handshakes."""
        key = frozenset((a, b))
        if key in self.wires and not self.wires[key].dead:
            raise TopologySpecError(f"duplicate link {a} - {b}")
        node_a, node_b = self.node(a), self.node(b)
        wire = MemoryWire(
            (a, b),
            delay=self.delay,
            loss=self.loss,
            rng=random.Random(f"{self.seed}:{a}-{b}"),
        )
        self.wires[key] = wire
        reader_a, writer_a = wire.endpoint(0)
        reader_b, writer_b = wire.endpoint(1)
        await asyncio.gather(
            node_a.mesh.attach(reader_a, writer_a, label=b),
            node_b.mesh.attach(reader_b, writer_b, label=a),
        )
        return wire

    def wire(self, a: str, b: str) -> MemoryWire:
        try:
            return self.wires[frozenset((a, b))]
        except KeyError:
            raise TopologySpecError(f"no link {a} - {b}") from None

    # --- faults -------------------------------------------------------------

    def kill_link(self, a: str, b: str, silent: bool = False) -> None:
        """Break a link; ``silent`` leaves detection to the ping watchdogs."""
        wire = self.wire(a, b)
        if silent:
            wire.stall()
        else:
            wire.cut()
        logger.info("Killed link %s - %s%s", a, b, " (silent)" if silent else "")

    def partition(self, *groups: Iterable[str]) -> List[Tuple[str, str]]:
        """Cut every link between different groups.

        Nodes not named in any group form one more group together.
        """
        side: Dict[str, int] = {}
        for index, group in enumerate(groups):
            for name in group:
                self.node(name)
                side[name] = index
        cut = []
        for key, wire in sorted(self.wires.items(), key=lambda kv: sorted(kv[0])):
            a, b = wire.ends
            if wire.dead or side.get(a, -1) == side.get(b, -1):
                continue
            wire.cut()
            cut.append((a, b))
        return cut

    # --- observation --------------------------------------------------------

    def routable(self, a: str, b: str) -> bool:
        return self.node(a).mesh.is_reachable(self.node(b).node_id)

    def frames_on_wires(self) -> int:
        return sum(w.stats.frames for w in self.wires.values())

    def quiet(self) -> bool:
        if any(w.in_flight for w in self.wires.values()):
            return False
        return not any(n.mesh.busy for n in self.nodes.values())

    async def settle(self, timeout: float = 10.0, quiet_for: float = 0.05) -> None:
        """Wait until no frame has moved for ``quiet_for`` seconds.

        Raises:
            asyncio.TimeoutError: The network kept talking past ``timeout``.
        """
        loop = asyncio.get_running_loop()
        deadline = loop.time() + timeout
        last = -1
        calm_since = loop.time()
        while True:
            frames = self.frames_on_wires()
            now = loop.time()
            if frames != last or not self.quiet():
                last = frames
                calm_since = now
            elif now - calm_since >= quiet_for:
                return
            if now > deadline:
                raise asyncio.TimeoutError(f"network did not settle in {timeout}s")
            await asyncio.sleep(0.005)

    def events(
        self,
        kinds: Iterable[str] = ("send", "recv", "drop"),
        exclude_types: Iterable[str] = ("PING", "PONG"),
    ) -> List[TraceEntry]:
        """The frame trace without liveness traffic."""
        wanted, skipped = set(kinds), set(exclude_types)
        return [
            (kind, detail)
            for kind, detail in self.trace
            if kind in wanted and detail.get("type") not in skipped
        ]

    async def close(self) -> None:
        for name, node in list(self.nodes.items()):
            try:
                await node.stop()
            except FlowmeshError as e:
                logger.warning("Stopping %s: %s", name, e)
        for wire in self.wires.values():
            wire.cut()


async def build_topology(
    spec: TopologySpec, root: Union[str, Path], seed: int = 0, **options: Any
) -> SimulatedNetwork:
    """Start every node of ``spec``, link them in order and let floods settle."""
    spec.validate()
    network = SimulatedNetwork(root, seed=seed, **options)
    for node_spec in spec.nodes:
        await network.add_node(node_spec.name, node_spec.relay, node_spec.tools)
    for a, b in spec.links:
        await network.link(a, b)
    await network.settle()
    return network


async def wait_until(predicate: Callable[[], bool], timeout: float = 10.0) -> None:
    """Poll ``predicate`` until it holds.

    Raises:
        asyncio.TimeoutError: It still did not hold after ``timeout`` seconds.
    """
    loop = asyncio.get_running_loop()
    deadline = loop.time() + timeout
    while not predicate():
        if loop.time() > deadline:
            raise asyncio.TimeoutError(f"condition not reached in {timeout}s")
        await asyncio.sleep(0.01)
