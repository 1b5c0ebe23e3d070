"""Semantic validation of workflow definitions against a component catalog."""

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Set

from flowmesh.core.builtins import BUILTINS, LOOP_DRIVERS, create_builtin
from flowmesh.exceptions import (
    ComponentError,
    ConfigTypeError,
    UnresolvableComponent,
    ValidationFailed,
)
from flowmesh.models.records import PublicationRecord
from flowmesh.models.workflow import (
    Channel,
    ComponentInstance,
    ComponentKind,
    WorkflowDefinition,
)


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    path: str = ""

    def to_json(self) -> Dict[str, str]:
        return {"kind": self.kind, "message": self.message, "path": self.path}


@dataclass
class ValidationReport:
    """Violations found in a workflow; empty means executable."""

    violations: List[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> List[str]:
        return [v.kind for v in self.violations]

    def add(self, kind: str, message: str, path: str = "") -> None:
        self.violations.append(Violation(kind, message, path))

    def to_json(self) -> List[Dict[str, str]]:
        return [v.to_json() for v in self.violations]


@dataclass
class Catalog:
    """Components a node can place in a workflow.

    ``publications`` mixes the node's own tools and remote publications it is
    authorized for; both have the same shape.
    """

    publications: Sequence[PublicationRecord] = ()
    builtins: FrozenSet[str] = frozenset(BUILTINS)
    local_node: Optional[str] = None

    def candidates(self, tool_id: str, channel: Channel) -> List[PublicationRecord]:
        return sorted(
            (
                p
                for p in self.publications
                if p.tool_id == tool_id and p.channel == channel
            ),
            key=lambda p: p.host_node,
        )

    def has_tool(self, tool_id: str) -> bool:
        return any(p.tool_id == tool_id for p in self.publications)

    def resolve(self, component: ComponentInstance) -> PublicationRecord:
        """Pick the hosting node for a tool component.

        An explicit ``host`` wins, then the local node, then the lowest node id.

        Raises:
            UnresolvableComponent: No matching publication is visible.
        """
        channel = component.channel or Channel.STABLE
        found = self.candidates(component.tool or "", channel)
        if component.host is not None:
            found = [p for p in found if p.host_node == component.host]
        if not found:
            raise UnresolvableComponent(
                f"component {component.id!r}: tool {component.tool!r} "
                f"({channel.value}) is not available"
                + (f" on {component.host}" if component.host else ""),
                {"componentId": component.id, "toolId": component.tool},
            )
        local = [p for p in found if p.host_node == self.local_node]
        return (local or found)[0]


def validate_workflow(wf: WorkflowDefinition, catalog: Catalog) -> ValidationReport:
    """Collect every violation; never raises."""
    report = ValidationReport()
    _check_ids(wf, report)
    for index, component in enumerate(wf.components):
        path = f"components[{index}]"
        if component.kind is ComponentKind.BUILTIN:
            _check_builtin(component, path, catalog, report)
        else:
            _check_tool(component, path, catalog, report)
    _check_connections(wf, report)
    _check_cycles(wf, report)
    return report


def require_valid(wf: WorkflowDefinition, catalog: Catalog) -> None:
    """Raise ValidationFailed unless ``wf`` validates cleanly."""
    report = validate_workflow(wf, catalog)
    if not report.ok:
        summary = "; ".join(f"{v.kind}: {v.message}" for v in report.violations)
        raise ValidationFailed(
            f"workflow is not executable: {summary}", report.to_json()
        )


def _check_ids(wf: WorkflowDefinition, report: ValidationReport) -> None:
    counts = Counter(c.id for c in wf.components)
    for index, component in enumerate(wf.components):
        if counts[component.id] > 1:
            report.add(
                "DuplicateId",
                f"component id {component.id!r} is used {counts[component.id]} times",
                f"components[{index}].id",
            )
            counts[component.id] = 0


def _check_builtin(
    component: ComponentInstance,
    path: str,
    catalog: Catalog,
    report: ValidationReport,
) -> None:
    if component.builtin not in catalog.builtins or component.builtin not in BUILTINS:
        report.add(
            "UnknownBuiltin",
            f"unknown built-in kind {component.builtin!r}",
            f"{path}.builtin",
        )
        return
    derived = BUILTINS[component.builtin].derive_ports(component.config)
    if derived is not None and set(derived) != set(component.ports):
        report.add(
            "PortSchemaMismatch",
            f"{component.builtin} ports do not match its config",
            f"{path}.ports",
        )
    try:
        create_builtin(component.builtin, component.config, component.ports)
    except ConfigTypeError as e:
        report.add("ConfigTypeError", str(e), f"{path}.config")
    except ComponentError as e:
        report.add("ConfigRangeError", str(e), f"{path}.config")


def _check_tool(
    component: ComponentInstance,
    path: str,
    catalog: Catalog,
    report: ValidationReport,
) -> None:
    channel = component.channel or Channel.STABLE
    if not catalog.has_tool(component.tool or ""):
        report.add(
            "UnknownTool",
            f"tool {component.tool!r} is not available",
            f"{path}.tool",
        )
        return
    found = catalog.candidates(component.tool or "", channel)
    if not found:
        report.add(
            "UnknownChannel",
            f"tool {component.tool!r} has no {channel.value} channel available",
            f"{path}.channel",
        )
        return
    try:
        publication = catalog.resolve(component)
    except UnresolvableComponent:
        report.add(
            "UnknownHost",
            f"tool {component.tool!r} is not published by {component.host}",
            f"{path}.host",
        )
        return
    if set(publication.ports) != set(component.ports):
        report.add(
            "PortSchemaMismatch",
            f"ports differ from the {component.tool!r} manifest",
            f"{path}.ports",
        )


def _check_connections(wf: WorkflowDefinition, report: ValidationReport) -> None:
    by_id: Dict[str, ComponentInstance] = {}
    for component in wf.components:
        by_id.setdefault(component.id, component)
    writers: Dict[Any, int] = {}
    for index, conn in enumerate(wf.connections):
        path = f"connections[{index}]"
        source = by_id.get(conn.source.component)
        target = by_id.get(conn.target.component)
        out_port = source.output_port(conn.source.port) if source else None
        in_port = target.input_port(conn.target.port) if target else None
        if out_port is None:
            report.add(
                "DanglingEndpoint", f"no output port {conn.source}", f"{path}.from"
            )
        if in_port is None:
            report.add(
                "DanglingEndpoint", f"no input port {conn.target}", f"{path}.to"
            )
        if out_port is None or in_port is None:
            continue
        if out_port.datatype is not in_port.datatype:
            report.add(
                "TypeMismatch",
                f"{conn.source} ({out_port.datatype.value}) -> "
                f"{conn.target} ({in_port.datatype.value})",
                path,
            )
        key = (conn.target.component, conn.target.port)
        if key in writers:
            report.add(
                "MultipleWriters",
                f"input {conn.target} already fed by connections[{writers[key]}]",
                f"{path}.to",
            )
        else:
            writers[key] = index


def _check_cycles(wf: WorkflowDefinition, report: ValidationReport) -> None:
    drivers = {
        c.id
        for c in wf.components
        if c.kind is ComponentKind.BUILTIN and c.builtin in LOOP_DRIVERS
    }
    nodes = sorted({c.id for c in wf.components} - drivers)
    edges: Dict[str, Set[str]] = defaultdict(set)
    for conn in wf.connections:
        a, b = conn.source.component, conn.target.component
        if a in drivers or b in drivers:
            continue
        edges[a].add(b)
    for scc in strongly_connected_components(nodes, edges):
        if len(scc) > 1 or scc[0] in edges.get(scc[0], ()):
            report.add(
                "UnguardedCycle",
                f"cycle through {', '.join(sorted(scc))} has no loop driver",
                "connections",
            )


def strongly_connected_components(
    nodes: Iterable[str], edges: Dict[str, Set[str]]
) -> List[List[str]]:
    """Tarjan's algorithm; components come out in reverse topological order."""
    index: Dict[str, int] = {}
    low: Dict[str, int] = {}
    stack: List[str] = []
    on_stack: Set[str] = set()
    result: List[List[str]] = []

    def visit(v: str) -> None:
        index[v] = low[v] = len(index)
        stack.append(v)
        on_stack.add(v)
        for w in sorted(edges.get(v, ())):
            if w not in index:
                visit(w)
                low[v] = min(low[v], low[w])
            elif w in on_stack:
                low[v] = min(low[v], index[w])
        if low[v] == index[v]:
            scc = []
            while True:
                w = stack.pop()
                on_stack.discard(w)
                scc.append(w)
                if w == v:
                    break
            result.append(scc)

    for v in nodes:
        if v not in index:
            visit(v)
    return result
