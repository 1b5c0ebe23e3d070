"""Workflow graph: components, typed ports and connections."""

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterator, Mapping, Optional, Tuple

from flowmesh.exceptions import WorkflowSchemaError
from flowmesh.models.values import DataType, DataValue

PORT_NAME_RE = re.compile(r"^[a-zA-Z_][a-zA-Z0-9_]*$")


class Direction(str, Enum):
    INPUT = "input"
    OUTPUT = "output"


class InputMode(str, Enum):
    CONSUMED = "consumed"
    CONSTANT = "constant"


class Channel(str, Enum):
    """Version channel of an integrated tool."""

    STABLE = "stable"
    DEVELOPMENT = "development"


class ComponentKind(str, Enum):
    BUILTIN = "builtin"
    TOOL = "tool"


@dataclass(frozen=True)
class PortSpec:
    """A typed port; ``mode`` and ``required`` are only meaningful on inputs."""

    name: str
    datatype: DataType
    direction: Direction
    mode: Optional[InputMode] = None
    required: Optional[bool] = None

    @classmethod
    def input(
        cls,
        name: str,
        datatype: DataType,
        mode: InputMode = InputMode.CONSUMED,
        required: bool = True,
    ) -> "PortSpec":
        return cls(name, datatype, Direction.INPUT, mode, required)

    @classmethod
    def output(cls, name: str, datatype: DataType) -> "PortSpec":
        return cls(name, datatype, Direction.OUTPUT)

    @property
    def is_input(self) -> bool:
        return self.direction is Direction.INPUT

    @property
    def is_consumed(self) -> bool:
        return self.is_input and self.mode is InputMode.CONSUMED

    @property
    def is_constant(self) -> bool:
        return self.is_input and self.mode is InputMode.CONSTANT


@dataclass(frozen=True)
class ComponentInstance:
    """One node of the workflow graph: a built-in or an integrated tool."""

    id: str
    kind: ComponentKind
    builtin: Optional[str] = None
    tool: Optional[str] = None
    channel: Optional[Channel] = None
    host: Optional[str] = None
    config: Mapping[str, DataValue] = field(default_factory=dict)
    ports: Tuple[PortSpec, ...] = ()

    def __hash__(self) -> int:
        return hash((self.id, self.kind, self.builtin, self.tool, self.channel))

    @property
    def inputs(self) -> Tuple[PortSpec, ...]:
        return tuple(p for p in self.ports if p.is_input)

    @property
    def outputs(self) -> Tuple[PortSpec, ...]:
        return tuple(p for p in self.ports if not p.is_input)

    def input_port(self, name: str) -> Optional[PortSpec]:
        return next((p for p in self.inputs if p.name == name), None)

    def output_port(self, name: str) -> Optional[PortSpec]:
        return next((p for p in self.outputs if p.name == name), None)

    @property
    def required_inputs(self) -> Tuple[PortSpec, ...]:
        return tuple(p for p in self.inputs if p.required)

    @property
    def is_source(self) -> bool:
        """Fires once at run start (no required input ports)."""
        return not self.required_inputs


@dataclass(frozen=True)
class Endpoint:
    component: str
    port: str

    def __str__(self) -> str:
        return f"{self.component}.{self.port}"

    @classmethod
    def parse(cls, text: str) -> "Endpoint":
        component, sep, port = text.rpartition(".")
        if not sep or not component or not port:
            raise ValueError(f"endpoint must be 'component.port', got {text!r}")
        return cls(component, port)


@dataclass(frozen=True)
class Connection:
    source: Endpoint
    target: Endpoint


@dataclass(frozen=True)
class WorkflowDefinition:
    name: str
    components: Tuple[ComponentInstance, ...] = ()
    connections: Tuple[Connection, ...] = ()

    def component(self, component_id: str) -> Optional[ComponentInstance]:
        return next((c for c in self.components if c.id == component_id), None)

    def component_map(self) -> Dict[str, ComponentInstance]:
        return {c.id: c for c in self.components}

    def outgoing(self, component_id: str, port: str) -> Iterator[Connection]:
        """Connections leaving ``component_id.port`` in declaration order."""
        for conn in self.connections:
            if conn.source.component == component_id and conn.source.port == port:
                yield conn

    def incoming(self, component_id: str, port: str) -> Optional[Connection]:
        for conn in self.connections:
            if conn.target.component == component_id and conn.target.port == port:
                return conn
        return None


def port_to_json(port: PortSpec) -> Dict[str, Any]:
    body: Dict[str, Any] = {
        "name": port.name,
        "type": port.datatype.value,
        "direction": port.direction.value,
    }
    if port.is_input:
        body["mode"] = (port.mode or InputMode.CONSUMED).value
        body["required"] = True if port.required is None else port.required
    return body


def port_from_json(
    data: Any, path: str, error: type = WorkflowSchemaError
) -> PortSpec:
    """Decode a port object.

    Errors are raised as ``error(message, path)`` so manifests and workflow
    files report problems in their own exception type.
    """
    if not isinstance(data, dict):
        raise error("port object expected", path)
    name = data.get("name")
    if not isinstance(name, str) or not PORT_NAME_RE.match(name):
        raise error(f"invalid port name {name!r}", f"{path}.name")
    try:
        datatype = DataType(data.get("type"))
    except ValueError:
        raise error(f"unknown datatype {data.get('type')!r}", f"{path}.type") from None
    try:
        direction = Direction(data.get("direction"))
    except ValueError:
        raise error(
            f"direction must be input or output, got {data.get('direction')!r}",
            f"{path}.direction",
        ) from None
    if direction is Direction.OUTPUT:
        if "mode" in data or "required" in data:
            raise error("output ports take no mode/required", path)
        return PortSpec.output(name, datatype)
    try:
        mode = InputMode(data.get("mode", InputMode.CONSUMED.value))
    except ValueError:
        raise error(
            f"mode must be consumed or constant, got {data.get('mode')!r}",
            f"{path}.mode",
        ) from None
    required = data.get("required", True)
    if not isinstance(required, bool):
        raise error("required must be a boolean", f"{path}.required")
    return PortSpec.input(name, datatype, mode, required)


def ports_from_json(
    data: Any, path: str, error: type = WorkflowSchemaError
) -> Tuple[PortSpec, ...]:
    """Decode a port list, rejecting duplicate names per direction."""
    if not isinstance(data, list):
        raise error("port list expected", path)
    ports = tuple(
        port_from_json(p, f"{path}[{i}]", error) for i, p in enumerate(data)
    )
    seen = set()
    for i, port in enumerate(ports):
        key = (port.name, port.direction)
        if key in seen:
            raise error(
                f"duplicate {port.direction.value} port {port.name!r}",
                f"{path}[{i}]",
            )
        seen.add(key)
    return ports
