"""Reading and writing ``.wf`` workflow documents."""

import json
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from flowmesh.core.blobs import BlobStore
from flowmesh.core.builtins import BUILTINS, derive_ports
from flowmesh.exceptions import DataValueError, WorkflowSchemaError, WorkflowSyntaxError
from flowmesh.models.values import DataType, infer_value, value_to_json
from flowmesh.models.workflow import (
    Channel,
    ComponentInstance,
    ComponentKind,
    Connection,
    Endpoint,
    WorkflowDefinition,
    port_to_json,
    ports_from_json,
)

WORKFLOW_SUFFIX = ".wf"
COMPONENT_ID_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_-]*$")


def parse_workflow(text: Union[str, bytes]) -> WorkflowDefinition:
    """Parse a workflow document into a structurally valid definition.

    Semantic checks (types, cycles, catalog lookups) are left to
    ``validate_workflow``.

    Raises:
        WorkflowSyntaxError: The document is not JSON (carries line/offset).
        WorkflowSchemaError: A field is missing or mistyped (carries the path).
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise WorkflowSyntaxError(f"document is not UTF-8: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise WorkflowSyntaxError(
            f"line {e.lineno} column {e.colno}: {e.msg}", e.lineno, e.colno
        ) from e

    if not isinstance(data, dict):
        raise WorkflowSchemaError("workflow must be a JSON object")
    name = data.get("name", "")
    if not isinstance(name, str):
        raise WorkflowSchemaError("name must be text", "name")

    raw_components = data.get("components", [])
    if not isinstance(raw_components, list):
        raise WorkflowSchemaError("components must be a list", "components")
    components = [
        _parse_component(c, f"components[{i}]") for i, c in enumerate(raw_components)
    ]

    raw_connections = data.get("connections", [])
    if not isinstance(raw_connections, list):
        raise WorkflowSchemaError("connections must be a list", "connections")
    by_id: Dict[str, ComponentInstance] = {}
    for component in components:
        by_id.setdefault(component.id, component)
    connections = [
        _parse_connection(c, f"connections[{i}]", by_id)
        for i, c in enumerate(raw_connections)
    ]
    return WorkflowDefinition(name, tuple(components), tuple(connections))


def load_workflow(
    path: Union[str, Path], blobs: Optional[BlobStore] = None
) -> WorkflowDefinition:
    """Read a ``.wf`` file.

    With ``blobs``, config values written as ``{"type": "file", "path": ...}``
    (or ``directory``) are imported into the store first; relative paths are
    resolved against the workflow file's directory.
    """
    path = Path(path)
    if blobs is None:
        return parse_workflow(path.read_bytes())
    text = path.read_bytes()
    try:
        data = json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError):
        return parse_workflow(text)
    if isinstance(data, dict) and isinstance(data.get("components"), list):
        for index, component in enumerate(data["components"]):
            config = component.get("config") if isinstance(component, dict) else None
            if isinstance(config, dict):
                for key, raw in config.items():
                    config[key] = _import_local(
                        raw, path.parent, blobs, f"components[{index}].config.{key}"
                    )
    return parse_workflow(json.dumps(data))


def _import_local(raw: Any, base: Path, blobs: BlobStore, where: str) -> Any:
    if not (isinstance(raw, dict) and "path" in raw and "hash" not in raw):
        return raw
    kind = raw.get("type")
    if kind not in (DataType.FILE.value, DataType.DIRECTORY.value):
        return raw
    target = base / str(raw["path"])
    try:
        if kind == DataType.FILE.value:
            value = blobs.ingest_file(target, raw.get("filename"))
        else:
            value = blobs.ingest_directory(target)
    except OSError as e:
        raise WorkflowSchemaError(f"cannot import {target}: {e}", where) from e
    return value_to_json(value)


def _parse_component(data: Any, path: str) -> ComponentInstance:
    if not isinstance(data, dict):
        raise WorkflowSchemaError("component object expected", path)

    component_id = data.get("id")
    if not isinstance(component_id, str) or not COMPONENT_ID_RE.match(component_id):
        raise WorkflowSchemaError(
            f"invalid component id {component_id!r}", f"{path}.id"
        )

    try:
        kind = ComponentKind(data.get("kind"))
    except ValueError:
        raise WorkflowSchemaError(
            f"kind must be builtin or tool, got {data.get('kind')!r}", f"{path}.kind"
        ) from None

    host = data.get("host")
    if host is not None and not isinstance(host, str):
        raise WorkflowSchemaError("host must be a node id", f"{path}.host")

    raw_config = data.get("config", {})
    if not isinstance(raw_config, dict):
        raise WorkflowSchemaError("config must be an object", f"{path}.config")
    config = {}
    for key, raw in raw_config.items():
        try:
            config[key] = infer_value(raw)
        except DataValueError as e:
            raise WorkflowSchemaError(str(e), f"{path}.config.{key}") from e

    builtin = tool = channel = None
    if kind is ComponentKind.BUILTIN:
        builtin = data.get("builtin")
        if not isinstance(builtin, str):
            raise WorkflowSchemaError("builtin kind name required", f"{path}.builtin")
    else:
        tool = data.get("tool")
        if not isinstance(tool, str) or not tool:
            raise WorkflowSchemaError("tool id required", f"{path}.tool")
        try:
            channel = Channel(data.get("channel", Channel.STABLE.value))
        except ValueError:
            raise WorkflowSchemaError(
                "channel must be stable or development", f"{path}.channel"
            ) from None

    if "ports" in data:
        ports = ports_from_json(data["ports"], f"{path}.ports")
    elif builtin is not None and builtin not in BUILTINS:
        # validation reports the unknown kind
        ports = ()
    else:
        derived = derive_ports(builtin, config) if builtin is not None else None
        if derived is None:
            raise WorkflowSchemaError(
                "ports must be declared for this component", f"{path}.ports"
            )
        ports = derived

    return ComponentInstance(
        id=component_id,
        kind=kind,
        builtin=builtin,
        tool=tool,
        channel=channel,
        host=host,
        config=config,
        ports=ports,
    )


def _parse_connection(
    data: Any, path: str, components: Dict[str, ComponentInstance]
) -> Connection:
    if not isinstance(data, dict):
        raise WorkflowSchemaError("connection object expected", path)
    endpoints = []
    for key in ("from", "to"):
        raw = data.get(key)
        if not isinstance(raw, str):
            raise WorkflowSchemaError("'component.port' expected", f"{path}.{key}")
        try:
            endpoint = Endpoint.parse(raw)
        except ValueError as e:
            raise WorkflowSchemaError(str(e), f"{path}.{key}") from None
        component = components.get(endpoint.component)
        if component is not None:
            port = (
                component.output_port(endpoint.port)
                if key == "from"
                else component.input_port(endpoint.port)
            )
            if port is None:
                direction = "output" if key == "from" else "input"
                raise WorkflowSchemaError(
                    f"component {component.id!r} has no {direction} "
                    f"port {endpoint.port!r}",
                    f"{path}.{key}",
                )
        endpoints.append(endpoint)
    return Connection(endpoints[0], endpoints[1])


def component_to_json(component: ComponentInstance) -> Dict[str, Any]:
    body: Dict[str, Any] = {"id": component.id, "kind": component.kind.value}
    if component.kind is ComponentKind.BUILTIN:
        body["builtin"] = component.builtin
    else:
        body["tool"] = component.tool
        body["channel"] = (component.channel or Channel.STABLE).value
    if component.host is not None:
        body["host"] = component.host
    body["config"] = {k: value_to_json(v) for k, v in component.config.items()}
    body["ports"] = [port_to_json(p) for p in component.ports]
    return body


def workflow_to_json(
    wf: WorkflowDefinition, canonical: bool = True
) -> Dict[str, Any]:
    """JSON form of ``wf``; without ``canonical`` declaration order is kept."""
    components: List[ComponentInstance] = list(wf.components)
    connections = list(wf.connections)
    if canonical:
        components.sort(key=lambda c: c.id)
        connections.sort(key=lambda c: (str(c.source), str(c.target)))
    return {
        "name": wf.name,
        "components": [component_to_json(c) for c in components],
        "connections": [
            {"from": str(c.source), "to": str(c.target)} for c in connections
        ],
    }


def canonical_serialize(wf: WorkflowDefinition) -> str:
    """Deterministic text form: sorted components, connections and keys."""
    return json.dumps(workflow_to_json(wf), sort_keys=True, indent=2) + "\n"


def serialize_workflow(wf: WorkflowDefinition) -> str:
    """Text form in declaration order; connection order decides fan-out order."""
    return json.dumps(workflow_to_json(wf, canonical=False), sort_keys=True, indent=2)


def canonicalize(wf: WorkflowDefinition) -> WorkflowDefinition:
    """The definition as it reads back from its canonical form."""
    return parse_workflow(canonical_serialize(wf))
