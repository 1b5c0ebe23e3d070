"""Provenance records: tokens, run records and publication records."""

from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Tuple

from flowmesh.models.values import (
    DataValue,
    format_timestamp,
    parse_timestamp,
    value_from_json,
    value_to_json,
)
from flowmesh.models.workflow import (
    Channel,
    PortSpec,
    port_from_json,
    port_to_json,
)


class RunStatus(str, Enum):
    PREPARING = "Preparing"
    RUNNING = "Running"
    FINISHED = "Finished"
    FAILED = "Failed"
    CANCELLED = "Cancelled"

    @property
    def is_terminal(self) -> bool:
        return self in (RunStatus.FINISHED, RunStatus.FAILED, RunStatus.CANCELLED)


class ComponentStatus(str, Enum):
    IDLE = "Idle"
    RUNNING = "Running"
    FINISHED = "Finished"
    FAILED = "Failed"
    CANCELLED = "Cancelled"


@dataclass(frozen=True)
class DataToken:
    """One value travelling along a connection, with where it came from."""

    value: DataValue
    source_component: str
    source_port: str
    sequence: int
    emitted_at: datetime

    def to_json(self) -> Dict[str, Any]:
        return {
            "value": value_to_json(self.value),
            "sourceComponent": self.source_component,
            "sourcePort": self.source_port,
            "sequence": self.sequence,
            "emittedAt": format_timestamp(self.emitted_at),
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "DataToken":
        return cls(
            value=value_from_json(data["value"]),
            source_component=data["sourceComponent"],
            source_port=data["sourcePort"],
            sequence=int(data["sequence"]),
            emitted_at=parse_timestamp(data["emittedAt"]),
        )


@dataclass
class WorkflowRunRecord:
    run_id: str
    workflow: str  # canonical serialization
    submitter_node: str
    controller_node: str
    started_at: datetime
    status: RunStatus = RunStatus.PREPARING
    ended_at: Optional[datetime] = None
    cause: Optional[Dict[str, Any]] = None

    def to_json(self) -> Dict[str, Any]:
        return {
            "runId": self.run_id,
            "workflow": self.workflow,
            "submitterNode": self.submitter_node,
            "controllerNode": self.controller_node,
            "startedAt": format_timestamp(self.started_at),
            "endedAt": format_timestamp(self.ended_at) if self.ended_at else None,
            "status": self.status.value,
            "cause": self.cause,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "WorkflowRunRecord":
        return cls(
            run_id=data["runId"],
            workflow=data["workflow"],
            submitter_node=data["submitterNode"],
            controller_node=data["controllerNode"],
            started_at=parse_timestamp(data["startedAt"]),
            ended_at=parse_timestamp(data["endedAt"]) if data.get("endedAt") else None,
            status=RunStatus(data["status"]),
            cause=data.get("cause"),
        )

    def summary(self) -> Dict[str, Any]:
        body = self.to_json()
        body.pop("workflow")
        return body


@dataclass(frozen=True)
class ExitInfo:
    exit_code: Optional[int] = None
    wall_clock: float = 0.0
    error: Optional[Dict[str, Any]] = None

    def to_json(self) -> Dict[str, Any]:
        return {
            "exitCode": self.exit_code,
            "wallClock": round(self.wall_clock, 6),
            "error": self.error,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "ExitInfo":
        return cls(
            exit_code=data.get("exitCode"),
            wall_clock=float(data.get("wallClock", 0.0)),
            error=data.get("error"),
        )


@dataclass(frozen=True)
class ComponentRunRecord:
    """One firing of one component."""

    run_id: str
    component_id: str
    firing_index: int
    host_node: str
    inputs: Mapping[str, DataToken]
    outputs: Mapping[str, Tuple[DataToken, ...]]
    stdout: Optional[str]  # blob hash
    stderr: Optional[str]  # blob hash
    exit: ExitInfo
    started_at: datetime
    ended_at: datetime

    def to_json(self) -> Dict[str, Any]:
        return {
            "runId": self.run_id,
            "componentId": self.component_id,
            "firingIndex": self.firing_index,
            "hostNode": self.host_node,
            "inputs": {k: t.to_json() for k, t in sorted(self.inputs.items())},
            "outputs": {
                k: [t.to_json() for t in tokens]
                for k, tokens in sorted(self.outputs.items())
            },
            "stdout": self.stdout,
            "stderr": self.stderr,
            "exit": self.exit.to_json(),
            "startedAt": format_timestamp(self.started_at),
            "endedAt": format_timestamp(self.ended_at),
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "ComponentRunRecord":
        return cls(
            run_id=data["runId"],
            component_id=data["componentId"],
            firing_index=int(data["firingIndex"]),
            host_node=data["hostNode"],
            inputs={k: DataToken.from_json(v) for k, v in data["inputs"].items()},
            outputs={
                k: tuple(DataToken.from_json(t) for t in v)
                for k, v in data["outputs"].items()
            },
            stdout=data.get("stdout"),
            stderr=data.get("stderr"),
            exit=ExitInfo.from_json(data.get("exit") or {}),
            started_at=parse_timestamp(data["startedAt"]),
            ended_at=parse_timestamp(data["endedAt"]),
        )


@dataclass(frozen=True)
class PublicationRecord:
    """A tool offered by ``host_node``; local and remote entries look alike."""

    host_node: str
    tool_id: str
    channel: Channel
    display_name: str
    ports: Tuple[PortSpec, ...]
    group: str = "public"

    @property
    def key(self) -> Tuple[str, str, Channel]:
        return (self.host_node, self.tool_id, self.channel)

    def to_json(self) -> Dict[str, Any]:
        return {
            "hostNode": self.host_node,
            "toolId": self.tool_id,
            "channel": self.channel.value,
            "displayName": self.display_name,
            "ports": [port_to_json(p) for p in self.ports],
            "group": self.group,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "PublicationRecord":
        return cls(
            host_node=data["hostNode"],
            tool_id=data["toolId"],
            channel=Channel(data["channel"]),
            display_name=data.get("displayName", data["toolId"]),
            ports=tuple(
                port_from_json(p, f"ports[{i}]") for i, p in enumerate(data["ports"])
            ),
            group=data.get("group", "public"),
        )


@dataclass
class RunQuery:
    """Filter for ``query_runs``."""

    status: Optional[RunStatus] = None
    submitter_node: Optional[str] = None
    run_ids: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class NodeAnnouncement:
    """What a node floods about itself; ``seq`` grows with every change."""

    node_id: str
    display_name: str
    is_relay: bool
    seq: int
    publications_digest: str
    # keyIds of the access groups the node publishes to
    groups: Tuple[str, ...] = ()

    def to_json(self) -> Dict[str, Any]:
        return {
            "nodeId": self.node_id,
            "displayName": self.display_name,
            "isRelay": self.is_relay,
            "seq": self.seq,
            "publicationsDigest": self.publications_digest,
            "groups": list(self.groups),
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "NodeAnnouncement":
        return cls(
            node_id=data["nodeId"],
            display_name=data.get("displayName", ""),
            is_relay=bool(data.get("isRelay", False)),
            seq=int(data["seq"]),
            publications_digest=data.get("publicationsDigest", ""),
            groups=tuple(data.get("groups", ())),
        )
