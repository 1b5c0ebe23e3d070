"""Data models for flowmesh."""

from flowmesh.models.manifest import ToolManifest
from flowmesh.models.records import (
    ComponentRunRecord,
    DataToken,
    NodeAnnouncement,
    PublicationRecord,
    RunStatus,
    WorkflowRunRecord,
)
from flowmesh.models.values import DataType, DataValue
from flowmesh.models.workflow import (
    Channel,
    ComponentInstance,
    Connection,
    PortSpec,
    WorkflowDefinition,
)

__all__ = [
    "Channel",
    "ComponentInstance",
    "ComponentRunRecord",
    "Connection",
    "DataToken",
    "DataType",
    "DataValue",
    "NodeAnnouncement",
    "PortSpec",
    "PublicationRecord",
    "RunStatus",
    "ToolManifest",
    "WorkflowDefinition",
    "WorkflowRunRecord",
]
