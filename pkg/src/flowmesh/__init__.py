"""flowmesh - distributed workflow integration engine."""

__version__ = "0.1.0"

from flowmesh.models.values import DataType, DataValue
from flowmesh.models.workflow import WorkflowDefinition

__all__ = ["DataType", "DataValue", "WorkflowDefinition", "__version__"]
