"""Custom exceptions for flowmesh.

Every class carries a stable ``code`` that is used on the wire in RPC error
bodies (``{"code", "message", "detail"}``) so that a remote failure re-raises
locally as the same type.
"""

from typing import Any, Dict, Optional, Type


class FlowmeshError(Exception):
    """Base exception for flowmesh."""

    code = "FLOWMESH_ERROR"

    def __init__(self, message: str = "", detail: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.detail: Dict[str, Any] = dict(detail or {})

    def to_wire(self) -> Dict[str, Any]:
        """Error body for RPC responses and NACKs."""
        return {"code": self.code, "message": str(self), "detail": self.detail}


# --- workflow model -------------------------------------------------------


class WorkflowError(FlowmeshError):
    """Problem with a workflow definition."""

    code = "WORKFLOW_ERROR"


class WorkflowSyntaxError(WorkflowError):
    """Workflow document is not well-formed JSON."""

    code = "SYNTAX_ERROR"

    def __init__(self, message: str, line: int = 0, offset: int = 0):
        super().__init__(message, {"line": line, "offset": offset})
        self.line = line
        self.offset = offset


class WorkflowSchemaError(WorkflowError):
    """Workflow document has a missing or mistyped field."""

    code = "SCHEMA_ERROR"

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message, {"path": path})
        self.path = path


class ValidationFailed(WorkflowError):
    """Workflow has validation violations and cannot be executed."""

    code = "VALIDATION_FAILED"

    def __init__(self, message: str, report: Optional[list] = None):
        super().__init__(message, {"violations": list(report or [])})
        self.report = list(report or [])


class DataValueError(FlowmeshError):
    """A value violates its datatype's constraints."""

    code = "INVALID_VALUE"


# --- tool integration -----------------------------------------------------


class ManifestError(FlowmeshError):
    """Problem with a tool manifest."""

    code = "MANIFEST_ERROR"


class ManifestSyntaxError(ManifestError):
    """Manifest is not well-formed JSON."""

    code = "MANIFEST_SYNTAX_ERROR"


class ManifestSchemaError(ManifestError):
    """Manifest has a missing or invalid field."""

    code = "MANIFEST_SCHEMA_ERROR"

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message, {"path": path})
        self.path = path


class InvalidPlaceholder(ManifestError):
    """Command template references an undeclared input port."""

    code = "INVALID_PLACEHOLDER"


class ToolNotFound(FlowmeshError):
    """No tool with this id is installed."""

    code = "TOOL_NOT_FOUND"


class ChannelNotFound(ToolNotFound):
    """Tool exists but not in the requested version channel."""

    code = "CHANNEL_NOT_FOUND"


class ToolRunError(FlowmeshError):
    """A stage of a tool run failed."""

    code = "TOOL_RUN_ERROR"

    def __init__(
        self,
        message: str,
        exit_code: Optional[int] = None,
        stdout: str = "",
        stderr: str = "",
    ):
        super().__init__(
            message, {"exitCode": exit_code, "stdout": stdout, "stderr": stderr}
        )
        self.exit_code = exit_code
        self.stdout = stdout
        self.stderr = stderr


class PreScriptFailed(ToolRunError):
    """Pre-script exited with a nonzero code."""

    code = "PRE_SCRIPT_FAILED"


class ToolFailed(ToolRunError):
    """Tool command exited with a code outside expectedExitCodes."""

    code = "TOOL_FAILED"


class PostScriptFailed(ToolRunError):
    """Post-script exited with a nonzero code."""

    code = "POST_SCRIPT_FAILED"


class ScriptFailed(ToolRunError):
    """Built-in script component exited with a nonzero code."""

    code = "SCRIPT_FAILED"


class ToolTimeout(ToolRunError):
    """Tool run exceeded its wall-clock budget."""

    code = "TIMEOUT"


class OutputTypeError(ToolRunError):
    """Declared output missing or mistyped in outputs.json."""

    code = "OUTPUT_TYPE_ERROR"


# --- built-in components --------------------------------------------------


class ComponentError(FlowmeshError):
    """A built-in component rejected its configuration or inputs."""

    code = "COMPONENT_ERROR"


class ConfigTypeError(ComponentError):
    code = "CONFIG_TYPE_ERROR"


class ConfigRangeError(ComponentError):
    code = "CONFIG_RANGE_ERROR"


class IncomparableTypes(ComponentError):
    code = "INCOMPARABLE_TYPES"


class XmlParseError(ComponentError):
    code = "XML_PARSE_ERROR"


class PathNotFound(ComponentError):
    code = "PATH_NOT_FOUND"


class ValueParseError(ComponentError):
    code = "VALUE_PARSE_ERROR"


class NonFiniteInput(ComponentError):
    code = "NON_FINITE_INPUT"


class NonFiniteObjective(ComponentError):
    code = "NON_FINITE_OBJECTIVE"


class DimensionMismatch(ComponentError):
    code = "DIMENSION_MISMATCH"


# --- execution engine -----------------------------------------------------


class EngineError(FlowmeshError):
    """Workflow execution problem."""

    code = "ENGINE_ERROR"


class UnresolvableComponent(EngineError):
    """A tool component cannot be mapped to a hosting node."""

    code = "UNRESOLVABLE_COMPONENT"


class UnknownRun(EngineError):
    """Run id is unknown, or the run is not in a state allowing the request."""

    code = "UNKNOWN_RUN"


class EnginePreconditionError(EngineError):
    """Internal scheduler invariant violated."""

    code = "ENGINE_PRECONDITION"


# --- data management ------------------------------------------------------


class StorageError(FlowmeshError):
    """Journal or blob store failure."""

    code = "STORAGE_ERROR"


class StorageFull(StorageError):
    code = "STORAGE_FULL"


class RunClosed(StorageError):
    """Record appended to a run that already ended."""

    code = "RUN_CLOSED"


class UnknownBlob(StorageError):
    code = "UNKNOWN_BLOB"


class ChecksumMismatch(StorageError):
    code = "CHECKSUM_MISMATCH"


class TransferInterrupted(StorageError):
    code = "INTERRUPTED"


class ExportError(StorageError):
    code = "IO_ERROR"


# --- network --------------------------------------------------------------


class NetworkError(FlowmeshError):
    """Transport or routing failure."""

    code = "NETWORK_ERROR"


class ProtocolError(NetworkError):
    """Malformed or oversized frame."""

    code = "PROTOCOL_ERROR"


class VersionMismatch(NetworkError):
    code = "VERSION_MISMATCH"


class SelfConnection(NetworkError):
    code = "SELF_CONNECTION"


class TransportError(NetworkError):
    code = "TRANSPORT_ERROR"


class NoRoute(NetworkError):
    code = "NO_ROUTE"


class TtlExceeded(NetworkError):
    code = "TTL_EXCEEDED"


class TransportLost(NetworkError):
    """Peer became unreachable while a call was outstanding."""

    code = "TRANSPORT_LOST"


class CallTimeout(NetworkError):
    """A call got no answer before its deadline."""

    code = "CALL_TIMEOUT"


class BadProof(NetworkError):
    code = "BAD_PROOF"


class UnknownGroup(FlowmeshError):
    code = "UNKNOWN_GROUP"


class UnknownTool(FlowmeshError):
    code = "UNKNOWN_TOOL"


# --- remote invocation ----------------------------------------------------


class RemoteError(FlowmeshError):
    """Failure reported by a remote node."""

    code = "REMOTE_ERROR"


class NotAuthorized(RemoteError):
    code = "NOT_AUTHORIZED"


class RemoteFailure(RemoteError):
    """Tool run on the hosting node failed; detail carries the original error."""

    code = "REMOTE_FAILURE"


class ControllerRefused(RemoteError):
    """Controller rejected a submitted workflow; detail carries the report."""

    code = "CONTROLLER_REFUSED"


# --- simulation ----------------------------------------------------------


class TopologySpecError(FlowmeshError):
    """A simulated topology description is inconsistent."""

    code = "SPEC_ERROR"


_DETAIL_ATTRIBUTES = (
    ("exitCode", "exit_code"),
    ("stdout", "stdout"),
    ("stderr", "stderr"),
    ("path", "path"),
    ("line", "line"),
    ("offset", "offset"),
    ("violations", "report"),
)


def _all_subclasses(cls: Type[FlowmeshError]):
    for sub in cls.__subclasses__():
        yield sub
        yield from _all_subclasses(sub)


def error_from_wire(body: Dict[str, Any]) -> FlowmeshError:
    """Rebuild an exception from an RPC error body."""
    code = body.get("code", FlowmeshError.code)
    message = body.get("message", "")
    detail = body.get("detail") or {}
    for cls in [FlowmeshError, *_all_subclasses(FlowmeshError)]:
        if cls.code == code:
            exc = FlowmeshError.__new__(cls)
            FlowmeshError.__init__(exc, message, detail)
            for key, attr in _DETAIL_ATTRIBUTES:
                if key in detail:
                    setattr(exc, attr, detail[key])
            return exc
    return RemoteError(message, detail)
