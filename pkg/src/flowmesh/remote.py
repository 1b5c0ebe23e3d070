"""Remote tool invocation, controller delegation and event forwarding.

A controller runs a tool component on its hosting node with ``invoke_tool``:
input blobs are pushed first, the host runs the manifest, pushes output blobs
back and only then answers. A submitter hands a whole workflow to a controller
with ``submit_run`` and may disconnect afterwards; the run continues there and
its records stay queryable with ``query_run`` / ``fetch_record`` /
``fetch_blob``.
"""

import asyncio
import secrets
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Set, Tuple

from flowmesh.core.blobs import BlobStore
from flowmesh.core.builtins import FiringResult
from flowmesh.core.engine import WorkflowEngine
from flowmesh.core.journal import HostedCallLog, RunStore
from flowmesh.core.manifests import ToolRegistry
from flowmesh.core.tool_runner import ConsoleSink, ToolRunContext, ToolRunner
from flowmesh.core.workflow_io import parse_workflow, serialize_workflow
from flowmesh.exceptions import (
    ControllerRefused,
    FlowmeshError,
    ProtocolError,
    RemoteFailure,
    TransferInterrupted,
    UnresolvableComponent,
    ValidationFailed,
)
from flowmesh.logging_config import get_logger
from flowmesh.models.manifest import ToolManifest
from flowmesh.models.records import (
    ComponentRunRecord,
    PublicationRecord,
    RunQuery,
    RunStatus,
    WorkflowRunRecord,
)
from flowmesh.models.values import (
    DataValue,
    format_timestamp,
    utc_now,
    value_from_json,
    value_to_json,
)
from flowmesh.models.workflow import Channel, ComponentInstance, WorkflowDefinition
from flowmesh.network.catalog import PublicationService
from flowmesh.network.framing import MessageType
from flowmesh.network.mesh import Envelope, Mesh
from flowmesh.network.rpc import CallContext, RpcEndpoint
from flowmesh.network.transfer import BlobTransfer

logger = get_logger(__name__)

TERMINAL_EVENTS = frozenset({"RunFinished", "RunFailed", "RunCancelled"})

EventSink = Callable[[Dict[str, Any]], None]


class EventHub:
    """Fans engine and remote events out to local sinks and watching nodes."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.sinks: List[EventSink] = []
        self.watchers: Dict[str, Set[str]] = {}
        mesh.on(MessageType.EVENT, self._on_event)

    def watch(self, run_id: str, node_id: str) -> None:
        if node_id != self.mesh.node_id:
            self.watchers.setdefault(run_id, set()).add(node_id)

    def emit(self, event: Dict[str, Any]) -> None:
        for sink in list(self.sinks):
            try:
                sink(event)
            except Exception:
                logger.exception("Event sink failed")
        run_id = event.get("runId", "")
        for node_id in sorted(self.watchers.get(run_id, ())):
            self.mesh.spawn(self._forward(node_id, event), name="event")
        if event.get("event") in TERMINAL_EVENTS:
            self.watchers.pop(run_id, None)

    async def _forward(self, node_id: str, event: Dict[str, Any]) -> None:
        try:
            await self.mesh.send_to(node_id, MessageType.EVENT, event)
        except FlowmeshError as e:
            # the run goes on without its watcher
            logger.debug("Event for %s not delivered: %s", node_id, e)

    def _on_event(self, envelope: Envelope) -> None:
        self.emit(envelope.body)


class ToolHost:
    """Serves ``invoke_tool`` for tools this node publishes."""

    def __init__(
        self,
        mesh: Mesh,
        rpc: RpcEndpoint,
        transfer: BlobTransfer,
        publications: PublicationService,
        registry: ToolRegistry,
        tool_runner: ToolRunner,
        blobs: BlobStore,
        hosted_log: HostedCallLog,
        firing_slots: asyncio.Semaphore,
    ):
        self.mesh = mesh
        self.transfer = transfer
        self.publications = publications
        self.registry = registry
        self.tool_runner = tool_runner
        self.blobs = blobs
        self.hosted_log = hosted_log
        self.firing_slots = firing_slots
        # (caller, invocation id) -> running tool
        self.running: Dict[Tuple[str, str], asyncio.Task] = {}
        self._revoked: Set[Tuple[str, str]] = set()
        rpc.register("invoke_tool", self.invoke_tool)
        rpc.register("cancel_invocation", self.cancel_invocation)

    async def invoke_tool(
        self, params: Dict[str, Any], ctx: CallContext
    ) -> Dict[str, Any]:
        """Run a published tool for a remote controller.

        Raises:
            NotAuthorized: The caller may not use the tool.
            ToolNotFound: The tool disappeared from this node.
            TransferInterrupted: An input blob did not arrive.
            RemoteFailure: The tool run failed; ``detail.cause`` has the error.
        """
        try:
            tool_id = str(params["toolId"])
            channel = Channel(params.get("channel", Channel.STABLE.value))
            inputs = {
                name: value_from_json(raw)
                for name, raw in (params.get("inputs") or {}).items()
            }
        except (KeyError, ValueError, FlowmeshError) as e:
            raise ProtocolError(f"malformed invoke_tool request: {e}") from e
        self.publications.authorize_invocation(ctx.caller, tool_id, channel)
        manifest = self.registry.resolve(tool_id, channel)
        missing = sorted({h for v in inputs.values() for h in self.blobs.missing(v)})
        if missing:
            raise TransferInterrupted(
                f"input blob {missing[0]} was not transferred", {"hash": missing[0]}
            )

        def console(stream: str, text: str) -> None:
            event = {
                "event": "Console",
                "runId": params.get("runId", ""),
                "componentId": params.get("componentId", ""),
                "callId": ctx.call_id,
                "stream": stream,
                "text": text,
            }
            self.mesh.spawn(self._stream(ctx.caller, event), name="console")

        invocation = (ctx.caller, str(params.get("callId") or ctx.call_id))
        started = utc_now()
        task = asyncio.ensure_future(self._execute(manifest, inputs, console))
        self.running[invocation] = task
        try:
            outputs, run = await task
        except asyncio.CancelledError:
            if invocation not in self._revoked:
                raise
            cause = {
                "code": "CANCELLED",
                "message": "cancelled by caller",
                "detail": {},
            }
            self._log_call(params, ctx, started, error=cause)
            raise RemoteFailure(
                f"{tool_id} cancelled on {self.mesh.node_id}", {"cause": cause}
            ) from None
        except FlowmeshError as e:
            self._log_call(params, ctx, started, error=e.to_wire())
            raise RemoteFailure(
                f"{tool_id} failed on {self.mesh.node_id}: {e}", {"cause": e.to_wire()}
            ) from e
        finally:
            self.running.pop(invocation, None)
            self._revoked.discard(invocation)
        await self.transfer.push_values(ctx.caller, outputs.values())
        response = {
            "outputs": {name: value_to_json(v) for name, v in sorted(outputs.items())},
            "stdout": run.stdout,
            "stderr": run.stderr,
            "exitCode": run.exit_code,
            "wallClock": run.wall_clock,
        }
        self._log_call(params, ctx, started, exit_code=run.exit_code)
        return response

    async def cancel_invocation(
        self, params: Dict[str, Any], ctx: CallContext
    ) -> Dict[str, Any]:
        """Stop a tool the caller started here; returns once its process is gone."""
        invocation = (ctx.caller, str(params.get("callId", "")))
        task = self.running.get(invocation)
        if task is None or task.done():
            return {"cancelled": False}
        logger.info("Cancelling invocation %s from %s", invocation[1], ctx.caller)
        self._revoked.add(invocation)
        task.cancel()
        await asyncio.wait([task])
        return {"cancelled": True}

    async def _execute(
        self,
        manifest: ToolManifest,
        inputs: Dict[str, DataValue],
        console: ConsoleSink,
    ) -> Tuple[Dict[str, DataValue], ToolRunContext]:
        async with self.firing_slots:
            return await self.tool_runner.execute(manifest, inputs, console)

    async def _stream(self, dst: str, event: Dict[str, Any]) -> None:
        try:
            await self.mesh.send_to(dst, MessageType.EVENT, event)
        except FlowmeshError:
            pass

    def _log_call(
        self,
        params: Dict[str, Any],
        ctx: CallContext,
        started,
        exit_code: Optional[int] = None,
        error: Optional[Dict[str, Any]] = None,
    ) -> None:
        self.hosted_log.append(
            {
                "callId": ctx.call_id,
                "origin": ctx.caller,
                "runId": params.get("runId"),
                "componentId": params.get("componentId"),
                "toolId": params.get("toolId"),
                "channel": params.get("channel", Channel.STABLE.value),
                "startedAt": format_timestamp(started),
                "endedAt": format_timestamp(utc_now()),
                "exitCode": exit_code,
                "error": error,
            }
        )


class RemoteDispatcher:
    """The engine's tool dispatcher: local publications run here, others remotely."""

    def __init__(
        self,
        node_id: str,
        rpc: RpcEndpoint,
        transfer: BlobTransfer,
        cancel_timeout: float = 30.0,
    ):
        self.node_id = node_id
        self.rpc = rpc
        self.transfer = transfer
        self.cancel_timeout = cancel_timeout
        self.local: Optional[Callable[..., Any]] = None

    async def __call__(
        self,
        run_id: str,
        component: ComponentInstance,
        publication: PublicationRecord,
        inputs: Dict[str, DataValue],
    ) -> FiringResult:
        if publication.host_node == self.node_id and self.local is not None:
            return await self.local(run_id, component, publication, inputs)
        return await self.invoke_remote(
            publication, inputs, run_id=run_id, component_id=component.id
        )

    async def invoke_remote(
        self,
        publication: PublicationRecord,
        inputs: Dict[str, DataValue],
        run_id: str = "",
        component_id: str = "",
    ) -> FiringResult:
        """Run ``publication`` on its host and bring the outputs here.

        Cancelling the awaiting task asks the host to stop the tool as well.
        """
        host = publication.host_node
        invocation = secrets.token_hex(16)
        await self.transfer.push_values(host, inputs.values())
        call = self.rpc.call(
            host,
            "invoke_tool",
            {
                "callId": invocation,
                "toolId": publication.tool_id,
                "channel": publication.channel.value,
                "inputs": {n: value_to_json(v) for n, v in sorted(inputs.items())},
                "runId": run_id,
                "componentId": component_id,
            },
        )
        try:
            result = await call
        except asyncio.CancelledError:
            await self._cancel_remote(host, invocation)
            raise
        outputs = {
            name: value_from_json(raw) for name, raw in result["outputs"].items()
        }
        for value in outputs.values():
            for digest in value.blob_hashes():
                await self.transfer.fetch(host, digest)
        return FiringResult(
            outputs={name: [value] for name, value in outputs.items()},
            stdout=result.get("stdout", ""),
            stderr=result.get("stderr", ""),
            exit_code=result.get("exitCode"),
        )

    async def _cancel_remote(self, host: str, invocation: str) -> None:
        try:
            await self.rpc.call(
                host,
                "cancel_invocation",
                {"callId": invocation},
                timeout=self.cancel_timeout,
            )
        except FlowmeshError as e:
            logger.warning("Could not cancel %s on %s: %s", invocation, host, e)


class ControllerService:
    """Run submission and monitoring, for local callers and over RPC.

    Every request may name a ``controller``; when that is another node the
    request is forwarded there, so a CLI client attached to any daemon can
    reach every run in the mesh.
    """

    def __init__(
        self,
        node_id: str,
        rpc: RpcEndpoint,
        transfer: BlobTransfer,
        engine: WorkflowEngine,
        run_store: RunStore,
        events: EventHub,
    ):
        self.node_id = node_id
        self.rpc = rpc
        self.transfer = transfer
        self.engine = engine
        self.run_store = run_store
        self.events = events
        # runs this node submitted to other controllers
        self.submitted: Dict[str, str] = {}
        for method, handler in (
            ("submit_run", self._rpc_submit),
            ("query_run", self._rpc_query_run),
            ("query_runs", self._rpc_query_runs),
            ("fetch_record", self._rpc_fetch_record),
            ("cancel_run", self._rpc_cancel),
            ("watch_run", self._rpc_watch),
            ("export_run", self._rpc_export),
        ):
            rpc.register(method, handler)

    # --- submitting ---------------------------------------------------------

    async def submit(
        self, wf: WorkflowDefinition, controller: Optional[str] = None
    ) -> str:
        """Start ``wf`` on ``controller`` (this node when omitted).

        Raises:
            ControllerRefused: The controller found the workflow invalid.
            NoRoute: The controller is not reachable.
        """
        if controller is None or controller == self.node_id:
            return await self.engine.start_run(wf, submitter=self.node_id)
        return await self.submit_to_controller(wf, controller)

    async def submit_to_controller(
        self, wf: WorkflowDefinition, controller: str
    ) -> str:
        config_values = [v for c in wf.components for v in c.config.values()]
        await self.transfer.push_values(controller, config_values)
        result = await self.rpc.call(
            controller,
            "submit_run",
            {"workflow": serialize_workflow(wf), "submitter": self.node_id},
        )
        run_id = result["runId"]
        self.submitted[run_id] = controller
        logger.info("Run %s submitted to controller %s", run_id, controller)
        return run_id

    def controller_of(self, run_id: str, controller: Optional[str] = None) -> str:
        if controller:
            return controller
        if run_id in self.submitted:
            return self.submitted[run_id]
        if self.run_store.has_run(run_id):
            return self.run_store.get_run(run_id).controller_node
        return self.node_id

    async def _rpc_submit(self, params: Dict[str, Any], ctx: CallContext) -> Any:
        wf = parse_workflow(str(params.get("workflow", "")))
        controller = params.get("controller")
        if controller and controller != self.node_id:
            run_id = await self.submit_to_controller(wf, controller)
            self.events.watch(run_id, ctx.caller)
            return {"runId": run_id, "controller": controller}
        try:
            run_id = await self.engine.start_run(
                wf, submitter=params.get("submitter") or ctx.caller
            )
        except ValidationFailed as e:
            raise ControllerRefused(
                f"controller {self.node_id} refused the workflow: {e}",
                {"violations": e.report},
            ) from e
        except UnresolvableComponent as e:
            raise ControllerRefused(
                f"controller {self.node_id} refused the workflow: {e}",
                {"violations": [{"kind": "Unresolvable", "message": str(e)}]},
            ) from e
        self.events.watch(run_id, ctx.caller)
        return {"runId": run_id, "controller": self.node_id}

    # --- monitoring ---------------------------------------------------------

    async def _forwarded(
        self, method: str, params: Dict[str, Any], run_id: Optional[str] = None
    ) -> Optional[Any]:
        controller = (
            self.controller_of(run_id, params.get("controller"))
            if run_id
            else params.get("controller")
        )
        if not controller or controller == self.node_id:
            return None
        forwarded = {k: v for k, v in params.items() if k != "controller"}
        return await self.rpc.call(controller, method, forwarded)

    async def _rpc_query_run(self, params: Dict[str, Any], ctx: CallContext) -> Any:
        run_id = str(params.get("runId", ""))
        forwarded = await self._forwarded("query_run", params, run_id)
        if forwarded is not None:
            return forwarded
        record = self.run_store.get_run(run_id)
        firings = self.run_store.get_component_runs(run_id, params.get("componentId"))
        return {
            "run": record.to_json(),
            "records": [r.to_json() for r in firings],
        }

    async def _rpc_query_runs(self, params: Dict[str, Any], ctx: CallContext) -> Any:
        forwarded = await self._forwarded("query_runs", params)
        if forwarded is not None:
            return forwarded
        status = params.get("status")
        query = RunQuery(
            status=RunStatus(status) if status else None,
            submitter_node=params.get("submitter"),
        )
        return {"runs": [r.summary() for r in self.run_store.query_runs(query)]}

    async def _rpc_fetch_record(self, params: Dict[str, Any], ctx: CallContext) -> Any:
        run_id = str(params.get("runId", ""))
        forwarded = await self._forwarded("fetch_record", params, run_id)
        if forwarded is not None:
            return forwarded
        record = self.run_store.fetch_record(
            run_id,
            str(params.get("componentId", "")),
            int(params.get("firingIndex", 0)),
        )
        return record.to_json()

    async def _rpc_cancel(self, params: Dict[str, Any], ctx: CallContext) -> Any:
        run_id = str(params.get("runId", ""))
        forwarded = await self._forwarded("cancel_run", params, run_id)
        if forwarded is not None:
            return forwarded
        return (await self.engine.cancel_run(run_id)).summary()

    async def _rpc_watch(self, params: Dict[str, Any], ctx: CallContext) -> Any:
        run_id = str(params.get("runId", ""))
        self.events.watch(run_id, ctx.caller)
        controller = self.controller_of(run_id, params.get("controller"))
        if controller != self.node_id:
            # have the controller stream to this node, which relays to the caller
            return await self.rpc.call(controller, "watch_run", {"runId": run_id})
        return self.run_store.get_run(run_id).summary()

    async def _rpc_export(self, params: Dict[str, Any], ctx: CallContext) -> Any:
        """Export to a directory on this node, fetching remote records first."""
        run_id = str(params.get("runId", ""))
        dest = Path(str(params.get("dest", "export")))
        controller = self.controller_of(run_id, params.get("controller"))
        if controller != self.node_id:
            await self.mirror_run(controller, run_id)
        root = self.run_store.export_run(run_id, dest)
        return {"path": str(root)}

    async def mirror_run(self, controller: str, run_id: str) -> WorkflowRunRecord:
        """Copy the committed records of a remote run into the local store.

        The copy is replaced wholesale on every call, so it always reflects
        the controller's committed prefix.
        """
        result = await self.rpc.call(controller, "query_run", {"runId": run_id})
        record = WorkflowRunRecord.from_json(result["run"])
        firings = [ComponentRunRecord.from_json(r) for r in result["records"]]
        digests = set()
        for firing in firings:
            digests.update(d for d in (firing.stdout, firing.stderr) if d)
            for token in firing.inputs.values():
                digests.update(token.value.blob_hashes())
            for tokens in firing.outputs.values():
                for token in tokens:
                    digests.update(token.value.blob_hashes())
        for digest in sorted(digests):
            await self.transfer.fetch(controller, digest)
        self.run_store.replace_run(record, firings)
        return record
