"""Dataflow execution of workflow runs.

One coordinator coroutine owns the state of a run. Firings execute as separate
tasks and report back through the run's message queue; routing, sequence
numbering and journal commits happen only in the coordinator, in the order
results arrive.
"""

import asyncio
import secrets
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from typing import (
    Any,
    Awaitable,
    Callable,
    Deque,
    Dict,
    List,
    Optional,
    Sequence,
    Tuple,
)

from flowmesh.core.blobs import BlobStore
from flowmesh.core.builtins import (
    BuiltinComponent,
    FiringContext,
    FiringResult,
    create_builtin,
)
from flowmesh.core.journal import RunStore
from flowmesh.core.manifests import ToolRegistry
from flowmesh.core.tool_runner import ToolRunner
from flowmesh.core.validation import Catalog, require_valid
from flowmesh.core.workflow_io import canonical_serialize
from flowmesh.exceptions import (
    EnginePreconditionError,
    FlowmeshError,
    RemoteFailure,
    ToolRunError,
    UnknownBlob,
    UnknownRun,
)
from flowmesh.logging_config import bind_run, event_line, get_logger
from flowmesh.models.records import (
    ComponentRunRecord,
    ComponentStatus,
    DataToken,
    ExitInfo,
    PublicationRecord,
    RunStatus,
    WorkflowRunRecord,
)
from flowmesh.models.values import DataValue, format_timestamp, utc_now
from flowmesh.models.workflow import (
    Channel,
    ComponentInstance,
    ComponentKind,
    Endpoint,
    PortSpec,
    WorkflowDefinition,
)

logger = get_logger(__name__)

EventSink = Callable[[Dict[str, Any]], None]
ToolDispatcher = Callable[
    [str, ComponentInstance, PublicationRecord, Dict[str, DataValue]],
    Awaitable[FiringResult],
]


@dataclass
class ComponentState:
    """Scheduler view of one component within a run."""

    component: ComponentInstance
    # (arrival number, token) per Consumed port
    queues: Dict[str, Deque[Tuple[int, DataToken]]] = field(default_factory=dict)
    constants: Dict[str, DataToken] = field(default_factory=dict)
    firing_count: int = 0
    status: ComponentStatus = ComponentStatus.IDLE
    source_pending: bool = False

    def __post_init__(self) -> None:
        for port in self.component.inputs:
            if port.is_consumed:
                self.queues.setdefault(port.name, deque())

    def queued(self) -> int:
        return sum(len(q) for q in self.queues.values())


def is_ready(state: ComponentState) -> bool:
    """Whether the component may fire now.

    Every required Consumed port needs a queued token and every required
    Constant port a value. Without required Consumed ports, some optional
    Consumed port must hold a trigger token; a component without any Consumed
    port fires once its constants are complete.
    """
    if state.status is not ComponentStatus.IDLE:
        return False
    if state.source_pending:
        return True
    component = state.component
    consumed = [p for p in component.inputs if p.is_consumed]
    for port in component.inputs:
        if not port.required:
            continue
        if port.is_consumed and not state.queues[port.name]:
            return False
        if port.is_constant and port.name not in state.constants:
            return False
    if any(p.required for p in consumed):
        return True
    if consumed:
        return any(state.queues[p.name] for p in consumed)
    return state.firing_count == 0


@dataclass
class _Completed:
    component_id: str
    firing_index: int
    inputs: Dict[str, DataToken]
    host_node: str
    started_at: datetime
    ended_at: datetime
    result: Optional[FiringResult] = None
    error: Optional[BaseException] = None


@dataclass
class RunState:
    run_id: str
    workflow: WorkflowDefinition
    record: WorkflowRunRecord
    components: Dict[str, ComponentState]
    outgoing: Dict[Tuple[str, str], List[Endpoint]]
    builtins: Dict[str, BuiltinComponent]
    publications: Dict[str, PublicationRecord]
    status: RunStatus = RunStatus.PREPARING
    in_transit: int = 0
    arrivals: int = 0
    sequences: Dict[Tuple[str, str], int] = field(default_factory=dict)
    tasks: Dict[str, "asyncio.Task[None]"] = field(default_factory=dict)
    messages: "asyncio.Queue[Any]" = field(default_factory=asyncio.Queue)
    coordinator: Optional["asyncio.Task[WorkflowRunRecord]"] = None

    def running(self) -> List[str]:
        return [
            cid
            for cid, st in self.components.items()
            if st.status is ComponentStatus.RUNNING
        ]


class WorkflowEngine:
    """Controller-side scheduler for workflow runs.

    Args:
        node_id: Node id recorded as controller and as host of built-ins.
        run_store: Journal receiving run and firing records.
        blobs: Blob store holding file values and console captures.
        tool_runner: Runs local tools and script built-ins.
        catalog: Returns the catalog used to validate and place tools.
        registry: Local tool registry; used by the default tool dispatcher.
        dispatch_tool: Runs a tool component on its hosting node; defaults to
            local execution.
        max_parallel_firings: Concurrent local tool/script runs.
        cancel_grace: Seconds a cancelled firing gets before it is killed.
        sequential: Fire one component at a time, smallest id first.
    """

    def __init__(
        self,
        node_id: str,
        run_store: RunStore,
        blobs: BlobStore,
        tool_runner: ToolRunner,
        catalog: Callable[[], Catalog],
        registry: Optional[ToolRegistry] = None,
        dispatch_tool: Optional[ToolDispatcher] = None,
        max_parallel_firings: int = 1,
        cancel_grace: float = 10.0,
        sequential: bool = False,
        firing_slots: Optional[asyncio.Semaphore] = None,
    ):
        self.node_id = node_id
        self.run_store = run_store
        self.blobs = blobs
        self.tool_runner = tool_runner
        self.catalog = catalog
        self.registry = registry
        self.dispatch_tool = dispatch_tool or self.run_local_tool
        self.cancel_grace = cancel_grace
        self.sequential = sequential
        self.firing_slots = firing_slots or asyncio.Semaphore(max_parallel_firings)
        self.listeners: List[EventSink] = []
        self._runs: Dict[str, RunState] = {}

    # --- public API ---------------------------------------------------------

    def add_listener(self, sink: EventSink) -> None:
        self.listeners.append(sink)

    def remove_listener(self, sink: EventSink) -> None:
        if sink in self.listeners:
            self.listeners.remove(sink)

    async def start_run(
        self,
        wf: WorkflowDefinition,
        submitter: Optional[str] = None,
        run_id: Optional[str] = None,
    ) -> str:
        """Validate ``wf``, register the run and start its coordinator.

        Raises:
            ValidationFailed: The workflow has violations.
            UnresolvableComponent: A tool component has no hosting node.
        """
        snapshot = canonical_serialize(wf)
        catalog = self.catalog()
        require_valid(wf, catalog)
        publications = {
            c.id: catalog.resolve(c)
            for c in wf.components
            if c.kind is ComponentKind.TOOL
        }
        builtins = {
            c.id: create_builtin(c.builtin, c.config, c.ports)
            for c in wf.components
            if c.kind is ComponentKind.BUILTIN
        }
        for component in wf.components:
            for value in component.config.values():
                missing = self.blobs.missing(value)
                if missing:
                    raise UnknownBlob(
                        f"component {component.id!r} references missing blob "
                        f"{missing[0]}",
                        {"hash": missing[0]},
                    )

        run_id = run_id or secrets.token_hex(16)
        record = self.run_store.open_run(
            WorkflowRunRecord(
                run_id=run_id,
                workflow=snapshot,
                submitter_node=submitter or self.node_id,
                controller_node=self.node_id,
                started_at=utc_now(),
            )
        )
        outgoing: Dict[Tuple[str, str], List[Endpoint]] = {}
        for conn in wf.connections:
            key = (conn.source.component, conn.source.port)
            outgoing.setdefault(key, []).append(conn.target)
        run = RunState(
            run_id=run_id,
            workflow=wf,
            record=record,
            components={
                c.id: ComponentState(c, source_pending=c.is_source)
                for c in wf.components
            },
            outgoing=outgoing,
            builtins=builtins,
            publications=publications,
        )
        self._runs[run_id] = run
        run.coordinator = asyncio.create_task(self._coordinate(run))
        logger.info(
            "Started run %s of workflow %r (%d components)",
            run_id,
            wf.name,
            len(wf.components),
        )
        return run_id

    async def wait(self, run_id: str) -> WorkflowRunRecord:
        """Block until the run ends and return its final record."""
        run = self._runs.get(run_id)
        if run is None or run.coordinator is None:
            return self.run_store.get_run(run_id)
        return await asyncio.shield(run.coordinator)

    async def run(
        self, wf: WorkflowDefinition, submitter: Optional[str] = None
    ) -> WorkflowRunRecord:
        return await self.wait(await self.start_run(wf, submitter))

    async def cancel_run(self, run_id: str) -> WorkflowRunRecord:
        """Cancel a running run and wait for its firings to stop.

        Raises:
            UnknownRun: The run does not exist or is no longer running.
        """
        run = self._runs.get(run_id)
        if run is None or run.status.is_terminal:
            status = (
                run.status.value
                if run is not None
                else self.run_store.get_run(run_id).status.value
            )
            raise UnknownRun(
                f"run {run_id} is {status}, not Running",
                {"runId": run_id, "status": status},
            )
        run.messages.put_nowait(("cancel", None))
        return await self.wait(run_id)

    def run_state(self, run_id: str) -> RunState:
        try:
            return self._runs[run_id]
        except KeyError:
            raise UnknownRun(f"unknown run {run_id}", {"runId": run_id}) from None

    def active_runs(self) -> List[str]:
        return [rid for rid, r in self._runs.items() if not r.status.is_terminal]

    # --- events -------------------------------------------------------------

    def _emit(self, run: RunState, name: str, **fields: Any) -> None:
        event = {
            "event": name,
            "runId": run.run_id,
            "at": format_timestamp(utc_now()),
            **fields,
        }
        logger.debug("event %s", event_line(event))
        for sink in list(self.listeners):
            try:
                sink(event)
            except Exception:
                logger.exception("Event listener failed")

    # --- coordinator --------------------------------------------------------

    async def _coordinate(self, run: RunState) -> WorkflowRunRecord:
        bind_run(run.run_id)
        run.status = RunStatus.RUNNING
        run.record = self.run_store.set_status(run.run_id, RunStatus.RUNNING)
        self._emit(run, "RunStarted", workflow=run.workflow.name)
        try:
            while True:
                self._dispatch_ready(run)
                if self.detect_termination(run):
                    return self._finish(run)
                kind, payload = await run.messages.get()
                if kind == "cancel":
                    return await self._abort(run, RunStatus.CANCELLED, None)
                completed: _Completed = payload
                if completed.error is not None:
                    self._record_failure(run, completed)
                    return await self._abort(
                        run, RunStatus.FAILED, _error_body(completed.error)
                    )
                self._complete(run, completed)
        except asyncio.CancelledError:
            await self._abort(run, RunStatus.CANCELLED, None)
            raise
        except Exception as e:
            logger.exception("Run %s aborted by internal error", run.run_id)
            return await self._abort(run, RunStatus.FAILED, _error_body(e))

    def _dispatch_ready(self, run: RunState) -> None:
        if self.sequential:
            if run.running():
                return
            ready = [cid for cid in sorted(run.components) if self.is_ready(run, cid)]
            if ready:
                self.fire(run, ready[0])
            return
        for cid in sorted(run.components):
            if self.is_ready(run, cid):
                self.fire(run, cid)

    def is_ready(self, run: RunState, component_id: str) -> bool:
        return is_ready(run.components[component_id])

    def detect_termination(self, run: RunState) -> bool:
        """True once nothing runs, nothing is in transit and nothing can fire."""
        if run.running() or run.in_transit:
            return False
        return not any(self.is_ready(run, cid) for cid in run.components)

    def fire(self, run: RunState, component_id: str) -> None:
        """Dequeue inputs for one firing and dispatch it.

        Raises:
            EnginePreconditionError: The component is not ready.
        """
        state = run.components[component_id]
        if not is_ready(state):
            raise EnginePreconditionError(
                f"component {component_id!r} fired while not ready",
                {"componentId": component_id},
            )
        component = state.component
        inputs: Dict[str, DataToken] = {}
        non_empty = [name for name, q in state.queues.items() if q]
        if component.builtin == "merger" and non_empty:
            # earliest arrival across all inputs
            non_empty = [min(non_empty, key=lambda n: state.queues[n][0][0])]
        for name in non_empty:
            inputs[name] = state.queues[name].popleft()[1]
        inputs.update(state.constants)

        index = state.firing_count
        state.firing_count += 1
        state.status = ComponentStatus.RUNNING
        state.source_pending = False
        publication = run.publications.get(component_id)
        host = publication.host_node if publication else self.node_id
        self._emit(
            run,
            "FiringStarted",
            componentId=component_id,
            firingIndex=index,
            hostNode=host,
        )
        run.tasks[component_id] = asyncio.create_task(
            self._execute(run, component, index, inputs, host)
        )

    async def _execute(
        self,
        run: RunState,
        component: ComponentInstance,
        index: int,
        inputs: Dict[str, DataToken],
        host: str,
    ) -> None:
        started = utc_now()
        values = {name: token.value for name, token in inputs.items()}
        result: Optional[FiringResult] = None
        error: Optional[BaseException] = None
        try:
            if component.kind is ComponentKind.BUILTIN:
                ctx = FiringContext(component.id, self.blobs, self._run_script)
                result = await run.builtins[component.id].fire(values, ctx)
            else:
                result = await self.dispatch_tool(
                    run.run_id, component, run.publications[component.id], values
                )
        except asyncio.CancelledError:
            raise
        except Exception as e:
            error = e
        run.in_transit += 1
        run.messages.put_nowait(
            (
                "done",
                _Completed(
                    component_id=component.id,
                    firing_index=index,
                    inputs=inputs,
                    host_node=host,
                    started_at=started,
                    ended_at=utc_now(),
                    result=result,
                    error=error,
                ),
            )
        )

    async def _run_script(
        self,
        script: str,
        ports: Sequence[PortSpec],
        inputs: Dict[str, DataValue],
        label: str = "script",
    ):
        async with self.firing_slots:
            return await self.tool_runner.run_script(script, ports, inputs, label=label)

    async def run_local_tool(
        self,
        run_id: str,
        component: ComponentInstance,
        publication: PublicationRecord,
        inputs: Dict[str, DataValue],
    ) -> FiringResult:
        """Run a tool installed on this node (the default dispatcher)."""
        if self.registry is None:
            raise EnginePreconditionError("no local tool registry configured")
        manifest = self.registry.resolve(
            component.tool or "", component.channel or Channel.STABLE
        )
        async with self.firing_slots:
            outputs, ctx = await self.tool_runner.execute(manifest, inputs)
        return FiringResult(
            outputs={name: [value] for name, value in outputs.items()},
            stdout=ctx.stdout,
            stderr=ctx.stderr,
            exit_code=ctx.exit_code,
        )

    # --- completion and routing --------------------------------------------

    def _complete(self, run: RunState, done: _Completed) -> None:
        state = run.components[done.component_id]
        component = state.component
        result = done.result or FiringResult()
        run.tasks.pop(done.component_id, None)

        undeclared = set(result.outputs) - {p.name for p in component.outputs}
        if undeclared:
            raise EnginePreconditionError(
                f"component {component.id!r} produced undeclared outputs "
                f"{sorted(undeclared)}"
            )
        now = utc_now()
        outputs: Dict[str, Tuple[DataToken, ...]] = {}
        for port in component.outputs:
            tokens = []
            for value in result.outputs.get(port.name, []):
                key = (component.id, port.name)
                sequence = run.sequences.get(key, 0)
                run.sequences[key] = sequence + 1
                tokens.append(DataToken(value, component.id, port.name, sequence, now))
            if tokens:
                outputs[port.name] = tuple(tokens)

        self.run_store.record_component_run(
            ComponentRunRecord(
                run_id=run.run_id,
                component_id=component.id,
                firing_index=done.firing_index,
                host_node=done.host_node,
                inputs=done.inputs,
                outputs=outputs,
                stdout=self.blobs.put_text(result.stdout) if result.stdout else None,
                stderr=self.blobs.put_text(result.stderr) if result.stderr else None,
                exit=ExitInfo(
                    exit_code=result.exit_code,
                    wall_clock=(done.ended_at - done.started_at).total_seconds(),
                ),
                started_at=done.started_at,
                ended_at=done.ended_at,
            )
        )
        if result.finished or not component.inputs:
            state.status = ComponentStatus.FINISHED
        else:
            state.status = ComponentStatus.IDLE
        self._emit(
            run,
            "FiringFinished",
            componentId=component.id,
            firingIndex=done.firing_index,
            outcome="ok",
        )
        self.route_outputs(run, component, outputs)
        run.in_transit -= 1

    def route_outputs(
        self,
        run: RunState,
        component: ComponentInstance,
        outputs: Dict[str, Tuple[DataToken, ...]],
    ) -> None:
        """Deliver tokens by output declaration order, then connection order."""
        for port in component.outputs:
            for token in outputs.get(port.name, ()):
                for target in run.outgoing.get((component.id, port.name), []):
                    self._deliver(run, target, token)
                    self._emit(
                        run,
                        "TokenRouted",
                        source=f"{component.id}.{port.name}",
                        target=str(target),
                        sequence=token.sequence,
                    )

    def _deliver(self, run: RunState, target: Endpoint, token: DataToken) -> None:
        state = run.components[target.component]
        port = state.component.input_port(target.port)
        if port is None:
            raise EnginePreconditionError(f"no input port {target}")
        if port.is_constant:
            state.constants[port.name] = token
        else:
            run.arrivals += 1
            state.queues[port.name].append((run.arrivals, token))

    # --- termination --------------------------------------------------------

    def _finish(self, run: RunState) -> WorkflowRunRecord:
        stranded = {
            cid: st.queued() for cid, st in run.components.items() if st.queued()
        }
        if stranded:
            logger.warning(
                "Run %s finished with stranded tokens: %s",
                run.run_id,
                ", ".join(f"{cid} ({n})" for cid, n in sorted(stranded.items())),
            )
        run.status = RunStatus.FINISHED
        run.record = self.run_store.set_status(run.run_id, RunStatus.FINISHED)
        self._emit(run, "RunFinished", stranded=stranded)
        logger.info("Run %s finished", run.run_id)
        return run.record

    def _record_failure(self, run: RunState, done: _Completed) -> None:
        run.tasks.pop(done.component_id, None)
        state = run.components[done.component_id]
        state.status = ComponentStatus.FAILED
        error = done.error
        stdout, stderr, exit_code = _console_of(error)
        logger.error(
            "Component %s firing %d failed: %s",
            done.component_id,
            done.firing_index,
            error,
        )
        self.run_store.record_component_run(
            ComponentRunRecord(
                run_id=run.run_id,
                component_id=done.component_id,
                firing_index=done.firing_index,
                host_node=done.host_node,
                inputs=done.inputs,
                outputs={},
                stdout=self.blobs.put_text(stdout) if stdout else None,
                stderr=self.blobs.put_text(stderr) if stderr else None,
                exit=ExitInfo(
                    exit_code=exit_code,
                    wall_clock=(done.ended_at - done.started_at).total_seconds(),
                    error=_error_body(error),
                ),
                started_at=done.started_at,
                ended_at=done.ended_at,
            )
        )
        self._emit(
            run,
            "FiringFinished",
            componentId=done.component_id,
            firingIndex=done.firing_index,
            outcome="failed",
        )
        run.in_transit -= 1

    async def _abort(
        self,
        run: RunState,
        status: RunStatus,
        cause: Optional[Dict[str, Any]],
    ) -> WorkflowRunRecord:
        """Cancel running firings, drop queues and close the run."""
        tasks = [t for t in run.tasks.values() if not t.done()]
        for task in tasks:
            task.cancel()
        if tasks:
            await asyncio.gather(*tasks, return_exceptions=True)
        for cid in run.running():
            run.components[cid].status = ComponentStatus.CANCELLED
        for state in run.components.values():
            for queue in state.queues.values():
                queue.clear()
        run.tasks.clear()
        run.status = status
        if not run.record.status.is_terminal:
            run.record = self.run_store.set_status(run.run_id, status, cause)
        event = "RunCancelled" if status is RunStatus.CANCELLED else "RunFailed"
        self._emit(run, event, cause=cause)
        logger.info("Run %s %s", run.run_id, status.value.lower())
        return run.record


def _error_body(error: BaseException) -> Dict[str, Any]:
    if isinstance(error, FlowmeshError):
        body = error.to_wire()
        body["detail"] = {
            k: v for k, v in body["detail"].items() if k not in ("stdout", "stderr")
        }
        return body
    return {"code": "INTERNAL_ERROR", "message": repr(error), "detail": {}}


def _console_of(error: Optional[BaseException]) -> Tuple[str, str, Optional[int]]:
    if isinstance(error, ToolRunError):
        return error.stdout, error.stderr, error.exit_code
    if isinstance(error, RemoteFailure):
        cause = error.detail.get("cause") or {}
        detail = cause.get("detail") or {}
        return (
            detail.get("stdout") or "",
            detail.get("stderr") or "",
            detail.get("exitCode"),
        )
    return "", "", None
