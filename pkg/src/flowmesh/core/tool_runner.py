"""Runs integrated tools: stage inputs, pre-script, command, post-script, harvest.

Scripts and tools exchange data with the engine through files in the run
directory:

* ``inputs.json`` - the inputs as delivered by the engine
* ``tool_inputs.json`` - a copy the pre-script may rewrite; command
  placeholders are filled from it
* ``outputs.json`` - written by the tool or the post-script; only declared
  output ports are harvested
"""

import asyncio
import codecs
import json
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Type

import psutil

from flowmesh.core.blobs import BlobStore
from flowmesh.core.manifests import PLACEHOLDER_RE
from flowmesh.exceptions import (
    DataValueError,
    OutputTypeError,
    PostScriptFailed,
    PreScriptFailed,
    ScriptFailed,
    ToolFailed,
    ToolRunError,
    ToolTimeout,
)
from flowmesh.logging_config import get_logger
from flowmesh.models.manifest import DEFAULT_TIMEOUT_SECONDS, ToolManifest
from flowmesh.models.values import (
    DataType,
    DataValue,
    format_timestamp,
    utc_now,
    value_from_json,
    value_to_json,
)
from flowmesh.models.workflow import PortSpec

logger = get_logger(__name__)

INPUTS_FILE = "inputs.json"
TOOL_INPUTS_FILE = "tool_inputs.json"
OUTPUTS_FILE = "outputs.json"

# Called with ("stdout" | "stderr", text) as console output arrives.
ConsoleSink = Callable[[str, str], None]


@dataclass
class ToolRunContext:
    """Everything observed about one tool run."""

    run_dir: Path
    staged_inputs: Dict[str, DataValue] = field(default_factory=dict)
    stdout: str = ""
    stderr: str = ""
    exit_code: Optional[int] = None
    wall_clock: float = 0.0


@dataclass
class _Stage:
    label: str
    argv: List[str]
    error: Type[ToolRunError]
    accepted: frozenset = frozenset({0})


def scalar_argument(value: DataValue) -> str:
    """Text form of a scalar used when substituting ``${input:NAME}``."""
    if value.type is DataType.BOOLEAN:
        return "true" if value.value else "false"
    if value.type is DataType.FLOAT:
        return repr(value.value)
    if value.type is DataType.FLOAT_LIST:
        return ",".join(repr(x) for x in value.value)
    return str(value.value)


class ToolRunner:
    """Executes tool manifests and script components in fresh run directories."""

    def __init__(
        self,
        work_dir: Path,
        blobs: BlobStore,
        interpreter: Sequence[str],
        cancel_grace: float = 10.0,
        script_timeout: float = DEFAULT_TIMEOUT_SECONDS,
    ):
        self.work_dir = Path(work_dir)
        self.blobs = blobs
        self.interpreter = list(interpreter)
        self.cancel_grace = cancel_grace
        self.script_timeout = script_timeout
        self.force_kills = 0

    # --- public API ---------------------------------------------------------

    async def execute(
        self,
        manifest: ToolManifest,
        inputs: Dict[str, DataValue],
        console: Optional[ConsoleSink] = None,
    ) -> Tuple[Dict[str, DataValue], ToolRunContext]:
        """Run the full pipeline for one firing of ``manifest``.

        Raises:
            PreScriptFailed, ToolFailed, PostScriptFailed: A stage exited with
                a code it is not allowed to.
            ToolTimeout: The whole pipeline exceeded ``timeout_seconds``.
            OutputTypeError: A declared output is missing or mistyped.
        """
        ctx = self._new_context(manifest.tool_id)
        deadline = asyncio.get_running_loop().time() + manifest.timeout_seconds
        started = time.monotonic()
        try:
            self._stage_inputs(ctx, manifest.ports, inputs)
            if manifest.pre_script is not None:
                await self._run_stage(
                    ctx,
                    self._script_stage(
                        ctx, "pre_script", manifest.pre_script, PreScriptFailed
                    ),
                    deadline,
                    console,
                )
            command = self._substitute(manifest, ctx.run_dir)
            await self._run_stage(
                ctx,
                _Stage("command", command, ToolFailed, manifest.expected_exit_codes),
                deadline,
                console,
            )
            if manifest.post_script is not None:
                await self._run_stage(
                    ctx,
                    self._script_stage(
                        ctx, "post_script", manifest.post_script, PostScriptFailed
                    ),
                    deadline,
                    console,
                )
            outputs = self._collect_outputs(ctx, manifest.ports)
        finally:
            ctx.wall_clock = time.monotonic() - started
        logger.info(
            "Tool %s (%s) finished in %.2fs, exit %s",
            manifest.tool_id,
            manifest.channel.value,
            ctx.wall_clock,
            ctx.exit_code,
        )
        return outputs, ctx

    async def run_script(
        self,
        script: str,
        ports: Sequence[PortSpec],
        inputs: Dict[str, DataValue],
        timeout: Optional[float] = None,
        console: Optional[ConsoleSink] = None,
        label: str = "script",
    ) -> Tuple[Dict[str, DataValue], ToolRunContext]:
        """Run a script component: the tool pipeline without a command stage."""
        ctx = self._new_context(f"_{label}")
        deadline = asyncio.get_running_loop().time() + (timeout or self.script_timeout)
        started = time.monotonic()
        try:
            self._stage_inputs(ctx, ports, inputs)
            await self._run_stage(
                ctx,
                self._script_stage(ctx, "script", script, ScriptFailed),
                deadline,
                console,
            )
            outputs = self._collect_outputs(ctx, ports)
        finally:
            ctx.wall_clock = time.monotonic() - started
        return outputs, ctx

    # --- staging ------------------------------------------------------------

    def _new_context(self, name: str) -> ToolRunContext:
        parent = self.work_dir / name
        parent.mkdir(parents=True, exist_ok=True)
        stamp = format_timestamp(utc_now()).replace(":", "").replace(".", "-")
        run_dir = Path(tempfile.mkdtemp(prefix=f"{stamp}-", dir=parent))
        logger.debug("Created run directory %s", run_dir)
        return ToolRunContext(run_dir=run_dir)

    def _stage_inputs(
        self,
        ctx: ToolRunContext,
        ports: Sequence[PortSpec],
        inputs: Dict[str, DataValue],
    ) -> None:
        declared = {p.name: p for p in ports if p.is_input}
        document: Dict[str, Any] = {}
        for port in declared.values():
            if port.required and port.name not in inputs:
                raise DataValueError(f"required input {port.name!r} not supplied")
        for name in sorted(inputs):
            value = inputs[name]
            port = declared.get(name)
            if port is None:
                logger.debug("Ignoring undeclared input %s", name)
                continue
            if value.type is not port.datatype:
                raise DataValueError(
                    f"input {name!r} expects {port.datatype.value}, "
                    f"got {value.type.value}"
                )
            if value.type.is_blob:
                rel = f"inputs/{name}"
                self.blobs.materialize(value, ctx.run_dir / rel)
                entry = value_to_json(value)
                entry["path"] = rel
                document[name] = entry
            else:
                document[name] = value_to_json(value)
            ctx.staged_inputs[name] = value
        text = json.dumps(document, indent=2, sort_keys=True) + "\n"
        (ctx.run_dir / INPUTS_FILE).write_text(text, encoding="utf-8")
        (ctx.run_dir / TOOL_INPUTS_FILE).write_text(text, encoding="utf-8")

    def _script_stage(
        self,
        ctx: ToolRunContext,
        name: str,
        text: str,
        error: Type[ToolRunError],
    ) -> _Stage:
        path = ctx.run_dir / name
        path.write_text(text, encoding="utf-8")
        return _Stage(name, [*self.interpreter, str(path)], error)

    def _substitute(self, manifest: ToolManifest, run_dir: Path) -> List[str]:
        """Expand command placeholders from ``tool_inputs.json``."""
        try:
            tool_inputs = json.loads(
                (run_dir / TOOL_INPUTS_FILE).read_text(encoding="utf-8")
            )
        except (OSError, json.JSONDecodeError) as e:
            raise ToolFailed(f"cannot read {TOOL_INPUTS_FILE}: {e}") from e

        def expand(name: str) -> str:
            if name == "run_dir":
                return str(run_dir)
            if name == "tool_dir":
                return str(manifest.bundle_dir or run_dir)
            if name == "interpreter":
                return " ".join(self.interpreter)
            port = name[len("input:") :]
            entry = tool_inputs.get(port)
            if entry is None:
                return ""
            if isinstance(entry, dict) and "path" in entry:
                return str(run_dir / entry["path"])
            try:
                return scalar_argument(value_from_json(entry))
            except DataValueError as e:
                raise ToolFailed(f"tool input {port!r} is malformed: {e}") from e

        argv: List[str] = []
        for arg in manifest.command:
            if arg == "${interpreter}":
                argv.extend(self.interpreter)
                continue
            argv.append(PLACEHOLDER_RE.sub(lambda m: expand(m.group(1)), arg))
        return argv

    # --- process handling ---------------------------------------------------

    async def _run_stage(
        self,
        ctx: ToolRunContext,
        stage: _Stage,
        deadline: float,
        console: Optional[ConsoleSink],
    ) -> None:
        logger.debug("Running %s: %s", stage.label, stage.argv)
        try:
            proc = await asyncio.create_subprocess_exec(
                *stage.argv,
                cwd=str(ctx.run_dir),
                stdin=asyncio.subprocess.DEVNULL,
                stdout=asyncio.subprocess.PIPE,
                stderr=asyncio.subprocess.PIPE,
                start_new_session=True,
            )
        except OSError as e:
            raise stage.error(
                f"{stage.label} could not be started: {e}",
                stdout=ctx.stdout,
                stderr=ctx.stderr,
            ) from e

        pumps = asyncio.gather(
            self._pump(proc.stdout, "stdout", ctx, console),
            self._pump(proc.stderr, "stderr", ctx, console),
        )
        remaining = deadline - asyncio.get_running_loop().time()
        try:
            await asyncio.wait_for(
                asyncio.gather(pumps, proc.wait()), timeout=max(remaining, 0.0)
            )
        except asyncio.TimeoutError:
            await self._stop_process_tree(proc, grace=0.0)
            raise ToolTimeout(
                f"{stage.label} exceeded the wall-clock budget",
                stdout=ctx.stdout,
                stderr=ctx.stderr,
            ) from None
        except asyncio.CancelledError:
            await self._stop_process_tree(proc, grace=self.cancel_grace)
            raise

        code = proc.returncode
        if stage.label == "command":
            ctx.exit_code = code
        if code not in stage.accepted:
            raise stage.error(
                f"{stage.label} exited with code {code}",
                exit_code=code,
                stdout=ctx.stdout,
                stderr=ctx.stderr,
            )

    async def _pump(
        self,
        stream: Optional[asyncio.StreamReader],
        name: str,
        ctx: ToolRunContext,
        console: Optional[ConsoleSink],
    ) -> None:
        if stream is None:
            return
        decoder = codecs.getincrementaldecoder("utf-8")(errors="replace")
        while True:
            chunk = await stream.read(4096)
            text = decoder.decode(chunk, final=not chunk)
            if text:
                setattr(ctx, name, getattr(ctx, name) + text)
                if console is not None:
                    console(name, text)
            if not chunk:
                return

    async def _stop_process_tree(
        self, proc: asyncio.subprocess.Process, grace: float
    ) -> None:
        """Terminate the process and its descendants, killing stragglers."""
        try:
            parent = psutil.Process(proc.pid)
            tree = parent.children(recursive=True) + [parent]
        except psutil.NoSuchProcess:
            tree = []
        for p in tree:
            try:
                p.terminate()
            except (psutil.NoSuchProcess, psutil.AccessDenied):
                pass
        if grace > 0:
            try:
                await asyncio.wait_for(proc.wait(), timeout=grace)
            except asyncio.TimeoutError:
                pass
        survivors = [p for p in tree if _alive(p)]
        if survivors:
            self.force_kills += 1
            for p in survivors:
                logger.warning("Killing process %s", p.pid)
                try:
                    p.kill()
                except (psutil.NoSuchProcess, psutil.AccessDenied):
                    pass
        await proc.wait()

    # --- harvesting ---------------------------------------------------------

    def _collect_outputs(
        self, ctx: ToolRunContext, ports: Sequence[PortSpec]
    ) -> Dict[str, DataValue]:
        outputs = [p for p in ports if not p.is_input]
        path = ctx.run_dir / OUTPUTS_FILE
        if not path.exists():
            if not outputs:
                return {}
            raise self._output_error(ctx, f"{OUTPUTS_FILE} was not written")
        try:
            document = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise self._output_error(ctx, f"{OUTPUTS_FILE} is not valid JSON: {e}")
        if not isinstance(document, dict):
            raise self._output_error(ctx, f"{OUTPUTS_FILE} must hold a JSON object")

        result: Dict[str, DataValue] = {}
        for port in outputs:
            if port.name not in document:
                raise self._output_error(
                    ctx, f"declared output {port.name!r} missing from {OUTPUTS_FILE}"
                )
            result[port.name] = self._decode_output(ctx, port, document[port.name])
        discarded = sorted(set(document) - {p.name for p in outputs})
        if discarded:
            logger.debug("Discarding undeclared outputs %s", discarded)
        return result

    def _decode_output(
        self, ctx: ToolRunContext, port: PortSpec, raw: Any
    ) -> DataValue:
        declared = raw.get("type") if isinstance(raw, dict) else None
        if declared is not None and declared != port.datatype.value:
            raise self._output_error(
                ctx,
                f"output {port.name!r} is {raw['type']}, "
                f"port expects {port.datatype.value}",
            )
        if port.datatype.is_blob:
            rel = raw.get("path") if isinstance(raw, dict) else raw
            if not isinstance(rel, str):
                raise self._output_error(ctx, f"output {port.name!r} needs a path")
            target = (ctx.run_dir / rel).resolve()
            if ctx.run_dir.resolve() not in target.parents:
                raise self._output_error(
                    ctx, f"output {port.name!r} points outside the run directory"
                )
            if port.datatype is DataType.FILE:
                if not target.is_file():
                    raise self._output_error(ctx, f"output file {rel!r} not found")
                filename = raw.get("filename") if isinstance(raw, dict) else None
                try:
                    return self.blobs.ingest_file(target, filename or target.name)
                except DataValueError as e:
                    raise self._output_error(ctx, f"output {port.name!r}: {e}") from e
            if not target.is_dir():
                raise self._output_error(ctx, f"output directory {rel!r} not found")
            return self.blobs.ingest_directory(target)

        if isinstance(raw, dict):
            body = raw
        else:
            body = {"type": port.datatype.value, "value": raw}
        try:
            value = value_from_json(body)
        except DataValueError as e:
            raise self._output_error(ctx, f"output {port.name!r}: {e}") from e
        return value

    def _output_error(self, ctx: ToolRunContext, message: str) -> OutputTypeError:
        return OutputTypeError(
            message, exit_code=ctx.exit_code, stdout=ctx.stdout, stderr=ctx.stderr
        )

    def cleanup(self, ctx: ToolRunContext) -> None:
        """Remove a run directory (retention is otherwise manual)."""
        shutil.rmtree(ctx.run_dir, ignore_errors=True)


def _alive(proc: psutil.Process) -> bool:
    try:
        return proc.is_running() and proc.status() != psutil.STATUS_ZOMBIE
    except psutil.NoSuchProcess:
        return False
