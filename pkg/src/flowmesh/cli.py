"""Command-line interface for flowmesh."""

import asyncio
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Awaitable, Dict, List, Optional, Tuple, TypeVar

import typer
from rich.console import Console
from rich.table import Table

from flowmesh import __version__
from flowmesh.client import DaemonClient
from flowmesh.config import Profile
from flowmesh.core.blobs import BlobStore
from flowmesh.core.manifests import ToolRegistry, manifest_to_json
from flowmesh.core.workflow_io import load_workflow, serialize_workflow
from flowmesh.exceptions import FlowmeshError, NetworkError
from flowmesh.logging_config import bind_node, get_logger, setup_logging
from flowmesh.models.workflow import Channel
from flowmesh.network.identity import KeyRing, generate_key, parse_key
from flowmesh.node import Node
from flowmesh.remote import TERMINAL_EVENTS

logger = get_logger(__name__)

T = TypeVar("T")

EXIT_USER_ERROR = 1
EXIT_TRANSPORT_ERROR = 2

app = typer.Typer(
    name="flowmesh",
    help="Distributed workflow integration engine.",
    add_completion=False,
)
tool_app = typer.Typer(help="Integrate tools on this node.")
group_app = typer.Typer(help="Manage access group keys.")
net_app = typer.Typer(help="Inspect and extend the network.")
components_app = typer.Typer(help="Browse the component catalog.")
run_app = typer.Typer(help="Submit and monitor workflow runs.")
app.add_typer(tool_app, name="tool")
app.add_typer(group_app, name="group")
app.add_typer(net_app, name="net")
app.add_typer(components_app, name="components")
app.add_typer(run_app, name="run")

console = Console()
err_console = Console(stderr=True)


@dataclass
class CliState:
    profile: Profile
    json_output: bool = False

    def address(self) -> Tuple[str, int]:
        config = self.profile.load_config()
        return config.network.listen_host, config.network.listen_port


def _state(ctx: typer.Context) -> CliState:
    state = ctx.find_root().obj
    if state is None:
        state = CliState(Profile.resolve())
        ctx.find_root().obj = state
    return state


def _fail(message: str, code: int = EXIT_USER_ERROR) -> typer.Exit:
    err_console.print(f"[red]Error:[/red] {message}")
    return typer.Exit(code)


def run_async(coro: Awaitable[T]) -> T:
    """Run ``coro`` and map failures to the command-line exit codes."""
    try:
        return asyncio.run(coro)
    except NetworkError as e:
        logger.error("Network failure: %s", e)
        raise _fail(str(e), EXIT_TRANSPORT_ERROR)
    except FlowmeshError as e:
        logger.error("Command failed: %s", e)
        violations = e.detail.get("violations") if e.detail else None
        for violation in violations or ():
            err_console.print(
                f"  [yellow]{violation.get('kind')}[/yellow] "
                f"{violation.get('path', '')}: {violation.get('message')}"
            )
        raise _fail(str(e))
    except KeyboardInterrupt:
        console.print("\n[yellow]Cancelled[/yellow]")
        raise typer.Exit(130)


async def call_daemon(
    state: CliState,
    method: str,
    params: Optional[Dict[str, Any]] = None,
    timeout: Optional[float] = None,
) -> Any:
    host, port = state.address()
    async with DaemonClient(host, port) as client:
        return await client.call(method, params, timeout)


def emit(state: CliState, data: Any) -> bool:
    """Print ``data`` as JSON when ``--json`` is set; True if printed."""
    if state.json_output:
        typer.echo(json.dumps(data, indent=2, sort_keys=True))
    return state.json_output


def version_callback(value: bool) -> None:
    if value:
        console.print(f"flowmesh v{__version__}")
        raise typer.Exit()


@app.callback(invoke_without_command=True)
def main(
    ctx: typer.Context,
    version: Optional[bool] = typer.Option(
        None,
        "--version",
        "-V",
        callback=version_callback,
        is_eager=True,
        help="Show version and exit.",
    ),
    verbose: bool = typer.Option(
        False, "--verbose", "-v", help="Enable verbose (DEBUG) logging to stderr."
    ),
    log_file: Optional[Path] = typer.Option(
        None, "--log-file", help="Write logs to this file."
    ),
    profile: Optional[str] = typer.Option(
        None, "--profile", "-p", help="Profile name (default: $FLOWMESH_PROFILE)."
    ),
    home: Optional[Path] = typer.Option(
        None, "--home", help="Directory holding profiles (default: ~/.flowmesh)."
    ),
    json_output: bool = typer.Option(
        False, "--json", help="Print machine-readable JSON."
    ),
) -> None:
    """flowmesh - integrate tools, connect nodes and run workflows."""
    if ctx.invoked_subcommand is None:
        console.print(ctx.get_help())
        raise typer.Exit(0)

    state = CliState(Profile.resolve(home, profile), json_output)
    ctx.obj = state
    config = state.profile.load_config()
    level = "DEBUG" if verbose else config.logging.level
    file_path = log_file or (Path(config.logging.file) if config.logging.file else None)
    setup_logging(level=level, log_file=file_path, console_output=verbose)
    logger.debug("Using profile %s at %s", state.profile.name, state.profile.root)


# --- daemon -----------------------------------------------------------------


async def serve(
    profile: Profile,
    relay: bool,
    host: Optional[str],
    port: Optional[int],
    peers: List[str],
) -> None:
    config = profile.load_config()
    if relay:
        config.node.relay = True
    node = Node(profile, config)
    bind_node(node.node_id)
    address = await node.start(host=host, port=port)
    where = f" listening on {address[0]}:{address[1]}" if address else ""
    console.print(
        f"[green]Node[/green] {node.name} ({node.node_id}){where}"
        + (" [cyan]as relay[/cyan]" if config.node.relay else "")
    )
    for peer in peers:
        peer_host, peer_port = parse_address(peer)
        try:
            info = await node.connect(peer_host, peer_port)
            name = info.display_name or info.node_id
            console.print(f"[green]Connected:[/green] {name}")
        except NetworkError as e:
            err_console.print(f"[yellow]Could not connect to {peer}:[/yellow] {e}")
    try:
        await node.serve_forever()
    finally:
        await node.stop()


def parse_address(text: str) -> Tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise _fail(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


@app.command()
def daemon(
    ctx: typer.Context,
    relay: bool = typer.Option(
        False, "--relay", help="Forward traffic between other nodes."
    ),
    host: Optional[str] = typer.Option(None, "--host", help="Listen address."),
    port: Optional[int] = typer.Option(None, "--port", help="Listen port."),
    connect: List[str] = typer.Option(
        [], "--connect", "-c", help="Peer host:port to connect to at start."
    ),
) -> None:
    """Start a node in the foreground."""
    state = _state(ctx)
    run_async(serve(state.profile, relay, host, port, connect))


# --- tools ------------------------------------------------------------------


def _parse_ports(text: str, direction: str) -> List[Dict[str, str]]:
    ports = []
    for item in filter(None, (part.strip() for part in text.split(","))):
        name, _, dtype = item.partition(":")
        ports.append({"name": name, "type": dtype or "text", "direction": direction})
    return ports


def tool_wizard() -> Dict[str, Any]:
    """Ask for the manifest fields interactively."""
    tool_id = typer.prompt("Tool id ([a-z0-9_-]+)")
    display_name = typer.prompt("Display name", default=tool_id)
    inputs = typer.prompt("Inputs (name:type, comma separated)", default="")
    outputs = typer.prompt("Outputs (name:type, comma separated)", default="")
    command = typer.prompt("Command (use ${input:NAME} for inputs)")
    timeout = typer.prompt("Timeout in seconds", default=3600, type=int)
    return {
        "toolId": tool_id,
        "displayName": display_name,
        "ports": _parse_ports(inputs, "input") + _parse_ports(outputs, "output"),
        "command": command.split(),
        "timeoutSeconds": timeout,
    }


@tool_app.command("add")
def tool_add(
    ctx: typer.Context,
    manifest: Optional[Path] = typer.Argument(
        None, help="manifest.json or the bundle directory holding it."
    ),
    channel: Channel = typer.Option(
        Channel.STABLE, "--channel", help="Version channel to install into."
    ),
    wizard: bool = typer.Option(
        False, "--wizard", help="Build the manifest interactively."
    ),
) -> None:
    """Install a tool bundle; running nodes pick it up on the next firing."""
    state = _state(ctx)
    registry = ToolRegistry(state.profile.ensure().tools_dir)
    try:
        if wizard:
            installed = registry.write_manifest(tool_wizard(), channel)
        elif manifest is None:
            raise _fail("give a manifest path or --wizard")
        elif not manifest.exists():
            raise _fail(f"File not found: {manifest}")
        else:
            installed = registry.install(manifest, channel)
    except FlowmeshError as e:
        raise _fail(str(e))
    if not emit(state, manifest_to_json(installed)):
        console.print(
            f"[green]Installed:[/green] {installed.tool_id} "
            f"({installed.channel.value})"
        )


@tool_app.command("list")
def tool_list(ctx: typer.Context) -> None:
    """List installed tools."""
    state = _state(ctx)
    manifests = ToolRegistry(state.profile.tools_dir).list_manifests()
    if emit(state, [manifest_to_json(m) for m in manifests]):
        return
    table = Table(title="Installed tools", show_header=True)
    table.add_column("Tool", style="cyan")
    table.add_column("Channel", style="green")
    table.add_column("Inputs")
    table.add_column("Outputs")
    for m in manifests:
        table.add_row(
            m.tool_id,
            m.channel.value,
            ", ".join(f"{p.name}:{p.datatype.value}" for p in m.inputs),
            ", ".join(f"{p.name}:{p.datatype.value}" for p in m.outputs),
        )
    console.print(table)


@app.command()
def publish(
    ctx: typer.Context,
    tool_id: str = typer.Argument(..., help="Installed tool id."),
    channel: Channel = typer.Argument(Channel.STABLE, help="Version channel."),
    group: Optional[str] = typer.Option(
        None, "--group", "-g", help="Restrict to an access group."
    ),
) -> None:
    """Offer an installed tool to the network (needs a running daemon)."""
    state = _state(ctx)
    record = run_async(
        call_daemon(
            state,
            "publish",
            {"toolId": tool_id, "channel": channel.value, "group": group},
        )
    )
    if not emit(state, record):
        console.print(
            f"[green]Published:[/green] {tool_id} ({channel.value}) "
            f"to {record.get('group', 'public')}"
        )


@app.command()
def unpublish(
    ctx: typer.Context,
    tool_id: str = typer.Argument(..., help="Published tool id."),
    channel: Channel = typer.Argument(Channel.STABLE, help="Version channel."),
) -> None:
    """Withdraw a publication (needs a running daemon)."""
    state = _state(ctx)
    result = run_async(
        call_daemon(state, "unpublish", {"toolId": tool_id, "channel": channel.value})
    )
    if not emit(state, result):
        console.print(f"[green]Unpublished:[/green] {tool_id} ({channel.value})")


# --- access groups ----------------------------------------------------------


async def _reload_groups(state: CliState) -> None:
    try:
        await call_daemon(state, "reload_groups", timeout=10)
    except NetworkError as e:
        logger.debug("No daemon to reload groups: %s", e)


@group_app.command("add")
def group_add(
    ctx: typer.Context,
    name: str = typer.Argument(..., help="Group name."),
    keyfile: Path = typer.Argument(..., help="Key file (hex text or 32 raw bytes)."),
) -> None:
    """Store a group key received out-of-band."""
    state = _state(ctx)
    try:
        key = parse_key(keyfile.read_bytes())
        group = KeyRing(state.profile.ensure().groups_dir).add(name, key)
    except (OSError, ValueError, FlowmeshError) as e:
        raise _fail(str(e))
    asyncio.run(_reload_groups(state))
    if not emit(state, {"name": group.name, "keyId": group.key_id}):
        console.print(f"[green]Added group:[/green] {group.name} ({group.key_id})")


@group_app.command("new")
def group_new(
    ctx: typer.Context,
    name: str = typer.Argument(..., help="Group name."),
    out: Path = typer.Option(..., "--out", "-o", help="Where to write the key."),
) -> None:
    """Create a group with a fresh key and write the key for sharing."""
    state = _state(ctx)
    key = generate_key()
    try:
        group = KeyRing(state.profile.ensure().groups_dir).add(name, key)
        out.write_text(key.hex() + "\n", encoding="utf-8")
    except (OSError, ValueError, FlowmeshError) as e:
        raise _fail(str(e))
    asyncio.run(_reload_groups(state))
    if not emit(state, {"name": group.name, "keyId": group.key_id}):
        console.print(f"[green]Created group:[/green] {group.name} ({group.key_id})")
        console.print(f"[dim]Key written to {out}; share it out-of-band.[/dim]")


@group_app.command("list")
def group_list(ctx: typer.Context) -> None:
    """List the groups this profile holds keys for."""
    state = _state(ctx)
    ring = KeyRing(state.profile.groups_dir)
    groups = [{"name": n, "keyId": ring.get(n).key_id} for n in ring.names()]
    if emit(state, groups):
        return
    for group in groups:
        console.print(f"{group['name']}  [dim]{group['keyId']}[/dim]")


# --- network ----------------------------------------------------------------


@net_app.command("connect")
def net_connect(
    ctx: typer.Context,
    address: str = typer.Argument(..., help="Peer as host:port."),
) -> None:
    """Have the daemon open a link to another node."""
    state = _state(ctx)
    host, port = parse_address(address)
    peer = run_async(call_daemon(state, "net_connect", {"host": host, "port": port}))
    if not emit(state, peer):
        role = " (relay)" if peer.get("isRelay") else ""
        console.print(
            f"[green]Connected:[/green] {peer.get('displayName')} "
            f"{peer.get('nodeId')}{role}"
        )


@net_app.command("info")
def net_info(ctx: typer.Context) -> None:
    """Show the daemon's links, routes and known nodes."""
    state = _state(ctx)
    info = run_async(call_daemon(state, "node_info"))
    if emit(state, info):
        return
    console.print(
        f"[bold]{info['displayName']}[/bold] {info['nodeId']}"
        + (" [cyan]relay[/cyan]" if info.get("isRelay") else "")
    )
    table = Table(title="Known nodes", show_header=True)
    table.add_column("Node", style="cyan")
    table.add_column("Name")
    table.add_column("Relay")
    table.add_column("Next hop", style="green")
    names = {a["nodeId"]: a for a in info.get("announcements", [])}
    for node_id, ann in names.items():
        table.add_row(
            node_id,
            ann.get("displayName", ""),
            "yes" if ann.get("isRelay") else "",
            info.get("routes", {}).get(node_id, "-"),
        )
    console.print(table)


@components_app.command("list")
def components_list(
    ctx: typer.Context,
    tool: Optional[str] = typer.Option(None, "--tool", help="Only this tool id."),
    host: Optional[str] = typer.Option(None, "--host", help="Only this node."),
) -> None:
    """List local and remote components this node may use."""
    state = _state(ctx)
    result = run_async(
        call_daemon(state, "components_list", {"toolId": tool, "host": host})
    )
    components = result["components"]
    if emit(state, components):
        return
    table = Table(title="Components", show_header=True)
    table.add_column("Tool", style="cyan")
    table.add_column("Channel", style="green")
    table.add_column("Host")
    table.add_column("Group")
    for c in components:
        table.add_row(c["toolId"], c["channel"], c["hostNode"], c["group"])
    console.print(table)


# --- runs -------------------------------------------------------------------


def render_event(event: Dict[str, Any]) -> str:
    name = event.get("event", "?")
    if name == "Console":
        return f"[dim]{event.get('componentId')} {event.get('stream')}:[/dim] " + str(
            event.get("text", "")
        ).rstrip("\n")
    parts = [f"[cyan]{name}[/cyan]"]
    for key in ("componentId", "firingIndex", "host", "status", "cause"):
        if event.get(key) is not None:
            parts.append(f"{key}={event[key]}")
    return " ".join(parts)


async def submit_and_watch(
    state: CliState,
    params: Dict[str, Any],
    wait: bool,
    timeout: Optional[float] = None,
) -> Dict[str, Any]:
    """Submit through the daemon; with ``wait`` stream events until the end."""
    host, port = state.address()
    async with DaemonClient(host, port) as client:
        result = await client.call("submit_run", params)
        run_id = result["runId"]
        if not state.json_output:
            console.print(f"[green]Run:[/green] {run_id}")
        if not wait:
            return result
        while True:
            event = await client.next_event(timeout)
            if event.get("runId") != run_id:
                continue
            if state.json_output:
                typer.echo(json.dumps(event, sort_keys=True))
            else:
                console.print(render_event(event))
            if event.get("event") in TERMINAL_EVENTS:
                break
        status = await client.call(
            "query_run", {"runId": run_id, "controller": result.get("controller")}
        )
        return {"runId": run_id, "run": status["run"]}


@run_app.command("submit")
def run_submit(
    ctx: typer.Context,
    workflow: Path = typer.Argument(..., help="Workflow file (.wf)."),
    controller: Optional[str] = typer.Option(
        None, "--controller", help="Node id that executes the run."
    ),
    wait: bool = typer.Option(
        False, "--wait", "-w", help="Stream events until the run ends."
    ),
) -> None:
    """Submit a workflow to the daemon or to a designated controller."""
    state = _state(ctx)
    if not workflow.is_file():
        raise _fail(f"File not found: {workflow}")
    try:
        wf = load_workflow(workflow, BlobStore(state.profile.store_dir / "blobs"))
    except (OSError, FlowmeshError) as e:
        raise _fail(str(e))
    params: Dict[str, Any] = {"workflow": serialize_workflow(wf)}
    if controller:
        params["controller"] = controller
    result = run_async(submit_and_watch(state, params, wait))
    if not wait:
        emit(state, result)
        return
    status = result["run"]["status"]
    if not state.json_output:
        colour = "green" if status == "Finished" else "red"
        console.print(f"[{colour}]{status}[/{colour}]")
    if status != "Finished":
        raise typer.Exit(EXIT_USER_ERROR)


@run_app.command("status")
def run_status(
    ctx: typer.Context,
    run_id: str = typer.Argument(...),
    controller: Optional[str] = typer.Option(None, "--controller"),
) -> None:
    """Show a run and its firings."""
    state = _state(ctx)
    result = run_async(
        call_daemon(state, "query_run", {"runId": run_id, "controller": controller})
    )
    if emit(state, result):
        return
    run = result["run"]
    console.print(f"[bold]{run['runId']}[/bold] {run['status']}")
    console.print(f"Controller: {run['controllerNode']}")
    console.print(f"Started: {run['startedAt']}  Ended: {run.get('endedAt') or '-'}")
    if run.get("cause"):
        console.print(f"[red]Cause:[/red] {run['cause']}")
    table = Table(show_header=True)
    table.add_column("Component", style="cyan")
    table.add_column("Firing")
    table.add_column("Host")
    table.add_column("Exit")
    for record in result["records"]:
        table.add_row(
            record["componentId"],
            str(record["firingIndex"]),
            record["hostNode"],
            str(record["exit"].get("exitCode")),
        )
    console.print(table)


@run_app.command("records")
def run_records(
    ctx: typer.Context,
    run_id: str = typer.Argument(...),
    component: Optional[str] = typer.Option(None, "--component"),
    controller: Optional[str] = typer.Option(None, "--controller"),
) -> None:
    """Print firing records as JSON."""
    state = _state(ctx)
    result = run_async(
        call_daemon(
            state,
            "query_run",
            {"runId": run_id, "componentId": component, "controller": controller},
        )
    )
    typer.echo(json.dumps(result["records"], indent=2, sort_keys=True))


@run_app.command("list")
def run_list(
    ctx: typer.Context,
    status: Optional[str] = typer.Option(None, "--status"),
    controller: Optional[str] = typer.Option(None, "--controller"),
) -> None:
    """List runs known to the daemon (or to a controller)."""
    state = _state(ctx)
    result = run_async(
        call_daemon(state, "query_runs", {"status": status, "controller": controller})
    )
    if emit(state, result["runs"]):
        return
    table = Table(title="Runs", show_header=True)
    table.add_column("Run", style="cyan")
    table.add_column("Status")
    table.add_column("Started")
    table.add_column("Controller")
    for run in result["runs"]:
        table.add_row(
            run["runId"], run["status"], run["startedAt"], run["controllerNode"]
        )
    console.print(table)


@run_app.command("cancel")
def run_cancel(
    ctx: typer.Context,
    run_id: str = typer.Argument(...),
    controller: Optional[str] = typer.Option(None, "--controller"),
) -> None:
    """Cancel a run on its controller."""
    state = _state(ctx)
    result = run_async(
        call_daemon(state, "cancel_run", {"runId": run_id, "controller": controller})
    )
    if not emit(state, result):
        console.print(f"[yellow]{result['runId']}[/yellow] {result['status']}")


@run_app.command("export")
def run_export(
    ctx: typer.Context,
    run_id: str = typer.Argument(...),
    dest: Path = typer.Option(Path("."), "--dest", "-d", help="Target directory."),
    controller: Optional[str] = typer.Option(None, "--controller"),
) -> None:
    """Export a run's records and artifacts into a directory."""
    state = _state(ctx)
    result = run_async(
        call_daemon(
            state,
            "export_run",
            {
                "runId": run_id,
                "dest": str(dest.resolve()),
                "controller": controller,
            },
            timeout=600,
        )
    )
    if not emit(state, result):
        console.print(f"[green]Exported:[/green] {result['path']}")


# --- configuration ----------------------------------------------------------


@app.command("config")
def config_cmd(
    ctx: typer.Context,
    show: bool = typer.Option(False, "--show", help="Display current configuration"),
    init: bool = typer.Option(
        False, "--init", help="Create default configuration file"
    ),
    path: bool = typer.Option(False, "--path", help="Show configuration file path"),
) -> None:
    """Manage the profile configuration."""
    state = _state(ctx)
    profile = state.profile
    config_path = profile.config_path

    if path:
        console.print(str(config_path))
        return

    if init:
        if config_path.exists():
            console.print(f"[yellow]Config file already exists:[/yellow] {config_path}")
            raise typer.Exit(1)
        profile.ensure()
        created = profile.init_config()
        console.print(f"[green]Created config file:[/green] {created}")
        return

    if show:
        config = profile.load_config()
        if emit(state, config.to_dict()):
            return
        table = Table(title="Configuration", show_header=True)
        table.add_column("Section", style="cyan")
        table.add_column("Setting", style="green")
        table.add_column("Value", style="white")
        for section, values in config.to_dict().items():
            for key, value in values.items():
                table.add_row(section, key, str(value))
        if config.logging.file is None:
            table.add_row("logging", "file", "(none)")
        console.print()
        console.print(table)
        console.print()
        console.print(f"[dim]Config file: {config_path}[/dim]")
        if not config_path.exists():
            console.print("[dim]Config file does not exist (using defaults)[/dim]")
        return

    console.print("Use --show, --init, or --path. See --help for details.")


if __name__ == "__main__":
    app()
