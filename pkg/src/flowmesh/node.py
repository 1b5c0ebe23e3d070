"""A complete flowmesh node assembled from a profile.

One node can host tools, control runs and relay traffic at the same time;
the roles only depend on what is installed and on the ``relay`` flag.
"""

import asyncio
from typing import Any, Callable, Dict, Optional, Tuple

from flowmesh.config import Config, Profile
from flowmesh.core.blobs import BlobStore
from flowmesh.core.engine import WorkflowEngine
from flowmesh.core.journal import HostedCallLog, RunStore
from flowmesh.core.manifests import ToolRegistry, manifest_to_json
from flowmesh.core.tool_runner import ToolRunner
from flowmesh.logging_config import get_logger
from flowmesh.models.workflow import Channel
from flowmesh.network.catalog import PublicationService
from flowmesh.network.identity import PUBLIC_GROUP, KeyRing
from flowmesh.network.links import PeerInfo
from flowmesh.network.mesh import Mesh, TraceSink
from flowmesh.network.rpc import CallContext, RpcEndpoint
from flowmesh.network.transfer import BlobTransfer
from flowmesh.remote import ControllerService, EventHub, RemoteDispatcher, ToolHost

logger = get_logger(__name__)


def _peer_json(peer: PeerInfo) -> Dict[str, Any]:
    return {
        "nodeId": peer.node_id,
        "displayName": peer.display_name,
        "isRelay": peer.is_relay,
        "client": peer.is_client,
    }


class Node:
    """Profile, storage, engine and mesh of one running instance.

    Args:
        profile: Profile directory the node lives in.
        config: Overrides the profile's ``config.toml``.
        make_id: Frame id source (seeded in simulations).
        initial_seq: First announcement sequence number.
        trace: Frame trace sink handed to the mesh.
        sequential: Run the engine in its one-firing-at-a-time mode.
    """

    def __init__(
        self,
        profile: Profile,
        config: Optional[Config] = None,
        make_id: Optional[Callable[[], str]] = None,
        initial_seq: Optional[int] = None,
        trace: Optional[TraceSink] = None,
        sequential: bool = False,
    ):
        self.profile = profile.ensure()
        self.config = config or profile.load_config()
        self.node_id = profile.node_id()
        execution = self.config.execution
        network = self.config.network

        self.blobs = BlobStore(profile.store_dir / "blobs")
        self.run_store = RunStore(profile.store_dir, self.blobs)
        self.hosted_log = HostedCallLog(profile.store_dir)
        self.registry = ToolRegistry(profile.tools_dir)
        self.keyring = KeyRing(profile.groups_dir)
        self.tool_runner = ToolRunner(
            profile.work_dir,
            self.blobs,
            execution.interpreter,
            cancel_grace=execution.cancel_grace,
            script_timeout=execution.default_timeout,
        )
        self.firing_slots = asyncio.Semaphore(max(1, execution.max_parallel_firings))

        self.mesh = Mesh(
            self.node_id,
            display_name=self.config.node.display_name or profile.name,
            relay=self.config.node.relay,
            ttl=network.ttl,
            ping_interval=network.ping_interval,
            ping_misses=network.ping_misses,
            make_id=make_id,
            initial_seq=initial_seq,
            trace=trace,
        )
        self.rpc = RpcEndpoint(self.mesh, call_timeout=network.call_timeout)
        self.transfer = BlobTransfer(self.mesh, self.rpc, self.blobs)
        self.publications = PublicationService(
            self.mesh, self.registry, self.keyring, profile.publications_path
        )
        self.events = EventHub(self.mesh)

        self.dispatcher = RemoteDispatcher(
            self.node_id,
            self.rpc,
            self.transfer,
            cancel_timeout=execution.cancel_grace + 10.0,
        )
        self.engine = WorkflowEngine(
            self.node_id,
            self.run_store,
            self.blobs,
            self.tool_runner,
            catalog=self.publications.catalog,
            registry=self.registry,
            dispatch_tool=self.dispatcher,
            cancel_grace=execution.cancel_grace,
            sequential=sequential,
            firing_slots=self.firing_slots,
        )
        self.dispatcher.local = self.engine.run_local_tool
        self.engine.add_listener(self.events.emit)

        self.tool_host = ToolHost(
            self.mesh,
            self.rpc,
            self.transfer,
            self.publications,
            self.registry,
            self.tool_runner,
            self.blobs,
            self.hosted_log,
            self.firing_slots,
        )
        self.controller = ControllerService(
            self.node_id,
            self.rpc,
            self.transfer,
            self.engine,
            self.run_store,
            self.events,
        )
        self._register_admin()
        self.address: Optional[Tuple[str, int]] = None
        self._stopped = asyncio.Event()

    def __repr__(self) -> str:
        return f"Node({self.mesh.display_name}, {self.node_id[:8]})"

    @property
    def name(self) -> str:
        return self.mesh.display_name

    # --- lifecycle ----------------------------------------------------------

    async def start(
        self,
        listen: bool = True,
        host: Optional[str] = None,
        port: Optional[int] = None,
    ) -> Optional[Tuple[str, int]]:
        """Announce this node and, with ``listen``, accept connections."""
        self.publications.announce()
        if listen:
            self.address = await self.mesh.listen(
                host or self.config.network.listen_host,
                self.config.network.listen_port if port is None else port,
            )
        logger.info(
            "Node %s (%s) started%s",
            self.name,
            self.node_id,
            " as relay" if self.mesh.relay else "",
        )
        return self.address

    async def connect(self, host: str, port: int) -> PeerInfo:
        return await self.mesh.connect(host, port)

    async def serve_forever(self) -> None:
        await self._stopped.wait()

    async def stop(self) -> None:
        for run_id in self.engine.active_runs():
            try:
                await self.engine.cancel_run(run_id)
            except Exception as e:
                logger.warning("Could not cancel run %s: %s", run_id, e)
        await self.mesh.close()
        self._stopped.set()
        logger.info("Node %s stopped", self.name)

    # --- inspection ---------------------------------------------------------

    def info(self) -> Dict[str, Any]:
        mesh = self.mesh
        return {
            "nodeId": self.node_id,
            "displayName": mesh.display_name,
            "isRelay": mesh.relay,
            "address": list(self.address) if self.address else None,
            "seq": mesh.seq,
            "links": [
                _peer_json(p) for p in sorted(mesh.peers(), key=lambda p: p.node_id)
            ],
            "routes": dict(sorted(mesh.routes.items())),
            "announcements": [
                ann.to_json() for _, ann in sorted(mesh.announcements.items())
            ],
            "groups": self.keyring.names(),
        }

    # --- admin RPC for the command line ------------------------------------

    def _register_admin(self) -> None:
        for method, handler in (
            ("node_info", self._rpc_info),
            ("net_connect", self._rpc_connect),
            ("components_list", self._rpc_components),
            ("tool_list", self._rpc_tools),
            ("publish", self._rpc_publish),
            ("unpublish", self._rpc_unpublish),
            ("reload_groups", self._rpc_reload_groups),
        ):
            self.rpc.register(method, handler)

    async def _rpc_info(self, params: Dict[str, Any], ctx: CallContext) -> Any:
        return self.info()

    async def _rpc_connect(self, params: Dict[str, Any], ctx: CallContext) -> Any:
        peer = await self.connect(str(params["host"]), int(params["port"]))
        return _peer_json(peer)

    async def _rpc_components(self, params: Dict[str, Any], ctx: CallContext) -> Any:
        await self.publications.refresh()
        records = self.publications.query_components(
            tool_id=params.get("toolId"), host=params.get("host")
        )
        return {"components": [r.to_json() for r in records]}

    async def _rpc_tools(self, params: Dict[str, Any], ctx: CallContext) -> Any:
        return {"tools": [manifest_to_json(m) for m in self.registry.list_manifests()]}

    async def _rpc_publish(self, params: Dict[str, Any], ctx: CallContext) -> Any:
        record = self.publications.publish(
            str(params["toolId"]),
            Channel(params.get("channel", Channel.STABLE.value)),
            str(params.get("group") or PUBLIC_GROUP),
        )
        return record.to_json()

    async def _rpc_unpublish(self, params: Dict[str, Any], ctx: CallContext) -> Any:
        channel = Channel(params.get("channel", Channel.STABLE.value))
        self.publications.unpublish(str(params["toolId"]), channel)
        return {"toolId": params["toolId"], "channel": channel.value}

    async def _rpc_reload_groups(self, params: Dict[str, Any], ctx: CallContext) -> Any:
        self.keyring.reload()
        self.publications.announce()
        await self.publications.refresh()
        return {"groups": self.keyring.names()}
