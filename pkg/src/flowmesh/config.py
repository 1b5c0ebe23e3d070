"""Profile and configuration management for flowmesh."""

import os
import secrets
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

# Import tomli for Python < 3.11, otherwise use stdlib tomllib
if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from flowmesh.logging_config import get_logger

logger = get_logger(__name__)

APP_NAME = "flowmesh"
CONFIG_FILENAME = "config.toml"
NODE_ID_FILENAME = "node_id"
DEFAULT_PROFILE = "default"
HOME_ENV = "FLOWMESH_HOME"
PROFILE_ENV = "FLOWMESH_PROFILE"


def get_home_dir(override: Optional[Path] = None) -> Path:
    """Get the directory holding all profiles.

    Resolution order: explicit override, ``$FLOWMESH_HOME``, ``~/.flowmesh``.
    """
    if override is not None:
        return Path(override).expanduser()
    env = os.environ.get(HOME_ENV)
    if env:
        return Path(env).expanduser()
    return Path.home() / f".{APP_NAME}"


def get_profile_name(override: Optional[str] = None) -> str:
    """Get the active profile name (override, ``$FLOWMESH_PROFILE``, "default")."""
    return override or os.environ.get(PROFILE_ENV) or DEFAULT_PROFILE


@dataclass
class NodeSection:
    """Identity and role of the node."""

    display_name: str = ""
    relay: bool = False


@dataclass
class NetworkSection:
    """Listen address and link liveness settings."""

    listen_host: str = "127.0.0.1"
    listen_port: int = 21000
    ping_interval: float = 5.0
    ping_misses: int = 3
    ttl: int = 16
    call_timeout: float = 7200.0


@dataclass
class ExecutionSection:
    """Tool and script execution settings."""

    interpreter: List[str] = field(default_factory=lambda: [sys.executable])
    max_parallel_firings: int = field(default_factory=lambda: os.cpu_count() or 1)
    cancel_grace: float = 10.0
    default_timeout: int = 3600


@dataclass
class LoggingConfig:
    """Logging configuration."""

    level: str = "INFO"
    file: Optional[str] = None


@dataclass
class Config:
    """Node configuration stored as ``config.toml`` in the profile."""

    node: NodeSection = field(default_factory=NodeSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    execution: ExecutionSection = field(default_factory=ExecutionSection)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    def to_dict(self) -> dict:
        """Convert config to dictionary for TOML serialization."""
        result = {
            "node": {
                "display_name": self.node.display_name,
                "relay": self.node.relay,
            },
            "network": {
                "listen_host": self.network.listen_host,
                "listen_port": self.network.listen_port,
                "ping_interval": self.network.ping_interval,
                "ping_misses": self.network.ping_misses,
                "ttl": self.network.ttl,
                "call_timeout": self.network.call_timeout,
            },
            "execution": {
                "interpreter": list(self.execution.interpreter),
                "max_parallel_firings": self.execution.max_parallel_firings,
                "cancel_grace": self.execution.cancel_grace,
                "default_timeout": self.execution.default_timeout,
            },
            "logging": {
                "level": self.logging.level,
            },
        }
        # TOML has no null
        if self.logging.file is not None:
            result["logging"]["file"] = self.logging.file
        return result

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        """Create Config from dictionary."""
        node_data = data.get("node", {})
        network_data = data.get("network", {})
        execution_data = data.get("execution", {})
        logging_data = data.get("logging", {})
        defaults = ExecutionSection()

        interpreter = execution_data.get("interpreter", defaults.interpreter)
        if isinstance(interpreter, str):
            interpreter = interpreter.split()

        return cls(
            node=NodeSection(
                display_name=node_data.get("display_name", ""),
                relay=bool(node_data.get("relay", False)),
            ),
            network=NetworkSection(
                listen_host=network_data.get("listen_host", "127.0.0.1"),
                listen_port=int(network_data.get("listen_port", 21000)),
                ping_interval=float(network_data.get("ping_interval", 5.0)),
                ping_misses=int(network_data.get("ping_misses", 3)),
                ttl=int(network_data.get("ttl", 16)),
                call_timeout=float(network_data.get("call_timeout", 7200.0)),
            ),
            execution=ExecutionSection(
                interpreter=list(interpreter),
                max_parallel_firings=int(
                    execution_data.get(
                        "max_parallel_firings", defaults.max_parallel_firings
                    )
                ),
                cancel_grace=float(execution_data.get("cancel_grace", 10.0)),
                default_timeout=int(execution_data.get("default_timeout", 3600)),
            ),
            logging=LoggingConfig(
                level=logging_data.get("level", "INFO"),
                file=logging_data.get("file"),
            ),
        )


@dataclass
class Profile:
    """On-disk profile: node identity, configuration, tools, groups and store."""

    root: Path
    name: str = DEFAULT_PROFILE

    @classmethod
    def resolve(
        cls, home: Optional[Path] = None, name: Optional[str] = None
    ) -> "Profile":
        profile_name = get_profile_name(name)
        return cls(root=get_home_dir(home) / profile_name, name=profile_name)

    @property
    def config_path(self) -> Path:
        return self.root / CONFIG_FILENAME

    @property
    def tools_dir(self) -> Path:
        return self.root / "tools"

    @property
    def groups_dir(self) -> Path:
        return self.root / "groups"

    @property
    def store_dir(self) -> Path:
        return self.root / "store"

    @property
    def work_dir(self) -> Path:
        return self.root / "work"

    @property
    def publications_path(self) -> Path:
        return self.root / "publications.json"

    def ensure(self) -> "Profile":
        """Create the profile directories and node id if missing."""
        for directory in (
            self.root,
            self.tools_dir,
            self.groups_dir,
            self.store_dir,
            self.work_dir,
        ):
            directory.mkdir(parents=True, exist_ok=True)
        self.node_id()
        return self

    def node_id(self) -> str:
        """Return the persisted NodeId, generating it on first use."""
        path = self.root / NODE_ID_FILENAME
        if path.exists():
            return path.read_text(encoding="utf-8").strip()
        self.root.mkdir(parents=True, exist_ok=True)
        node_id = secrets.token_hex(16)
        path.write_text(node_id + "\n", encoding="utf-8")
        logger.info("Created node id %s for profile %s", node_id, self.name)
        return node_id

    def load_config(self) -> Config:
        """Load configuration from file.

        Returns:
            Config object with values from file, or defaults if file doesn't exist.
        """
        if not self.config_path.exists():
            return Config(node=NodeSection(display_name=self.name))

        try:
            with open(self.config_path, "rb") as f:
                data = tomllib.load(f)
            config = Config.from_dict(data)
            if not config.node.display_name:
                config.node.display_name = self.name
            return config
        except Exception as e:
            logger.warning("Failed to load config: %s, using defaults", e)
            return Config(node=NodeSection(display_name=self.name))

    def save_config(self, config: Config) -> None:
        """Save configuration to file."""
        self.config_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.config_path, "wb") as f:
            tomli_w.dump(config.to_dict(), f)

    def init_config(self) -> Path:
        """Initialize configuration file with defaults.

        Returns:
            Path to the created config file.
        """
        self.save_config(Config(node=NodeSection(display_name=self.name)))
        return self.config_path
