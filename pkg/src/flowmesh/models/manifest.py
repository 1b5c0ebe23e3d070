"""Declarative wrapper describing how to run an external tool."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import FrozenSet, Optional, Tuple

from flowmesh.models.workflow import Channel, PortSpec

DEFAULT_TIMEOUT_SECONDS = 3600


@dataclass(frozen=True)
class ToolManifest:
    tool_id: str
    display_name: str
    channel: Channel
    ports: Tuple[PortSpec, ...]
    command: Tuple[str, ...]
    pre_script: Optional[str] = None
    post_script: Optional[str] = None
    timeout_seconds: int = DEFAULT_TIMEOUT_SECONDS
    expected_exit_codes: FrozenSet[int] = frozenset({0})
    # Directory the manifest was loaded from; ``${tool_dir}`` expands to it.
    bundle_dir: Optional[Path] = field(default=None, compare=False)

    @property
    def inputs(self) -> Tuple[PortSpec, ...]:
        return tuple(p for p in self.ports if p.is_input)

    @property
    def outputs(self) -> Tuple[PortSpec, ...]:
        return tuple(p for p in self.ports if not p.is_input)

    @property
    def key(self) -> Tuple[str, Channel]:
        return (self.tool_id, self.channel)
