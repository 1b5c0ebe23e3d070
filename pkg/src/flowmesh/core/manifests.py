"""Tool manifests: loading, validation and the per-profile tool registry."""

import json
import os
import re
import secrets
import shutil
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Set, Tuple

from flowmesh.exceptions import (
    ChannelNotFound,
    InvalidPlaceholder,
    ManifestSchemaError,
    ManifestSyntaxError,
    ToolNotFound,
)
from flowmesh.logging_config import get_logger
from flowmesh.models.manifest import DEFAULT_TIMEOUT_SECONDS, ToolManifest
from flowmesh.models.workflow import Channel, port_to_json, ports_from_json

logger = get_logger(__name__)

MANIFEST_FILENAME = "manifest.json"
TOOL_ID_RE = re.compile(r"^[a-z0-9_-]+$")
PLACEHOLDER_RE = re.compile(r"\$\{([^}]*)\}")
FIXED_PLACEHOLDERS = ("run_dir", "tool_dir", "interpreter")


def check_placeholders(command: Iterable[str], input_names: Iterable[str]) -> None:
    """Reject placeholders that are unknown or name undeclared input ports.

    Raises:
        InvalidPlaceholder: On the first offending placeholder.
    """
    inputs = set(input_names)
    for index, arg in enumerate(command):
        for name in PLACEHOLDER_RE.findall(arg):
            if name in FIXED_PLACEHOLDERS:
                continue
            if name.startswith("input:") and name[len("input:") :] in inputs:
                continue
            raise InvalidPlaceholder(
                f"command[{index}] references ${{{name}}}, "
                f"which is not a declared input port",
                {"path": f"command[{index}]", "placeholder": name},
            )


def _script_text(
    raw: Any, path: str, bundle_dir: Optional[Path]
) -> Optional[str]:
    if raw is None:
        return None
    if isinstance(raw, str):
        return raw
    if isinstance(raw, dict) and isinstance(raw.get("file"), str):
        if bundle_dir is None:
            raise ManifestSchemaError("script file needs a bundle directory", path)
        script_path = bundle_dir / raw["file"]
        try:
            return script_path.read_text(encoding="utf-8")
        except OSError as e:
            raise ManifestSchemaError(f"cannot read {script_path}: {e}", path) from e
    raise ManifestSchemaError("script must be text or {\"file\": name}", path)


def load_manifest(
    text: str,
    bundle_dir: Optional[Path] = None,
    channel: Optional[Channel] = None,
) -> ToolManifest:
    """Parse and validate a manifest document.

    Args:
        text: UTF-8 JSON manifest.
        bundle_dir: Directory holding the manifest and its helper files.
        channel: Overrides the channel named in the document (the registry
            uses the channel directory a manifest is installed in).

    Raises:
        ManifestSyntaxError: The document is not JSON.
        ManifestSchemaError: A field is missing or invalid.
        InvalidPlaceholder: The command references an undeclared port.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestSyntaxError(
            f"line {e.lineno} column {e.colno}: {e.msg}",
            {"line": e.lineno, "offset": e.colno},
        ) from e
    if not isinstance(data, dict):
        raise ManifestSchemaError("manifest must be a JSON object")

    tool_id = data.get("toolId")
    if not isinstance(tool_id, str) or not TOOL_ID_RE.match(tool_id):
        raise ManifestSchemaError(
            f"toolId must match [a-z0-9_-]+, got {tool_id!r}", "toolId"
        )
    display_name = data.get("displayName", tool_id)
    if not isinstance(display_name, str):
        raise ManifestSchemaError("displayName must be text", "displayName")

    if channel is None:
        try:
            channel = Channel(data.get("channel", Channel.STABLE.value))
        except ValueError:
            raise ManifestSchemaError(
                "channel must be stable or development", "channel"
            ) from None

    ports = ports_from_json(data.get("ports", []), "ports", ManifestSchemaError)

    command = data.get("command")
    if (
        not isinstance(command, list)
        or not command
        or not all(isinstance(a, str) for a in command)
    ):
        raise ManifestSchemaError(
            "command must be a non-empty list of strings", "command"
        )
    check_placeholders(command, (p.name for p in ports if p.is_input))

    timeout = data.get("timeoutSeconds", DEFAULT_TIMEOUT_SECONDS)
    if isinstance(timeout, bool) or not isinstance(timeout, int) or timeout <= 0:
        raise ManifestSchemaError(
            "timeoutSeconds must be a positive integer", "timeoutSeconds"
        )
    codes = data.get("expectedExitCodes", [0])
    if not isinstance(codes, list) or not all(
        isinstance(c, int) and not isinstance(c, bool) for c in codes
    ):
        raise ManifestSchemaError(
            "expectedExitCodes must be a list of integers", "expectedExitCodes"
        )

    return ToolManifest(
        tool_id=tool_id,
        display_name=display_name,
        channel=channel,
        ports=ports,
        command=tuple(command),
        pre_script=_script_text(data.get("preScript"), "preScript", bundle_dir),
        post_script=_script_text(data.get("postScript"), "postScript", bundle_dir),
        timeout_seconds=timeout,
        expected_exit_codes=frozenset(codes or [0]),
        bundle_dir=bundle_dir,
    )


def manifest_to_json(manifest: ToolManifest) -> Dict[str, Any]:
    body: Dict[str, Any] = {
        "toolId": manifest.tool_id,
        "displayName": manifest.display_name,
        "channel": manifest.channel.value,
        "ports": [port_to_json(p) for p in manifest.ports],
        "command": list(manifest.command),
        "timeoutSeconds": manifest.timeout_seconds,
        "expectedExitCodes": sorted(manifest.expected_exit_codes),
    }
    if manifest.pre_script is not None:
        body["preScript"] = manifest.pre_script
    if manifest.post_script is not None:
        body["postScript"] = manifest.post_script
    return body


def resolve_version(
    tool_id: str,
    requested: Channel,
    installed: Set[Tuple[str, Channel]],
) -> Tuple[str, Channel]:
    """Pick the installed (toolId, channel) pair for a request.

    Raises:
        ToolNotFound: No channel of ``tool_id`` is installed.
        ChannelNotFound: The tool exists but not in ``requested``.
    """
    if (tool_id, requested) in installed:
        return (tool_id, requested)
    if any(t == tool_id for t, _ in installed):
        raise ChannelNotFound(
            f"tool {tool_id!r} has no {requested.value} channel installed",
            {"toolId": tool_id, "channel": requested.value},
        )
    raise ToolNotFound(f"tool {tool_id!r} is not installed", {"toolId": tool_id})


class ToolRegistry:
    """Installed tools under ``<profile>/tools/<toolId>/<channel>/``.

    Manifests are re-read from disk on every lookup so that a newly deployed
    version is picked up by the next firing without restarting anything.
    """

    def __init__(self, tools_dir: Path):
        self.tools_dir = Path(tools_dir)

    def bundle_dir(self, tool_id: str, channel: Channel) -> Path:
        return self.tools_dir / tool_id / channel.value

    def installed(self) -> Set[Tuple[str, Channel]]:
        found: Set[Tuple[str, Channel]] = set()
        if not self.tools_dir.is_dir():
            return found
        for tool_dir in self.tools_dir.iterdir():
            for channel in Channel:
                if (tool_dir / channel.value / MANIFEST_FILENAME).is_file():
                    found.add((tool_dir.name, channel))
        return found

    def resolve(self, tool_id: str, channel: Channel) -> ToolManifest:
        resolve_version(tool_id, channel, self.installed())
        bundle = self.bundle_dir(tool_id, channel)
        text = (bundle / MANIFEST_FILENAME).read_text(encoding="utf-8")
        return load_manifest(text, bundle_dir=bundle, channel=channel)

    def list_manifests(self) -> List[ToolManifest]:
        manifests = []
        for tool_id, channel in sorted(self.installed()):
            try:
                manifests.append(self.resolve(tool_id, channel))
            except Exception as e:
                logger.warning(
                    "Skipping broken manifest %s/%s: %s", tool_id, channel.value, e
                )
        return manifests

    def install(
        self, source: Path, channel: Optional[Channel] = None
    ) -> ToolManifest:
        """Install the directory holding ``source`` as a tool bundle.

        The manifest is validated first; the new bundle replaces any previous
        content of the same (toolId, channel) in one rename.
        """
        source = Path(source)
        if source.is_dir():
            source = source / MANIFEST_FILENAME
        manifest = load_manifest(
            source.read_text(encoding="utf-8"),
            bundle_dir=source.parent,
            channel=channel,
        )
        target = self.bundle_dir(manifest.tool_id, manifest.channel)
        target.parent.mkdir(parents=True, exist_ok=True)
        staging = target.parent / f".{manifest.channel.value}-{secrets.token_hex(4)}"
        shutil.copytree(source.parent, staging)
        if source.name != MANIFEST_FILENAME:
            (staging / source.name).unlink()
        data = json.loads(source.read_text(encoding="utf-8"))
        data["channel"] = manifest.channel.value
        (staging / MANIFEST_FILENAME).write_text(
            json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        if target.exists():
            retired = target.parent / f".retired-{secrets.token_hex(4)}"
            os.replace(target, retired)
            os.replace(staging, target)
            shutil.rmtree(retired, ignore_errors=True)
        else:
            os.replace(staging, target)
        logger.info(
            "Installed tool %s (%s) into %s",
            manifest.tool_id,
            manifest.channel.value,
            target,
        )
        return self.resolve(manifest.tool_id, manifest.channel)

    def write_manifest(self, data: Dict[str, Any], channel: Channel) -> ToolManifest:
        """Install a manifest document without a bundle (wizard output)."""
        text = json.dumps(
            dict(data, channel=channel.value), indent=2, sort_keys=True
        )
        manifest = load_manifest(text, channel=channel)
        target = self.bundle_dir(manifest.tool_id, channel)
        target.mkdir(parents=True, exist_ok=True)
        temp = target / f".{MANIFEST_FILENAME}.{secrets.token_hex(4)}"
        temp.write_text(text + "\n", encoding="utf-8")
        os.replace(temp, target / MANIFEST_FILENAME)
        return self.resolve(manifest.tool_id, channel)
