"""Access groups and the challenge/response proving group membership.

A group is a name plus a 32-byte pre-shared key. Keys are stored as
``groups/<name>.key`` in the profile (hex text, one line). Peers refer to a
group by its key id, so group names never travel over the wire.
"""

import hashlib
import hmac
import json
import re
import secrets
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

from flowmesh.exceptions import UnknownGroup
from flowmesh.logging_config import get_logger
from flowmesh.models.records import PublicationRecord

logger = get_logger(__name__)

KEY_BYTES = 32
NONCE_BYTES = 16
KEY_SUFFIX = ".key"
PUBLIC_GROUP = "public"
GROUP_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


def key_id(key: bytes) -> str:
    """First 8 bytes of SHA-256 over the key, as hex."""
    return hashlib.sha256(key).digest()[:8].hex()


def generate_key() -> bytes:
    return secrets.token_bytes(KEY_BYTES)


def new_nonce() -> bytes:
    return secrets.token_bytes(NONCE_BYTES)


def make_proof(key: bytes, nonce: bytes, verifier_node: str) -> str:
    """HMAC-SHA-256 over ``nonce || verifierNodeId`` (the id as raw bytes)."""
    message = nonce + bytes.fromhex(verifier_node)
    return hmac.new(key, message, hashlib.sha256).hexdigest()


def verify_proof(key: bytes, nonce: bytes, verifier_node: str, proof: str) -> bool:
    return hmac.compare_digest(make_proof(key, nonce, verifier_node), proof)


def publications_digest(records: Iterable[PublicationRecord]) -> str:
    """SHA-256 over the canonical JSON list of publications."""
    body = sorted(
        (r.to_json() for r in records),
        key=lambda d: (d["hostNode"], d["toolId"], d["channel"]),
    )
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def parse_key(data: bytes) -> bytes:
    """Accept a key file as hex text or as raw bytes."""
    text = data.strip()
    try:
        key = bytes.fromhex(text.decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        key = data
    if len(key) != KEY_BYTES:
        raise ValueError(f"group key must be {KEY_BYTES} bytes, got {len(key)}")
    return key


@dataclass(frozen=True)
class AccessGroup:
    name: str
    key: bytes

    @property
    def key_id(self) -> str:
        return key_id(self.key)


class KeyRing:
    """The access groups whose keys this node holds."""

    def __init__(self, groups_dir: Optional[Union[str, Path]] = None):
        self.groups_dir = Path(groups_dir) if groups_dir is not None else None
        self._groups: Dict[str, AccessGroup] = {}
        self.reload()

    def reload(self) -> None:
        """Re-read the key files, picking up groups added by other processes."""
        if self.groups_dir is None or not self.groups_dir.is_dir():
            return
        for path in sorted(self.groups_dir.glob(f"*{KEY_SUFFIX}")):
            try:
                self._add(AccessGroup(path.stem, parse_key(path.read_bytes())))
            except ValueError as e:
                logger.warning("Ignoring group key %s: %s", path, e)

    def _add(self, group: AccessGroup) -> AccessGroup:
        self._groups[group.name] = group
        return group

    def add(self, name: str, key: bytes) -> AccessGroup:
        """Store a group key, persisting it when the ring has a directory."""
        if not GROUP_NAME_RE.match(name) or name == PUBLIC_GROUP:
            raise ValueError(f"invalid group name {name!r}")
        group = AccessGroup(name, parse_key(key))
        if self.groups_dir is not None:
            self.groups_dir.mkdir(parents=True, exist_ok=True)
            path = self.groups_dir / f"{name}{KEY_SUFFIX}"
            path.write_text(group.key.hex() + "\n", encoding="ascii")
            path.chmod(0o600)
        logger.info("Added access group %s (key id %s)", name, group.key_id)
        return self._add(group)

    def get(self, name: str) -> AccessGroup:
        try:
            return self._groups[name]
        except KeyError:
            raise UnknownGroup(
                f"no key for access group {name!r}", {"group": name}
            ) from None

    def by_key_id(self, wanted: str) -> Optional[AccessGroup]:
        for group in self._groups.values():
            if group.key_id == wanted:
                return group
        return None

    def key_ids(self) -> List[str]:
        return sorted(g.key_id for g in self._groups.values())

    def names(self) -> List[str]:
        return sorted(self._groups)

    def __contains__(self, name: object) -> bool:
        return name in self._groups
