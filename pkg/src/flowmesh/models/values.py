"""Native datatypes flowing along workflow connections."""

import math
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Dict, Tuple

from flowmesh.exceptions import DataValueError

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1
MAX_TEXT_BYTES = 64 * 1024
MAX_FLOAT_LIST = 2**16


class DataType(str, Enum):
    """Type tag of a DataValue."""

    BOOLEAN = "boolean"
    INTEGER = "integer"
    FLOAT = "float"
    TEXT = "text"
    FLOAT_LIST = "float_list"
    FILE = "file"
    DIRECTORY = "directory"

    @property
    def is_blob(self) -> bool:
        return self in (DataType.FILE, DataType.DIRECTORY)


@dataclass(frozen=True)
class FileRef:
    """Content-addressed reference to a file."""

    hash: str
    filename: str
    size: int


@dataclass(frozen=True)
class DirectoryEntry:
    """One file inside a DirectoryRef."""

    path: str
    hash: str
    size: int


def _is_safe_path(path: Any, nested: bool) -> bool:
    """A relative path that stays below the directory it is written into."""
    if not isinstance(path, str) or not path or "\0" in path:
        return False
    parts = path.replace("\\", "/").split("/")
    if not nested and len(parts) > 1:
        return False
    if parts[0] == "" or (len(parts[0]) >= 2 and parts[0][1] == ":"):
        return False
    return all(part not in ("", ".", "..") for part in parts)


def _is_sha256(value: Any) -> bool:
    return (
        isinstance(value, str)
        and len(value) == 64
        and all(c in "0123456789abcdef" for c in value)
    )


@dataclass(frozen=True)
class DataValue:
    """Tagged union over the native datatypes.

    Use the ``boolean``/``integer``/... constructors; ``__post_init__`` enforces
    the per-type constraints so an invalid value can never be constructed.
    """

    type: DataType
    value: Any

    def __post_init__(self) -> None:
        t, v = self.type, self.value
        if t is DataType.BOOLEAN:
            if not isinstance(v, bool):
                raise DataValueError(f"boolean value expected, got {v!r}")
        elif t is DataType.INTEGER:
            if isinstance(v, bool) or not isinstance(v, int):
                raise DataValueError(f"integer value expected, got {v!r}")
            if not INT64_MIN <= v <= INT64_MAX:
                raise DataValueError(f"integer {v} outside signed 64-bit range")
        elif t is DataType.FLOAT:
            if isinstance(v, bool) or not isinstance(v, float):
                raise DataValueError(f"float value expected, got {v!r}")
            if math.isnan(v):
                raise DataValueError("NaN is not a valid float value")
        elif t is DataType.TEXT:
            if not isinstance(v, str):
                raise DataValueError(f"text value expected, got {v!r}")
            if len(v.encode("utf-8")) > MAX_TEXT_BYTES:
                raise DataValueError("text value exceeds 64 KiB")
        elif t is DataType.FLOAT_LIST:
            if not isinstance(v, tuple) or not all(
                isinstance(x, float) for x in v
            ):
                raise DataValueError("float_list must be a tuple of floats")
            if len(v) > MAX_FLOAT_LIST:
                raise DataValueError("float_list longer than 65536 entries")
            if not all(math.isfinite(x) for x in v):
                raise DataValueError("float_list entries must be finite")
        elif t is DataType.FILE:
            if not isinstance(v, FileRef) or not _is_sha256(v.hash):
                raise DataValueError("file value must be a FileRef with sha256 hash")
            if not _is_safe_path(v.filename, nested=False):
                raise DataValueError(f"unsafe file name {v.filename!r}")
            if v.size < 0:
                raise DataValueError("file size must be non-negative")
        elif t is DataType.DIRECTORY:
            if not isinstance(v, tuple) or not all(
                isinstance(e, DirectoryEntry) and _is_sha256(e.hash) for e in v
            ):
                raise DataValueError("directory value must be a tuple of entries")
            for entry in v:
                if not _is_safe_path(entry.path, nested=True):
                    raise DataValueError(f"unsafe directory entry path {entry.path!r}")
        else:  # pragma: no cover
            raise DataValueError(f"unknown datatype {t!r}")

    # --- constructors -----------------------------------------------------

    @classmethod
    def boolean(cls, value: bool) -> "DataValue":
        return cls(DataType.BOOLEAN, value)

    @classmethod
    def integer(cls, value: int) -> "DataValue":
        return cls(DataType.INTEGER, value)

    @classmethod
    def float_(cls, value: float) -> "DataValue":
        return cls(DataType.FLOAT, float(value))

    @classmethod
    def text(cls, value: str) -> "DataValue":
        return cls(DataType.TEXT, value)

    @classmethod
    def float_list(cls, values) -> "DataValue":
        return cls(DataType.FLOAT_LIST, tuple(float(x) for x in values))

    @classmethod
    def file(cls, hash: str, filename: str, size: int) -> "DataValue":
        return cls(DataType.FILE, FileRef(hash, filename, size))

    @classmethod
    def directory(cls, entries) -> "DataValue":
        return cls(
            DataType.DIRECTORY,
            tuple(DirectoryEntry(e.path, e.hash, e.size) for e in entries),
        )

    def blob_hashes(self) -> Tuple[str, ...]:
        """Content hashes this value references."""
        if self.type is DataType.FILE:
            return (self.value.hash,)
        if self.type is DataType.DIRECTORY:
            return tuple(e.hash for e in self.value)
        return ()


def value_to_json(value: DataValue) -> Dict[str, Any]:
    """Encode a DataValue in its wire/journal form."""
    if value.type is DataType.FILE:
        ref = value.value
        return {
            "type": "file",
            "hash": ref.hash,
            "filename": ref.filename,
            "size": ref.size,
        }
    if value.type is DataType.DIRECTORY:
        return {
            "type": "directory",
            "entries": [
                {"path": e.path, "hash": e.hash, "size": e.size} for e in value.value
            ],
        }
    if value.type is DataType.FLOAT_LIST:
        return {"type": "float_list", "value": list(value.value)}
    if value.type is DataType.FLOAT and math.isinf(value.value):
        return {"type": "float", "value": "inf" if value.value > 0 else "-inf"}
    return {"type": value.type.value, "value": value.value}


def value_from_json(data: Any) -> DataValue:
    """Decode the wire/journal form produced by ``value_to_json``."""
    if not isinstance(data, dict) or "type" not in data:
        raise DataValueError(f"typed value object expected, got {data!r}")
    try:
        dtype = DataType(data["type"])
    except ValueError as e:
        raise DataValueError(f"unknown datatype {data['type']!r}") from e
    try:
        if dtype is DataType.FILE:
            return DataValue.file(
                str(data["hash"]), str(data["filename"]), int(data["size"])
            )
        if dtype is DataType.DIRECTORY:
            return DataValue.directory(
                DirectoryEntry(str(e["path"]), str(e["hash"]), int(e["size"]))
                for e in data["entries"]
            )
        raw = data["value"]
    except (KeyError, TypeError) as e:
        raise DataValueError(f"malformed {dtype.value} value: {data!r}") from e
    if dtype is DataType.FLOAT:
        if isinstance(raw, str) and raw in ("inf", "-inf"):
            return DataValue.float_(float(raw))
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise DataValueError(f"float value expected, got {raw!r}")
        return DataValue.float_(raw)
    if dtype is DataType.FLOAT_LIST:
        if not isinstance(raw, list) or any(
            isinstance(x, bool) or not isinstance(x, (int, float)) for x in raw
        ):
            raise DataValueError(f"float_list value expected, got {raw!r}")
        return DataValue.float_list(raw)
    return DataValue(dtype, raw)


def infer_value(raw: Any) -> DataValue:
    """Infer a DataValue from a bare JSON scalar (workflow config shorthand)."""
    if isinstance(raw, dict):
        return value_from_json(raw)
    if isinstance(raw, bool):
        return DataValue.boolean(raw)
    if isinstance(raw, int):
        return DataValue.integer(raw)
    if isinstance(raw, float):
        return DataValue.float_(raw)
    if isinstance(raw, str):
        return DataValue.text(raw)
    if isinstance(raw, list):
        return value_from_json({"type": "float_list", "value": raw})
    raise DataValueError(f"cannot infer a datatype for {raw!r}")


def parse_scalar_text(dtype: DataType, text: str) -> DataValue:
    """Parse element/attribute text into a scalar value of ``dtype``.

    Raises:
        DataValueError: If the text does not denote a value of ``dtype``.
    """
    stripped = text.strip()
    if dtype is DataType.TEXT:
        return DataValue.text(text)
    if dtype is DataType.BOOLEAN:
        lowered = stripped.lower()
        if lowered in ("true", "1"):
            return DataValue.boolean(True)
        if lowered in ("false", "0"):
            return DataValue.boolean(False)
        raise DataValueError(f"not a boolean: {text!r}")
    if dtype is DataType.INTEGER:
        try:
            return DataValue.integer(int(stripped))
        except ValueError as e:
            raise DataValueError(f"not an integer: {text!r}") from e
    if dtype is DataType.FLOAT:
        try:
            return DataValue.float_(float(stripped))
        except ValueError as e:
            raise DataValueError(f"not a float: {text!r}") from e
    if dtype is DataType.FLOAT_LIST:
        parts = stripped.replace(",", " ").split()
        try:
            return DataValue.float_list(float(p) for p in parts)
        except ValueError as e:
            raise DataValueError(f"not a float list: {text!r}") from e
    raise DataValueError(f"{dtype.value} values cannot be parsed from text")


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def format_timestamp(moment: datetime) -> str:
    """ISO-8601 UTC with microseconds and a trailing Z."""
    return moment.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_timestamp(text: str) -> datetime:
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%S.%fZ").replace(
        tzinfo=timezone.utc
    )
