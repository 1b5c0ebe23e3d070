"""Content-addressed blob store.

Blobs live under ``<root>/<first two hex chars>/<sha256>``. Every write goes
to a temporary file first and is renamed into place once its hash has been
verified, so a blob path either holds the full content or does not exist.
"""

import errno
import hashlib
import os
import secrets
import shutil
from pathlib import Path
from typing import BinaryIO, Iterator, List, Optional, Union

from flowmesh.exceptions import (
    ChecksumMismatch,
    DataValueError,
    StorageFull,
    UnknownBlob,
)
from flowmesh.logging_config import get_logger
from flowmesh.models.values import DataType, DataValue, DirectoryEntry

logger = get_logger(__name__)

READ_CHUNK = 1024 * 1024
EMPTY_HASH = hashlib.sha256(b"").hexdigest()


def ensure_inside(target: Path, root: Path) -> None:
    """Raise DataValueError unless ``target`` resolves below ``root``."""
    if not target.resolve().is_relative_to(root.resolve()):
        raise DataValueError(f"{target} escapes {root}")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(READ_CHUNK), b""):
            digest.update(chunk)
    return digest.hexdigest()


class BlobStore:
    """Append-only store of immutable blobs keyed by SHA-256."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._tmp = self.root / "tmp"
        self._tmp.mkdir(exist_ok=True)

    def path_for(self, digest: str) -> Path:
        return self.root / digest[:2] / digest

    def has(self, digest: str) -> bool:
        return self.path_for(digest).is_file()

    def size(self, digest: str) -> int:
        try:
            return self.path_for(digest).stat().st_size
        except FileNotFoundError:
            raise UnknownBlob(f"unknown blob {digest}", {"hash": digest}) from None

    def open(self, digest: str) -> BinaryIO:
        try:
            return open(self.path_for(digest), "rb")
        except FileNotFoundError:
            raise UnknownBlob(f"unknown blob {digest}", {"hash": digest}) from None

    def get_bytes(self, digest: str) -> bytes:
        with self.open(digest) as f:
            return f.read()

    def iter_chunks(self, digest: str, chunk_size: int) -> Iterator[bytes]:
        with self.open(digest) as f:
            for chunk in iter(lambda: f.read(chunk_size), b""):
                yield chunk

    def _temp_path(self) -> Path:
        return self._tmp / f"{secrets.token_hex(8)}.part"

    def _admit(self, temp: Path, digest: str) -> str:
        """Move a verified temp file into place (no-op when already stored)."""
        target = self.path_for(digest)
        if target.exists():
            temp.unlink(missing_ok=True)
            return digest
        target.parent.mkdir(parents=True, exist_ok=True)
        os.replace(temp, target)
        logger.debug("Stored blob %s", digest)
        return digest

    def put_bytes(self, data: bytes) -> str:
        digest = sha256_bytes(data)
        if self.has(digest):
            return digest
        temp = self._temp_path()
        try:
            temp.write_bytes(data)
        except OSError as e:
            temp.unlink(missing_ok=True)
            _raise_storage(e)
        return self._admit(temp, digest)

    def put_file(self, path: Union[str, Path]) -> str:
        """Copy a file into the store and return its hash."""
        temp = self._temp_path()
        digest = hashlib.sha256()
        try:
            with open(path, "rb") as src, open(temp, "wb") as dst:
                for chunk in iter(lambda: src.read(READ_CHUNK), b""):
                    digest.update(chunk)
                    dst.write(chunk)
        except OSError as e:
            temp.unlink(missing_ok=True)
            _raise_storage(e)
        return self._admit(temp, digest.hexdigest())

    def put_text(self, text: str) -> str:
        return self.put_bytes(text.encode("utf-8"))

    # --- DataValue helpers --------------------------------------------------

    def ingest_file(
        self, path: Union[str, Path], filename: Optional[str] = None
    ) -> DataValue:
        path = Path(path)
        digest = self.put_file(path)
        return DataValue.file(digest, filename or path.name, self.size(digest))

    def ingest_directory(self, path: Union[str, Path]) -> DataValue:
        """Store every file below ``path``; entries are sorted by relative path."""
        root = Path(path)
        entries = []
        for file in sorted(p for p in root.rglob("*") if p.is_file()):
            digest = self.put_file(file)
            rel = file.relative_to(root).as_posix()
            entries.append(DirectoryEntry(rel, digest, self.size(digest)))
        return DataValue.directory(entries)

    def materialize(self, value: DataValue, dest: Path) -> Path:
        """Write a file or directory value to ``dest`` as independent copies."""
        if value.type is DataType.FILE:
            dest.parent.mkdir(parents=True, exist_ok=True)
            with self.open(value.value.hash) as src, open(dest, "wb") as dst:
                shutil.copyfileobj(src, dst)
            return dest
        if value.type is DataType.DIRECTORY:
            dest.mkdir(parents=True, exist_ok=True)
            for entry in value.value:
                target = dest / Path(entry.path.replace("\\", "/"))
                ensure_inside(target, dest)
                target.parent.mkdir(parents=True, exist_ok=True)
                with self.open(entry.hash) as src, open(target, "wb") as dst:
                    shutil.copyfileobj(src, dst)
            return dest
        raise ValueError(f"{value.type.value} values have no on-disk form")

    def missing(self, value: DataValue) -> List[str]:
        """Hashes referenced by ``value`` that are not stored here."""
        return [h for h in dict.fromkeys(value.blob_hashes()) if not self.has(h)]

    # --- chunked receive ----------------------------------------------------

    def incoming(self, digest: str, size: int) -> "IncomingBlob":
        return IncomingBlob(self, digest, size)


class IncomingBlob:
    """A blob being assembled from chunks; admitted only if its hash matches."""

    def __init__(self, store: BlobStore, digest: str, size: int):
        self.store = store
        self.digest = digest
        self.size = size
        self.received = 0
        self._path = store._temp_path()
        self._file = open(self._path, "wb")

    def write(self, offset: int, data: bytes) -> None:
        self._file.seek(offset)
        self._file.write(data)
        self.received += len(data)

    def commit(self) -> str:
        self._file.close()
        actual = sha256_file(self._path)
        if actual != self.digest:
            self._path.unlink(missing_ok=True)
            raise ChecksumMismatch(
                f"blob {self.digest} arrived with hash {actual}",
                {"hash": self.digest, "actual": actual},
            )
        return self.store._admit(self._path, self.digest)

    def abort(self) -> None:
        if not self._file.closed:
            self._file.close()
        self._path.unlink(missing_ok=True)


def _raise_storage(error: OSError) -> None:
    if error.errno in (errno.ENOSPC, errno.EDQUOT):
        raise StorageFull(str(error)) from error
    raise error
