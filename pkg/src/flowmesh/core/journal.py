"""Append-only run journals and provenance export.

Each run owns ``<store>/runs/<runId>/journal.jsonl``. Lines are one of::

    {"kind": "run", "record": {...WorkflowRunRecord...}}
    {"kind": "firing", "record": {...ComponentRunRecord...}}
    {"kind": "status", "status": "Finished", "endedAt": "...", "cause": null}

Every append is flushed and fsynced before it returns, so a record that was
reported committed survives a crash. Token values whose JSON form exceeds
``INLINE_LIMIT`` bytes are kept in the blob store and referenced by hash.
"""

import errno
import json
import os
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from flowmesh.core.blobs import BlobStore, ensure_inside
from flowmesh.exceptions import (
    ExportError,
    RunClosed,
    StorageError,
    StorageFull,
    UnknownRun,
)
from flowmesh.logging_config import get_logger
from flowmesh.models.records import (
    ComponentRunRecord,
    RunQuery,
    RunStatus,
    WorkflowRunRecord,
)
from flowmesh.models.values import (
    DataType,
    DataValue,
    format_timestamp,
    parse_timestamp,
    utc_now,
    value_to_json,
)

logger = get_logger(__name__)

JOURNAL_FILENAME = "journal.jsonl"
INLINE_LIMIT = 4 * 1024


@dataclass
class _RunEntry:
    record: WorkflowRunRecord
    firings: List[ComponentRunRecord] = field(default_factory=list)


class RunStore:
    """Journals of all runs a node controlled, replayed into memory on open."""

    def __init__(self, store_dir: Union[str, Path], blobs: BlobStore):
        self.runs_dir = Path(store_dir) / "runs"
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self.blobs = blobs
        self._runs: Dict[str, _RunEntry] = {}
        self._replay()

    # --- writing ------------------------------------------------------------

    def open_run(self, record: WorkflowRunRecord) -> WorkflowRunRecord:
        if record.run_id in self._runs:
            raise StorageError(f"run {record.run_id} already exists")
        (self.runs_dir / record.run_id).mkdir(parents=True, exist_ok=True)
        self._append(record.run_id, {"kind": "run", "record": record.to_json()})
        self._runs[record.run_id] = _RunEntry(record)
        logger.debug("Opened journal for run %s", record.run_id)
        return record

    def set_status(
        self,
        run_id: str,
        status: RunStatus,
        cause: Optional[Dict[str, Any]] = None,
    ) -> WorkflowRunRecord:
        entry = self._entry(run_id)
        if entry.record.status.is_terminal:
            raise RunClosed(
                f"run {run_id} already ended as {entry.record.status.value}"
            )
        ended_at = utc_now() if status.is_terminal else None
        self._append(
            run_id,
            {
                "kind": "status",
                "status": status.value,
                "endedAt": format_timestamp(ended_at) if ended_at else None,
                "cause": cause,
            },
        )
        entry.record = replace(
            entry.record, status=status, ended_at=ended_at, cause=cause
        )
        return entry.record

    def record_component_run(self, record: ComponentRunRecord) -> None:
        """Durably append one firing record.

        Raises:
            UnknownRun: No such run.
            RunClosed: The run already ended.
            StorageFull: The disk is full.
        """
        entry = self._entry(record.run_id)
        if entry.record.status.is_terminal:
            raise RunClosed(
                f"run {record.run_id} already ended as {entry.record.status.value}"
            )
        body = record.to_json()
        for tokens in [body["inputs"].values(), *body["outputs"].values()]:
            for token in tokens:
                token["value"] = self._externalize(token["value"])
        self._append(record.run_id, {"kind": "firing", "record": body})
        entry.firings.append(record)

    def _externalize(self, value: Dict[str, Any]) -> Dict[str, Any]:
        text = json.dumps(value, sort_keys=True, separators=(",", ":"))
        if len(text.encode("utf-8")) <= INLINE_LIMIT:
            return value
        return {"type": value["type"], "ref": self.blobs.put_text(text)}

    def _internalize(self, value: Dict[str, Any]) -> Dict[str, Any]:
        if "ref" not in value:
            return value
        return json.loads(self.blobs.get_bytes(value["ref"]).decode("utf-8"))

    def _append(self, run_id: str, line: Dict[str, Any]) -> None:
        path = self.runs_dir / run_id / JOURNAL_FILENAME
        text = json.dumps(line, sort_keys=True, separators=(",", ":")) + "\n"
        try:
            with open(path, "a", encoding="utf-8") as f:
                f.write(text)
                f.flush()
                os.fsync(f.fileno())
        except OSError as e:
            if e.errno in (errno.ENOSPC, errno.EDQUOT):
                raise StorageFull(str(e)) from e
            raise StorageError(f"cannot append to {path}: {e}") from e

    def replace_run(
        self, record: WorkflowRunRecord, firings: List[ComponentRunRecord]
    ) -> None:
        """Install a copy of a run controlled by another node.

        The copy's journal is rewritten in one rename; it is read-only here.
        """
        run_dir = self.runs_dir / record.run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        lines = [{"kind": "run", "record": record.to_json()}]
        for firing in firings:
            body = firing.to_json()
            for tokens in [body["inputs"].values(), *body["outputs"].values()]:
                for token in tokens:
                    token["value"] = self._externalize(token["value"])
            lines.append({"kind": "firing", "record": body})
        temp = run_dir / f".{JOURNAL_FILENAME}.tmp"
        try:
            with open(temp, "w", encoding="utf-8") as f:
                for line in lines:
                    f.write(json.dumps(line, sort_keys=True, separators=(",", ":")))
                    f.write("\n")
                f.flush()
                os.fsync(f.fileno())
            os.replace(temp, run_dir / JOURNAL_FILENAME)
        except OSError as e:
            raise StorageError(f"cannot store copy of run {record.run_id}: {e}") from e
        self._runs[record.run_id] = _RunEntry(record, list(firings))

    # --- reading ------------------------------------------------------------

    def _replay(self) -> None:
        for run_dir in sorted(self.runs_dir.iterdir()):
            path = run_dir / JOURNAL_FILENAME
            if not path.is_file():
                continue
            try:
                self._replay_journal(run_dir.name, path)
            except (KeyError, ValueError) as e:
                logger.warning("Skipping unreadable journal %s: %s", path, e)

    def _replay_journal(self, run_id: str, path: Path) -> None:
        lines = path.read_text(encoding="utf-8").splitlines()
        entry: Optional[_RunEntry] = None
        for number, line in enumerate(lines, start=1):
            try:
                data = json.loads(line)
            except json.JSONDecodeError:
                # A torn final line means the process died mid-append.
                if number == len(lines):
                    logger.warning("Ignoring torn last line of %s", path)
                    break
                raise
            kind = data["kind"]
            if kind == "run":
                entry = _RunEntry(WorkflowRunRecord.from_json(data["record"]))
            elif entry is None:
                raise ValueError("journal does not start with a run line")
            elif kind == "firing":
                body = data["record"]
                for tokens in [body["inputs"].values(), *body["outputs"].values()]:
                    for token in tokens:
                        token["value"] = self._internalize(token["value"])
                entry.firings.append(ComponentRunRecord.from_json(body))
            elif kind == "status":
                ended = data.get("endedAt")
                entry.record = replace(
                    entry.record,
                    status=RunStatus(data["status"]),
                    ended_at=parse_timestamp(ended) if ended else None,
                    cause=data.get("cause"),
                )
        if entry is not None:
            self._runs[run_id] = entry

    def _entry(self, run_id: str) -> _RunEntry:
        try:
            return self._runs[run_id]
        except KeyError:
            raise UnknownRun(f"unknown run {run_id}", {"runId": run_id}) from None

    def has_run(self, run_id: str) -> bool:
        return run_id in self._runs

    def get_run(self, run_id: str) -> WorkflowRunRecord:
        return self._entry(run_id).record

    def query_runs(self, query: Optional[RunQuery] = None) -> List[WorkflowRunRecord]:
        """Run records matching ``query``, oldest first."""
        query = query or RunQuery()
        found = []
        for entry in self._runs.values():
            record = entry.record
            if query.status is not None and record.status is not query.status:
                continue
            if query.submitter_node and record.submitter_node != query.submitter_node:
                continue
            if query.run_ids and record.run_id not in query.run_ids:
                continue
            found.append(record)
        return sorted(found, key=lambda r: (r.started_at, r.run_id))

    def get_component_runs(
        self, run_id: str, component_id: Optional[str] = None
    ) -> List[ComponentRunRecord]:
        """Committed firing records in commit order."""
        firings = self._entry(run_id).firings
        if component_id is None:
            return list(firings)
        return [r for r in firings if r.component_id == component_id]

    def fetch_record(
        self, run_id: str, component_id: str, firing_index: int
    ) -> ComponentRunRecord:
        for record in self.get_component_runs(run_id, component_id):
            if record.firing_index == firing_index:
                return record
        raise UnknownRun(
            f"run {run_id} has no firing {component_id}#{firing_index}",
            {"runId": run_id, "componentId": component_id},
        )

    def fetch_artifact(self, digest: str) -> bytes:
        return self.blobs.get_bytes(digest)

    # --- export -------------------------------------------------------------

    def export_run(self, run_id: str, dest: Union[str, Path]) -> Path:
        """Write the committed provenance of a run below ``dest/<runId>``.

        The target directory is rebuilt from scratch, so exporting a finished
        run twice yields identical trees.

        Raises:
            UnknownRun: No such run.
            ExportError: The tree could not be written.
        """
        entry = self._entry(run_id)
        record = entry.record
        firings = list(entry.firings)
        root = Path(dest) / run_id
        try:
            if root.exists():
                shutil.rmtree(root)
            root.mkdir(parents=True)
            (root / "workflow.wf").write_text(record.workflow, encoding="utf-8")
            _write_json(root / "run.json", record.summary())
            for firing in firings:
                self._export_firing(
                    root / firing.component_id / str(firing.firing_index), firing
                )
        except OSError as e:
            raise ExportError(f"cannot export run {run_id}: {e}") from e
        logger.info("Exported %d firings of run %s to %s", len(firings), run_id, root)
        return root

    def _export_firing(self, target: Path, firing: ComponentRunRecord) -> None:
        inputs_dir = target / "inputs"
        outputs_dir = target / "outputs"
        inputs_dir.mkdir(parents=True)
        outputs_dir.mkdir()
        for port, token in sorted(firing.inputs.items()):
            self._export_value(inputs_dir, port, token.value)
        for port, tokens in sorted(firing.outputs.items()):
            port_dir = outputs_dir / port
            port_dir.mkdir()
            for token in tokens:
                self._export_value(port_dir, str(token.sequence), token.value)
        for name, digest in (("stdout", firing.stdout), ("stderr", firing.stderr)):
            data = self.blobs.get_bytes(digest) if digest else b""
            (target / f"{name}.txt").write_bytes(data)
        _write_json(target / "meta.json", firing.to_json())

    def _export_value(self, directory: Path, stem: str, value: DataValue) -> None:
        if value.type is DataType.FILE:
            target = directory / stem / value.value.filename
            ensure_inside(target, directory)
            self.blobs.materialize(value, target)
        elif value.type is DataType.DIRECTORY:
            self.blobs.materialize(value, directory / stem)
        else:
            _write_json(directory / f"{stem}.json", value_to_json(value))


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8")


class HostedCallLog:
    """Firings this node ran on behalf of remote controllers."""

    def __init__(self, store_dir: Union[str, Path]):
        self.path = Path(store_dir) / "hosted" / "calls.jsonl"
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, entry: Dict[str, Any]) -> None:
        text = json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n"
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(text)
            f.flush()
            os.fsync(f.fileno())

    def entries(self) -> List[Dict[str, Any]]:
        if not self.path.exists():
            return []
        return [
            json.loads(line)
            for line in self.path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
