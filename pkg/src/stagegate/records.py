"""Line-delimited record files for trajectories, samples, and reports.

Files are append-only JSON lines.  The first line is a versioned header
record that echoes the canonical run configuration; every later line is one
self-contained record.  Readers detect a truncated final line (no trailing
newline, or undecodable JSON at the tail) and report it instead of silently
consuming a partial record.

Timestamps are logical sequence numbers, not wall-clock times: identical runs
must produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterator

TRAJECTORY_SCHEMA = "stagegate.trajectory.v1"
SAMPLE_SCHEMA = "stagegate.sample.v1"
REPORT_SCHEMA = "stagegate.report.v1"


class RecordFileError(ValueError):
    """A record file violates the schema contract."""


class TruncatedRecordError(RecordFileError):
    """The final line of a record file is incomplete."""

    def __init__(self, path: Path, complete_records: int):
        self.path = path
        self.complete_records = complete_records
        super().__init__(
            f"{path}: truncated final line after {complete_records} complete record(s)"
        )


def dumps_record(record: dict[str, Any]) -> str:
    """Canonical single-line encoding: sorted keys, no stray whitespace."""
    return json.dumps(record, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


class JsonlWriter:
    """Append-only record sink with per-record atomic line writes."""

    def __init__(self, path: str | Path, schema: str, config_echo: dict[str, Any]):
        self.path = Path(path)
        self.schema = schema
        self._seq = 0
        self._fh = open(self.path, "w", encoding="utf-8", newline="\n")
        header = {"kind": "header", "schema": schema, "config": config_echo}
        self._write_line(header)

    def _write_line(self, record: dict[str, Any]) -> None:
        self._fh.write(dumps_record(record) + "\n")

    def emit(self, record: dict[str, Any]) -> None:
        record = dict(record)
        record["ts"] = self._seq
        self._seq += 1
        self._write_line(record)

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()

    def __enter__(self) -> "JsonlWriter":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


class ListSink:
    """In-memory sink with the writer interface; for tests and library use."""

    def __init__(self):
        self.records: list[dict[str, Any]] = []

    def emit(self, record: dict[str, Any]) -> None:
        self.records.append(dict(record))

    def close(self) -> None:
        pass


def read_records(path: str | Path, expect_schema: str | None = None) -> tuple[dict, list[dict]]:
    """Read a record file; returns (header, records).

    Raises :class:`TruncatedRecordError` when the final line is incomplete and
    :class:`RecordFileError` on schema mismatches.
    """
    path = Path(path)
    raw = path.read_text(encoding="utf-8")
    if raw == "":
        raise RecordFileError(f"{path}: empty record file (missing header)")
    complete = raw.endswith("\n")
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    records: list[dict] = []
    header: dict | None = None
    for i, line in enumerate(lines):
        last = i == len(lines) - 1
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            if last and not complete:
                raise TruncatedRecordError(path, len(records))
            raise RecordFileError(f"{path}:{i + 1}: undecodable record line")
        if i == 0:
            if record.get("kind") != "header" or "schema" not in record:
                raise RecordFileError(f"{path}: first line is not a schema header")
            if expect_schema is not None and record["schema"] != expect_schema:
                raise RecordFileError(
                    f"{path}: schema {record['schema']!r}, expected {expect_schema!r}"
                )
            header = record
        else:
            records.append(record)
    if not complete:
        # The final line decoded but the newline is missing; treat as torn.
        raise TruncatedRecordError(path, max(len(records) - 1, 0))
    assert header is not None
    return header, records


def iter_trajectory_records(path: str | Path) -> Iterator[dict]:
    _, records = read_records(path, TRAJECTORY_SCHEMA)
    yield from records
