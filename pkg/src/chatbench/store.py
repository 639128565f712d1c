"""Durable append-only session logs.

One file per session under the data directory, newline-delimited
canonical record encodings: human-inspectable with any text tool and
crash-recoverable by dropping a torn tail line. Append is the only
mutation and is idempotent on (session_id, record_seq): a crash between
append and acknowledgment may redeliver a record, which must not
duplicate it on disk.
"""

from __future__ import annotations

import os
from pathlib import Path

from .model import EventRecord
from .protocol import DecodeError, decode_record, encode_record

SEQ_GAP = "SEQ_GAP"
STORAGE_FAILURE = "STORAGE_FAILURE"
CORRUPT_LOG = "CORRUPT_LOG"


class StoreError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class SessionLog:
    """Append-only log for one session, mirrored in memory for reads."""

    def __init__(self, path: Path, session_id: str):
        self.path = Path(path)
        self.session_id = session_id
        self.records: list[EventRecord] = []
        self._fh = None
        self._dirty = False

    @classmethod
    def open(cls, path: Path, session_id: str | None = None) -> SessionLog:
        """Open (or create) a log file, recovering from a torn tail write."""
        path = Path(path)
        log = cls(path, session_id or path.stem)
        if path.exists():
            data = path.read_bytes()
            lines = data.split(b"\n")
            complete, tail = lines[:-1], lines[-1]
            for i, line in enumerate(complete, start=1):
                try:
                    record = decode_record(line)
                except DecodeError as exc:
                    raise StoreError(CORRUPT_LOG, f"{path}: line {i}: {exc}") from exc
                log._check_order(record, position=i)
                log.records.append(record)
            if tail:
                # partial final write: try it, drop it if unreadable
                try:
                    record = decode_record(tail)
                    log._check_order(record, position=len(complete) + 1)
                    log.records.append(record)
                    log._rewrite_tail_newline()
                except DecodeError:
                    log._truncate_to(len(b"\n".join(complete) + b"\n") if complete else 0)
            if log.records and session_id is None:
                log.session_id = log.records[0].session_id
        return log

    def _check_order(self, record: EventRecord, position: int) -> None:
        if record.record_seq != position:
            raise StoreError(CORRUPT_LOG,
                             f"{self.path}: record_seq {record.record_seq} at line {position}")
        if self.records and record.session_id != self.records[0].session_id:
            raise StoreError(CORRUPT_LOG, f"{self.path}: mixed session ids")

    def _rewrite_tail_newline(self) -> None:
        with open(self.path, "ab") as fh:
            fh.write(b"\n")
            fh.flush()
            os.fsync(fh.fileno())

    def _truncate_to(self, size: int) -> None:
        with open(self.path, "r+b") as fh:
            fh.truncate(size)
            fh.flush()
            os.fsync(fh.fileno())

    def append(self, record: EventRecord, *, sync: bool = True) -> None:
        """Written and flushed before return; fsynced too unless the caller
        opts into group commit (then it must call sync() before anything
        acknowledges the record). Redelivery of an already-stored seq is a
        no-op when the content matches and an error when it does not."""
        expected = len(self.records) + 1
        if record.record_seq < expected:
            stored = self.records[record.record_seq - 1]
            if stored != record:
                raise StoreError(STORAGE_FAILURE,
                                 f"conflicting redelivery of record_seq {record.record_seq}")
            return
        if record.record_seq > expected:
            raise StoreError(SEQ_GAP,
                             f"record_seq {record.record_seq} arrived, {expected} expected")
        line = encode_record(record) + b"\n"
        try:
            if self._fh is None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self._fh = open(self.path, "ab")
            self._fh.write(line)
            self._fh.flush()
            self._dirty = True
            if sync:
                self.sync()
        except OSError as exc:
            raise StoreError(STORAGE_FAILURE, f"{self.path}: {exc}") from exc
        self.records.append(record)

    @property
    def dirty(self) -> bool:
        return self._dirty

    def sync(self) -> None:
        """Force written records to stable storage (group commit point)."""
        if self._fh is not None and self._dirty:
            os.fsync(self._fh.fileno())
            self._dirty = False

    def close(self) -> None:
        if self._fh is not None:
            self.sync()
            self._fh.close()
            self._fh = None

    def __len__(self) -> int:
        return len(self.records)


def log_path(data_dir: Path | str, session_id: str) -> Path:
    return Path(data_dir) / f"{session_id}.log"
