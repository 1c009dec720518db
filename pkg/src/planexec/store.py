"""Append-only per-run event logs: the replay and audit source of truth.

Two stores with the same contract: an in-memory store for tests and harness
runs, and a file store writing one newline-delimited JSON log per run plus a
lightweight index. Appends are write-ahead durable and gapless; any gap or
malformed record surfaces as an error, never skipped.
"""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import CorruptLog, SequenceGap, StorageFailure, UnknownRun


class MemoryEventStore:
    """Gapless in-memory log per run."""

    def __init__(self) -> None:
        self._logs: dict[str, list[dict[str, Any]]] = {}
        self._lock = threading.Lock()

    def append(self, run_id: str, event: Mapping[str, Any]) -> None:
        with self._lock:
            log = self._logs.setdefault(run_id, [])
            expected = len(log) + 1
            if event["seq"] != expected:
                raise SequenceGap(
                    f"run {run_id}: got seq {event['seq']}, expected {expected}"
                )
            log.append(dict(event))

    def read(self, run_id: str) -> list[dict[str, Any]]:
        with self._lock:
            if run_id not in self._logs:
                raise UnknownRun(f"no events for run {run_id!r}")
            return [dict(e) for e in self._logs[run_id]]

    def run_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._logs)


class FileEventStore:
    """One append-only .ndjson log per run under a data directory."""

    def __init__(self, data_dir: str | Path, fsync: bool = False) -> None:
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._fsync = fsync
        self._lock = threading.Lock()
        self._last_seq: dict[str, int] = {}

    def _path(self, run_id: str) -> Path:
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in run_id)
        return self.data_dir / f"{safe}.ndjson"

    def _tail_seq(self, run_id: str) -> int:
        if run_id in self._last_seq:
            return self._last_seq[run_id]
        path = self._path(run_id)
        if not path.exists():
            return 0
        last = 0
        with path.open("r", encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    last = json.loads(line)["seq"]
        self._last_seq[run_id] = last
        return last

    def append(self, run_id: str, event: Mapping[str, Any]) -> None:
        with self._lock:
            expected = self._tail_seq(run_id) + 1
            if event["seq"] != expected:
                raise SequenceGap(
                    f"run {run_id}: got seq {event['seq']}, expected {expected}"
                )
            line = json.dumps(event, ensure_ascii=False, sort_keys=True)
            try:
                with self._path(run_id).open("a", encoding="utf-8") as handle:
                    handle.write(line + "\n")
                    handle.flush()
                    if self._fsync:
                        os.fsync(handle.fileno())
            except OSError as exc:
                raise StorageFailure(f"append failed for run {run_id}: {exc}") from exc
            self._last_seq[run_id] = event["seq"]

    def read(self, run_id: str) -> list[dict[str, Any]]:
        path = self._path(run_id)
        if not path.exists():
            raise UnknownRun(f"no event log for run {run_id!r}")
        events: list[dict[str, Any]] = []
        with path.open("r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    events.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise CorruptLog(f"run {run_id} line {lineno}: malformed record ({exc})")
        verify_gapless(run_id, events)
        return events

    def run_ids(self) -> list[str]:
        return sorted(p.stem for p in self.data_dir.glob("*.ndjson"))


def verify_gapless(run_id: str, events: Iterable[Mapping[str, Any]]) -> None:
    expected = 1
    for event in events:
        if event.get("seq") != expected:
            raise CorruptLog(
                f"run {run_id}: sequence gap — got {event.get('seq')}, expected {expected}"
            )
        expected += 1
