"""Single-file SQLite artefact database with a single-writer lock."""

from __future__ import annotations

import csv
import fcntl
import io
import json
import os
import sqlite3
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping

from .artefacts import ALL_TYPES, ArtefactType, zero_counts
from .errors import (
    DuplicateObservationError,
    StoreError,
    StoreIntegrityError,
    StoreLockedError,
    UnknownTestError,
)
from .library import MalwareSample
from .oracle import OracleReport

DEFAULT_FILENAME = "matef.sqlite"
STORE_ENV = "MATEF_STORE"
RANDOM_LINEAGE = "Random"

SCHEMA = """
CREATE TABLE IF NOT EXISTS samples (
    md5 TEXT PRIMARY KEY,
    sha256 TEXT NOT NULL,
    byte_size INTEGER NOT NULL,
    source_tag TEXT NOT NULL,
    capability_tags TEXT NOT NULL,
    ingested_at TEXT NOT NULL,
    content BLOB NOT NULL
);
CREATE TABLE IF NOT EXISTS sample_tags (
    md5 TEXT NOT NULL REFERENCES samples(md5),
    tag TEXT NOT NULL,
    PRIMARY KEY (md5, tag)
);
CREATE TABLE IF NOT EXISTS oracle_reports (
    report_id INTEGER PRIMARY KEY AUTOINCREMENT,
    md5 TEXT NOT NULL,
    source_id TEXT NOT NULL,
    content_key TEXT NOT NULL,
    received_at TEXT NOT NULL,
    artefacts TEXT NOT NULL,
    UNIQUE (md5, source_id, content_key)
);
CREATE TABLE IF NOT EXISTS expected (
    md5 TEXT NOT NULL,
    source_id TEXT NOT NULL,
    type TEXT NOT NULL,
    count INTEGER NOT NULL,
    PRIMARY KEY (md5, source_id, type)
);
CREATE TABLE IF NOT EXISTS groups (
    group_id INTEGER PRIMARY KEY AUTOINCREMENT,
    tool_id TEXT NOT NULL,
    duration_s REAL NOT NULL,
    spec TEXT NOT NULL,
    hashes TEXT NOT NULL,
    run_ids TEXT NOT NULL DEFAULT '[]'
);
CREATE TABLE IF NOT EXISTS tests (
    test_id INTEGER PRIMARY KEY AUTOINCREMENT,
    tool_id TEXT NOT NULL,
    duration_s REAL NOT NULL,
    dataset_lineage TEXT NOT NULL,
    started_at TEXT NOT NULL,
    group_id INTEGER REFERENCES groups(group_id)
);
CREATE TABLE IF NOT EXISTS observations (
    test_id INTEGER NOT NULL REFERENCES tests(test_id),
    md5 TEXT NOT NULL,
    file INTEGER NOT NULL,
    mutex INTEGER NOT NULL,
    registry INTEGER NOT NULL,
    port INTEGER NOT NULL,
    rport INTEGER NOT NULL,
    executed_ok INTEGER NOT NULL,
    log_ref TEXT,
    PRIMARY KEY (test_id, md5)
);
CREATE TABLE IF NOT EXISTS logs (
    test_id INTEGER NOT NULL REFERENCES tests(test_id),
    md5 TEXT NOT NULL,
    content BLOB NOT NULL,
    PRIMARY KEY (test_id, md5)
);
CREATE TABLE IF NOT EXISTS datasets (
    dataset_id TEXT PRIMARY KEY,
    tool_id TEXT NOT NULL,
    duration_s REAL NOT NULL,
    combo TEXT NOT NULL,
    lineage INTEGER,
    rows TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS results (
    test TEXT PRIMARY KEY,
    description TEXT NOT NULL,
    row TEXT NOT NULL
);
"""

_TYPE_COLUMNS = {t: t.value.lower() for t in ALL_TYPES}


def _ts(value: datetime) -> str:
    if value.tzinfo is None:
        value = value.replace(tzinfo=timezone.utc)
    return value.astimezone(timezone.utc).isoformat()


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class TestRecord:
    __test__ = False

    test_id: int
    tool_id: str
    duration_s: float
    dataset_lineage: str | int
    started_at: datetime
    group_id: int | None = None


@dataclass(frozen=True)
class ObservationRecord:
    test_id: int
    md5: str
    counts: Mapping[ArtefactType, int] = field(default_factory=zero_counts)
    executed_ok: bool = True
    log_ref: str | None = None

    def __post_init__(self):
        if any(v < 0 for v in self.counts.values()):
            raise ValueError("artefact counts must be non-negative")
        if not self.executed_ok and any(self.counts.values()):
            raise ValueError("a failed execution cannot carry artefact counts")


def resolve_path(path: str | os.PathLike | None) -> Path:
    if path is None:
        path = os.environ.get(STORE_ENV) or DEFAULT_FILENAME
    p = Path(path)
    if p.is_dir():
        p = p / DEFAULT_FILENAME
    return p


class ArtefactStore:
    """The malware artefact database.

    A writer handle holds an exclusive ``flock`` on ``<path>.lock`` for its whole
    lifetime, so a second writer is refused rather than queued. Readers open the
    database read-only and never take the lock.
    """

    def __init__(self, path: str | os.PathLike | None = None, readonly: bool = False):
        self.path = resolve_path(path)
        self.readonly = readonly
        self._lock_fh = None
        if readonly:
            if not self.path.exists():
                raise StoreError(f"no store at {self.path}")
            self._conn = self._connect(f"file:{self.path}?mode=ro", uri=True)
            self._check_integrity()
            return
        if not self.path.parent.exists():
            raise StoreError(f"store directory does not exist: {self.path.parent}")
        self._acquire_lock()
        try:
            self._conn = self._connect(str(self.path))
            self._check_integrity()
            with self._conn:
                self._conn.executescript(SCHEMA)
        except BaseException:
            self._release_lock()
            raise

    @staticmethod
    def _connect(target: str, uri: bool = False) -> sqlite3.Connection:
        conn = sqlite3.connect(target, uri=uri, check_same_thread=False)
        conn.execute("PRAGMA foreign_keys = ON")
        return conn

    def _acquire_lock(self) -> None:
        fh = open(str(self.path) + ".lock", "a+")
        try:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            fh.close()
            raise StoreLockedError(f"store {self.path} is already open by another writer") from None
        self._lock_fh = fh

    def _release_lock(self) -> None:
        if self._lock_fh is not None:
            fcntl.flock(self._lock_fh.fileno(), fcntl.LOCK_UN)
            self._lock_fh.close()
            self._lock_fh = None

    def _check_integrity(self) -> None:
        try:
            row = self._conn.execute("PRAGMA quick_check").fetchone()
            if not self.readonly:
                self._conn.execute("PRAGMA journal_mode=WAL")
        except sqlite3.DatabaseError as exc:
            self._conn.close()
            raise StoreIntegrityError(f"{self.path} is not a valid artefact store: {exc}") from exc
        if row is None or row[0] != "ok":
            self._conn.close()
            raise StoreIntegrityError(f"integrity check failed for {self.path}: {row}")

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None
        self._release_lock()

    def __enter__(self) -> "ArtefactStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _write(self):
        if self.readonly:
            raise StoreError("store opened read-only")
        return self._conn

    # -- samples ---------------------------------------------------------

    @staticmethod
    def _sample_from_row(row) -> MalwareSample:
        md5, sha256, size, source, tags, ingested = row
        return MalwareSample(
            md5=md5,
            byte_size=size,
            source_tag=source,
            capability_tags=frozenset(json.loads(tags)),
            ingested_at=datetime.fromisoformat(ingested),
            sha256=sha256,
        )

    def put_sample(self, sample: MalwareSample, content: bytes) -> MalwareSample:
        conn = self._write()
        try:
            with conn:
                conn.execute(
                    "INSERT INTO samples VALUES (?, ?, ?, ?, ?, ?, ?)",
                    (
                        sample.md5,
                        sample.sha256,
                        sample.byte_size,
                        sample.source_tag,
                        json.dumps(sorted(sample.capability_tags)),
                        _ts(sample.ingested_at),
                        sqlite3.Binary(content),
                    ),
                )
                conn.executemany(
                    "INSERT INTO sample_tags VALUES (?, ?)",
                    [(sample.md5, tag) for tag in sorted(sample.capability_tags)],
                )
        except sqlite3.IntegrityError as exc:
            existing = self.get_sample(sample.md5)
            if existing is None:
                raise StoreError(f"failed to store sample {sample.md5}: {exc}") from exc
            return existing
        except sqlite3.Error as exc:
            raise StoreError(f"failed to store sample {sample.md5}: {exc}") from exc
        return sample

    def get_sample(self, md5: str) -> MalwareSample | None:
        row = self._conn.execute(
            "SELECT md5, sha256, byte_size, source_tag, capability_tags, ingested_at FROM samples WHERE md5 = ?",
            (md5,),
        ).fetchone()
        return self._sample_from_row(row) if row else None

    def get_content(self, md5: str) -> bytes | None:
        row = self._conn.execute("SELECT content FROM samples WHERE md5 = ?", (md5,)).fetchone()
        return bytes(row[0]) if row else None

    def list_samples(self, tag: str | None = None) -> list[MalwareSample]:
        cols = "s.md5, s.sha256, s.byte_size, s.source_tag, s.capability_tags, s.ingested_at"
        if tag is None:
            rows = self._conn.execute(f"SELECT {cols} FROM samples s ORDER BY s.md5")
        else:
            rows = self._conn.execute(
                f"SELECT {cols} FROM samples s JOIN sample_tags t ON s.md5 = t.md5 "
                "WHERE t.tag = ? ORDER BY s.md5",
                (tag,),
            )
        return [self._sample_from_row(r) for r in rows]

    # -- oracle ----------------------------------------------------------

    def put_report(self, report: OracleReport) -> OracleReport:
        """Persist a report; an identical (md5, source, content) report is returned unchanged."""
        conn = self._write()
        key = json.dumps(report.content_key()[2])
        existing = conn.execute(
            "SELECT received_at FROM oracle_reports WHERE md5 = ? AND source_id = ? AND content_key = ?",
            (report.md5, report.source_id, key),
        ).fetchone()
        if existing:
            return OracleReport(report.md5, report.source_id, report.artefacts, datetime.fromisoformat(existing[0]))
        artefacts = {t.value: sorted(report.artefacts.get(t, ())) for t in ALL_TYPES}
        with conn:
            conn.execute(
                "INSERT INTO oracle_reports (md5, source_id, content_key, received_at, artefacts) VALUES (?, ?, ?, ?, ?)",
                (report.md5, report.source_id, key, _ts(report.received_at), json.dumps(artefacts)),
            )
            latest = self._latest_report_row(report.md5, report.source_id)
            counts = {t: len(v) for t, v in json.loads(latest[3]).items()}
            conn.executemany(
                "INSERT OR REPLACE INTO expected VALUES (?, ?, ?, ?)",
                [(report.md5, report.source_id, t, c) for t, c in counts.items()],
            )
        return report

    def _latest_report_row(self, md5: str, source_id: str):
        return self._conn.execute(
            "SELECT md5, source_id, received_at, artefacts FROM oracle_reports "
            "WHERE md5 = ? AND source_id = ? ORDER BY received_at DESC, report_id DESC LIMIT 1",
            (md5, source_id),
        ).fetchone()

    def oracle_sources(self, md5: str | None = None) -> list[str]:
        if md5 is None:
            rows = self._conn.execute("SELECT DISTINCT source_id FROM oracle_reports ORDER BY source_id")
        else:
            rows = self._conn.execute(
                "SELECT DISTINCT source_id FROM oracle_reports WHERE md5 = ? ORDER BY source_id", (md5,)
            )
        return [r[0] for r in rows]

    def latest_report(self, md5: str, source_id: str | None = None) -> OracleReport | None:
        if source_id is None:
            sources = self.oracle_sources(md5)
            if not sources:
                return None
            if len(sources) > 1:
                raise StoreError(f"{md5} has reports from several sources {sources}; pick a source_id")
            source_id = sources[0]
        row = self._latest_report_row(md5, source_id)
        if row is None:
            return None
        artefacts = {ArtefactType(t): frozenset(v) for t, v in json.loads(row[3]).items()}
        return OracleReport(row[0], row[1], artefacts, datetime.fromisoformat(row[2]))

    def expected_table(self, source_id: str) -> dict[str, dict[ArtefactType, int]]:
        table: dict[str, dict[ArtefactType, int]] = {}
        for md5, t, c in self._conn.execute(
            "SELECT md5, type, count FROM expected WHERE source_id = ?", (source_id,)
        ):
            table.setdefault(md5, zero_counts())[ArtefactType(t)] = c
        return table

    # -- tests and groups --------------------------------------------------

    def create_group(self, tool_id: str, duration_s: float, spec: dict, hashes: list[str]) -> int:
        conn = self._write()
        with conn:
            cur = conn.execute(
                "INSERT INTO groups (tool_id, duration_s, spec, hashes) VALUES (?, ?, ?, ?)",
                (tool_id, duration_s, json.dumps(spec, sort_keys=True), json.dumps(hashes)),
            )
        return cur.lastrowid

    def set_group_runs(self, group_id: int, run_ids: list[int]) -> None:
        with self._write():
            self._conn.execute("UPDATE groups SET run_ids = ? WHERE group_id = ?", (json.dumps(run_ids), group_id))

    def get_group(self, group_id: int) -> dict | None:
        row = self._conn.execute(
            "SELECT group_id, tool_id, duration_s, spec, hashes, run_ids FROM groups WHERE group_id = ?",
            (group_id,),
        ).fetchone()
        if row is None:
            return None
        return {
            "group_id": row[0],
            "tool_id": row[1],
            "duration_s": row[2],
            "spec": json.loads(row[3]),
            "hashes": json.loads(row[4]),
            "run_ids": json.loads(row[5]),
        }

    def list_groups(self) -> list[dict]:
        ids = [r[0] for r in self._conn.execute("SELECT group_id FROM groups ORDER BY group_id")]
        return [self.get_group(i) for i in ids]

    def create_test(
        self,
        tool_id: str,
        duration_s: float,
        dataset_lineage: str | int = RANDOM_LINEAGE,
        started_at: datetime | None = None,
        group_id: int | None = None,
    ) -> TestRecord:
        conn = self._write()
        if dataset_lineage != RANDOM_LINEAGE:
            dataset_lineage = int(dataset_lineage)
            if self.get_test(dataset_lineage) is None:
                raise UnknownTestError(f"lineage references unknown test {dataset_lineage}")
        started_at = started_at or utcnow()
        with conn:
            cur = conn.execute(
                "INSERT INTO tests (tool_id, duration_s, dataset_lineage, started_at, group_id) VALUES (?, ?, ?, ?, ?)",
                (tool_id, duration_s, str(dataset_lineage), _ts(started_at), group_id),
            )
        return TestRecord(cur.lastrowid, tool_id, duration_s, dataset_lineage, started_at, group_id)

    def get_test(self, test_id: int) -> TestRecord | None:
        row = self._conn.execute(
            "SELECT test_id, tool_id, duration_s, dataset_lineage, started_at, group_id FROM tests WHERE test_id = ?",
            (test_id,),
        ).fetchone()
        if row is None:
            return None
        lineage = row[3] if row[3] == RANDOM_LINEAGE else int(row[3])
        return TestRecord(row[0], row[1], row[2], lineage, datetime.fromisoformat(row[4]), row[5])

    def list_tests(self) -> list[TestRecord]:
        ids = [r[0] for r in self._conn.execute("SELECT test_id FROM tests ORDER BY test_id")]
        return [self.get_test(i) for i in ids]

    # -- observations ------------------------------------------------------

    def record_observation(self, rec: ObservationRecord) -> None:
        self.record_observations([rec])

    def record_observations(self, recs: Iterable[ObservationRecord], logs: Mapping[str, bytes] | None = None) -> None:
        """Atomically insert observations (and optional raw logs keyed by md5)."""
        conn = self._write()
        recs = list(recs)
        known = {r.test_id for r in recs}
        for test_id in known:
            if self.get_test(test_id) is None:
                raise UnknownTestError(f"unknown test_id {test_id}")
        try:
            with conn:
                for rec in recs:
                    conn.execute(
                        "INSERT INTO observations VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
                        (
                            rec.test_id,
                            rec.md5,
                            *(int(rec.counts.get(t, 0)) for t in ALL_TYPES),
                            int(rec.executed_ok),
                            rec.log_ref,
                        ),
                    )
                    if logs and rec.md5 in logs and logs[rec.md5] is not None:
                        conn.execute(
                            "INSERT INTO logs VALUES (?, ?, ?)",
                            (rec.test_id, rec.md5, sqlite3.Binary(logs[rec.md5])),
                        )
        except sqlite3.IntegrityError as exc:
            raise DuplicateObservationError(f"duplicate observation in batch for tests {sorted(known)}: {exc}") from exc

    @staticmethod
    def _obs_from_row(row) -> ObservationRecord:
        test_id, md5, *counts, ok, log_ref = row
        return ObservationRecord(test_id, md5, dict(zip(ALL_TYPES, counts)), bool(ok), log_ref)

    def observations(self, test_id: int) -> dict[str, ObservationRecord]:
        if self.get_test(test_id) is None:
            raise UnknownTestError(f"unknown test_id {test_id}")
        rows = self._conn.execute("SELECT * FROM observations WHERE test_id = ? ORDER BY md5", (test_id,))
        return {r[1]: self._obs_from_row(r) for r in rows}

    def list_group(self, test_ids: list[int]) -> list[dict[str, ObservationRecord]]:
        if len(test_ids) != 3:
            raise ValueError(f"a test run group has exactly 3 runs, got {len(test_ids)}")
        return [self.observations(t) for t in test_ids]

    @staticmethod
    def log_ref(test_id: int, md5: str) -> str:
        return f"store:logs/{test_id}/{md5}"

    def get_log(self, ref: str) -> bytes | None:
        _, _, rest = ref.partition("store:logs/")
        test_id, _, md5 = rest.partition("/")
        row = self._conn.execute(
            "SELECT content FROM logs WHERE test_id = ? AND md5 = ?", (int(test_id), md5)
        ).fetchone()
        return bytes(row[0]) if row else None

    def dump_observations(self) -> str:
        """CSV ``test_id,md5,type,count,executed_ok``; one line per (observation, type)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["test_id", "md5", "type", "count", "executed_ok"])
        for row in self._conn.execute("SELECT * FROM observations ORDER BY test_id, md5"):
            rec = self._obs_from_row(row)
            for t in ALL_TYPES:
                writer.writerow([rec.test_id, rec.md5, t.value, rec.counts[t], int(rec.executed_ok)])
        return buf.getvalue()

    # -- datasets and results ---------------------------------------------

    def save_dataset(self, meta: dict, rows: list[tuple[str, int, int]]) -> None:
        with self._write():
            self._conn.execute(
                "INSERT OR REPLACE INTO datasets VALUES (?, ?, ?, ?, ?, ?)",
                (meta["dataset_id"], meta["tool_id"], meta["duration_s"], meta["combo"], meta.get("lineage"), json.dumps(rows)),
            )

    def load_dataset(self, dataset_id: str) -> tuple[dict, list[tuple[str, int, int]]] | None:
        row = self._conn.execute("SELECT * FROM datasets WHERE dataset_id = ?", (dataset_id,)).fetchone()
        if row is None:
            return None
        meta = dict(zip(["dataset_id", "tool_id", "duration_s", "combo", "lineage"], row[:5]))
        return meta, [tuple(r) for r in json.loads(row[5])]

    def list_datasets(self) -> list[str]:
        return [r[0] for r in self._conn.execute("SELECT dataset_id FROM datasets ORDER BY dataset_id")]

    def save_result(self, test: str, description: str, row: dict) -> None:
        with self._write():
            self._conn.execute(
                "INSERT OR REPLACE INTO results VALUES (?, ?, ?)", (test, description, json.dumps(row, sort_keys=True))
            )

    def list_results(self) -> list[dict]:
        return [json.loads(r[0]) for r in self._conn.execute("SELECT row FROM results ORDER BY test")]


def open_store(path: str | os.PathLike | None = None, readonly: bool = False) -> ArtefactStore:
    return ArtefactStore(path, readonly=readonly)
