"""Malware library: hash-keyed ingestion, tagged sampling and in-tray partitioning."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import random
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

from .errors import LibraryError, SampleShortfallError

if TYPE_CHECKING:
    from .store import ArtefactStore

log = logging.getLogger(__name__)

NETWORK_TAG = "network_artefacts"
LISTING_HEADER = ["md5", "byte_size", "source_tag", "capability_tags", "ingested_at"]


@dataclass(frozen=True)
class MalwareSample:
    md5: str
    byte_size: int
    source_tag: str
    capability_tags: frozenset[str]
    ingested_at: datetime
    sha256: str = ""


@dataclass(frozen=True)
class InTray:
    guest_index: int
    hashes: tuple[str, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.hashes)


def ingest_binary(
    store: "ArtefactStore",
    content: bytes,
    source_tag: str = "",
    capability_tags: Iterable[str] = (),
    now: datetime | None = None,
) -> MalwareSample:
    """Add a binary to the library. Re-ingesting identical bytes returns the stored record."""
    if not content:
        raise LibraryError("refusing to ingest an empty binary")
    md5 = hashlib.md5(content).hexdigest()
    existing = store.get_sample(md5)
    if existing is not None:
        return existing
    sample = MalwareSample(
        md5=md5,
        byte_size=len(content),
        source_tag=source_tag,
        capability_tags=frozenset(capability_tags),
        ingested_at=now or datetime.now(timezone.utc),
        sha256=hashlib.sha256(content).hexdigest(),
    )
    return store.put_sample(sample, content)


def read_manifest(path: Path) -> dict[str, tuple[str, frozenset[str]]]:
    """Sidecar CSV: filename, source_tag, comma-joined capability tags."""
    entries = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "filename":
                continue
            name = row[0].strip()
            source = row[1].strip() if len(row) > 1 else ""
            tags = frozenset(t.strip() for t in row[2].split(",") if t.strip()) if len(row) > 2 else frozenset()
            entries[name] = (source, tags)
    return entries


def ingest_directory(
    store: "ArtefactStore",
    directory: Path,
    manifest: Path | None = None,
    default_source: str = "directory",
    default_tags: Iterable[str] = (),
) -> dict[str, int]:
    """Ingest every regular file in ``directory``; returns counts of new/duplicate/empty files."""
    directory = Path(directory)
    if not directory.is_dir():
        raise LibraryError(f"not a readable directory: {directory}")
    if manifest is None and (directory / "manifest.csv").exists():
        manifest = directory / "manifest.csv"
    meta = read_manifest(manifest) if manifest else {}
    summary = {"ingested": 0, "duplicates": 0, "skipped_empty": 0}
    for path in sorted(directory.iterdir()):
        if not path.is_file() or (manifest and path.resolve() == Path(manifest).resolve()):
            continue
        content = path.read_bytes()
        if not content:
            summary["skipped_empty"] += 1
            continue
        source, tags = meta.get(path.name, (default_source, frozenset(default_tags)))
        if store.get_sample(hashlib.md5(content).hexdigest()) is not None:
            summary["duplicates"] += 1
            continue
        ingest_binary(store, content, source, tags)
        summary["ingested"] += 1
    log.info("ingested %(ingested)d new binaries (%(duplicates)d duplicates)", summary)
    return summary


def select_sample(store: "ArtefactStore", tag: str, count: int, seed: int) -> list[str]:
    """Uniform random draw without replacement among samples carrying ``tag``."""
    if count <= 0:
        raise LibraryError("sample count must be positive")
    population = sorted(s.md5 for s in store.list_samples(tag=tag))
    if count > len(population):
        raise SampleShortfallError(tag, count, len(population))
    return random.Random(seed).sample(population, count)


def partition_in_trays(hashes: list[str], guest_count: int) -> list[InTray]:
    """Split hashes into contiguous per-guest trays; the remainder goes to the lowest guests."""
    if guest_count < 1:
        raise LibraryError("guest_count must be at least 1")
    base, extra = divmod(len(hashes), guest_count)
    trays = []
    start = 0
    for g in range(guest_count):
        size = base + (1 if g < extra else 0)
        trays.append(InTray(g, tuple(hashes[start:start + size])))
        start += size
    return trays


def export_listing(store: "ArtefactStore") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LISTING_HEADER)
    for s in store.list_samples():
        writer.writerow([
            s.md5,
            s.byte_size,
            s.source_tag,
            ",".join(sorted(s.capability_tags)),
            s.ingested_at.isoformat(),
        ])
    return buf.getvalue()
