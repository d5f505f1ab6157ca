"""Repeatability filtering and (md5, expected, observed) analysis datasets."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .artefacts import ALL_TYPES, TypeCombo
from .errors import MatefError
from .orchestrator import TestRunGroup
from .store import ArtefactStore, ObservationRecord

log = logging.getLogger(__name__)

CSV_HEADER = ["md5", "expected", "observed"]


@dataclass(frozen=True)
class DatasetRow:
    md5: str
    expected: int
    observed: int

    @property
    def error(self) -> int:
        return abs(self.expected - self.observed)


@dataclass
class Dataset:
    dataset_id: str
    tool_id: str
    duration_s: float
    combo: TypeCombo
    rows: list[DatasetRow] = field(default_factory=list)
    lineage: int | None = None
    dropped_unknown: int = 0

    def __post_init__(self):
        seen = set()
        for r in self.rows:
            if r.md5 in seen:
                raise ValueError(f"duplicate md5 {r.md5} in dataset {self.dataset_id}")
            seen.add(r.md5)

    def meta(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "tool_id": self.tool_id,
            "duration_s": self.duration_s,
            "combo": self.combo.name,
            "lineage": self.lineage,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.md5, r.expected, r.observed])
        return buf.getvalue()

    def write(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{self.dataset_id}.csv"
        path.write_text(self.to_csv())
        (directory / f"{self.dataset_id}.meta.json").write_text(json.dumps(self.meta(), indent=2, sort_keys=True) + "\n")
        return path


def read_dataset(csv_path: Path) -> Dataset:
    csv_path = Path(csv_path)
    meta_path = csv_path.with_name(csv_path.stem + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise MatefError(f"{csv_path}: expected header {','.join(CSV_HEADER)}")
        rows = [DatasetRow(md5, int(e), int(o)) for md5, e, o in reader]
    return Dataset(
        dataset_id=meta.get("dataset_id", csv_path.stem),
        tool_id=meta.get("tool_id", ""),
        duration_s=meta.get("duration_s", 0.0),
        combo=TypeCombo.parse(meta.get("combo", "All")),
        rows=rows,
        lineage=meta.get("lineage"),
    )


def repeatability_filter(
    group_obs: Sequence[Mapping[str, ObservationRecord]],
    combo: TypeCombo,
    all_types: bool = False,
) -> set[str]:
    """Hashes that executed in every run and gave the same observed count each time.

    By default the compared count is the combo total; ``all_types`` instead
    demands identical counts for every artefact type.
    """
    if len(group_obs) != 3:
        raise ValueError(f"repeatability needs exactly 3 runs, got {len(group_obs)}")
    first, *rest = group_obs
    keep = set()
    for md5, rec in first.items():
        recs = [rec] + [m.get(md5) for m in rest]
        if any(r is None or not r.executed_ok for r in recs):
            continue
        if all_types:
            signatures = {tuple(r.counts.get(t, 0) for t in ALL_TYPES) for r in recs}
        else:
            signatures = {combo.total(r.counts) for r in recs}
        if len(signatures) == 1:
            keep.add(md5)
    return keep


def build_dataset(
    store: ArtefactStore,
    group: TestRunGroup,
    combo: TypeCombo,
    oracle_source: str,
    dataset_id: str | None = None,
    all_types: bool = False,
) -> Dataset:
    obs = store.list_group(list(group.run_ids))
    keep = repeatability_filter(obs, combo, all_types=all_types)
    expected = store.expected_table(oracle_source)
    rows, unknown = [], 0
    for md5 in sorted(keep):
        counts = expected.get(md5)
        if counts is None:
            unknown += 1
            continue
        rows.append(DatasetRow(md5, combo.total(counts), combo.total(obs[0][md5].counts)))
    if unknown:
        log.info("group %s: dropped %d repeatable binaries unknown to oracle %r", group.group_id, unknown, oracle_source)
    if not rows:
        log.warning("group %s produced an empty dataset for %s", group.group_id, combo.name)
    return Dataset(
        dataset_id=dataset_id or f"G{group.group_id}",
        tool_id=group.spec.tool_id,
        duration_s=group.spec.duration_s,
        combo=combo,
        rows=rows,
        lineage=group.group_id,
        dropped_unknown=unknown,
    )


def save_dataset(store: ArtefactStore, ds: Dataset) -> None:
    store.save_dataset(ds.meta(), [(r.md5, r.expected, r.observed) for r in ds.rows])


def load_dataset(store: ArtefactStore, dataset_id: str) -> Dataset:
    found = store.load_dataset(dataset_id)
    if found is None:
        raise MatefError(f"dataset {dataset_id!r} not found in store")
    meta, rows = found
    return Dataset(
        dataset_id=meta["dataset_id"],
        tool_id=meta["tool_id"],
        duration_s=meta["duration_s"],
        combo=TypeCombo.parse(meta["combo"]),
        rows=[DatasetRow(*r) for r in rows],
        lineage=meta["lineage"],
    )
