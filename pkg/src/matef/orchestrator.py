"""Test Run and Test Run Group lifecycle over a fleet of guests."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Protocol

from .adapters import parse_log_outcome, type_counts
from .errors import BackendError, MatefError, UnsupportedBackendError
from .library import InTray, partition_in_trays
from .sandbox import ToolPackage, seed_from
from .store import RANDOM_LINEAGE, ArtefactStore, ObservationRecord

log = logging.getLogger(__name__)

PRESET_DURATIONS = (10, 60, 300, 600)


class Guest(Protocol):
    def revert_to_clean(self) -> None: ...
    def copy_in(self, tool_package: ToolPackage, binary: bytes) -> None: ...
    def execute_for(self, duration_s: float) -> None: ...
    def collect_log(self) -> bytes | None: ...
    def shutdown(self) -> None: ...


class GuestBackend(Protocol):
    def for_run(self, run_seed: int) -> "GuestBackend": ...
    def provision(self, guest_index: int, start_at: float = 0.0) -> Guest: ...


@dataclass(frozen=True)
class TestRunSpec:
    __test__ = False

    tool_id: str
    duration_s: float
    guest_count: int = 60
    stagger_s: float = 10.0
    seed: int = 0
    runs_per_group: int = 3
    workers: int = 1

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.stagger_s < 0:
            raise ValueError("stagger_s must be non-negative")
        if self.guest_count < 1:
            raise ValueError("guest_count must be at least 1")


@dataclass(frozen=True)
class Outcome:
    executed_ok: bool
    log: bytes | None = None
    reason: str = ""


@dataclass(frozen=True)
class ScheduleEntry:
    guest_index: int
    md5: str
    start_s: float
    end_s: float


@dataclass
class TestRunResult:
    __test__ = False

    test_id: int | None
    outcomes: dict[str, Outcome] = field(default_factory=dict)
    schedule: list[ScheduleEntry] = field(default_factory=list)


@dataclass(frozen=True)
class TestRunGroup:
    __test__ = False

    group_id: int
    spec: TestRunSpec
    run_ids: tuple[int, ...]
    sample_ref: tuple[str, ...]


def _run_guest(
    spec: TestRunSpec,
    tray: InTray,
    backend: GuestBackend,
    store: ArtefactStore | None,
    binaries: dict[str, bytes],
) -> tuple[dict[str, Outcome], list[ScheduleEntry]]:
    outcomes: dict[str, Outcome] = {}
    schedule: list[ScheduleEntry] = []
    if not tray.hashes:
        return outcomes, schedule
    package = ToolPackage(spec.tool_id)
    start_at = tray.guest_index * spec.stagger_s
    try:
        guest = backend.provision(tray.guest_index, start_at=start_at)
    except UnsupportedBackendError:
        raise
    except BackendError as exc:
        return {h: Outcome(False, None, f"provision failed: {exc}") for h in tray.hashes}, schedule
    try:
        for i, md5 in enumerate(tray.hashes):
            began = getattr(guest, "now", None)
            try:
                guest.revert_to_clean()
                guest.copy_in(package, binaries[md5])
                guest.execute_for(spec.duration_s)
                raw = guest.collect_log()
            except BackendError as exc:
                reason = f"guest {tray.guest_index} fault: {exc}"
                log.warning("%s; marking %d remaining binaries failed", reason, len(tray.hashes) - i)
                for rest in tray.hashes[i:]:
                    outcomes[rest] = Outcome(False, None, reason)
                break
            if began is not None:
                schedule.append(ScheduleEntry(tray.guest_index, md5, began, guest.now))
            if raw is None:
                outcomes[md5] = Outcome(False, None, "no log produced")
            else:
                outcomes[md5] = Outcome(True, raw)
    finally:
        try:
            guest.shutdown()
        except BackendError:
            log.warning("guest %d did not shut down cleanly", tray.guest_index)
    return outcomes, schedule


def _load_binaries(store: ArtefactStore | None, hashes, binaries: dict[str, bytes] | None) -> dict[str, bytes]:
    found = dict(binaries or {})
    for md5 in hashes:
        if md5 in found:
            continue
        content = store.get_content(md5) if store is not None else None
        if content is None:
            raise MatefError(f"binary {md5} is not in the library")
        found[md5] = content
    return found


def run_test(
    spec: TestRunSpec,
    trays: list[InTray],
    backend: GuestBackend,
    store: ArtefactStore | None = None,
    lineage: str | int = RANDOM_LINEAGE,
    group_id: int | None = None,
    binaries: dict[str, bytes] | None = None,
    strict_logs: bool = False,
) -> TestRunResult:
    """Execute every in-tray binary once; guests run in parallel, each tray sequentially."""
    all_hashes = [h for t in trays for h in t.hashes]
    binaries = _load_binaries(store, all_hashes, binaries)
    record = store.create_test(spec.tool_id, spec.duration_s, lineage, group_id=group_id) if store else None
    test_id = record.test_id if record else None

    workers = max(1, min(spec.workers, len(trays)))
    if workers == 1:
        per_guest = [_run_guest(spec, t, backend, store, binaries) for t in trays]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_guest = list(pool.map(lambda t: _run_guest(spec, t, backend, store, binaries), trays))

    result = TestRunResult(test_id)
    for tray, (outcomes, schedule) in zip(trays, per_guest):
        for md5 in tray.hashes:
            result.outcomes[md5] = outcomes[md5]
        result.schedule.extend(schedule)

    if store is not None:
        recs, logs = [], {}
        for md5 in all_hashes:
            out = result.outcomes[md5]
            if out.executed_ok:
                events = parse_log_outcome(spec.tool_id, out.log, md5, strict=strict_logs).events
                recs.append(ObservationRecord(test_id, md5, type_counts(events), True, store.log_ref(test_id, md5)))
                logs[md5] = out.log
            else:
                recs.append(ObservationRecord(test_id, md5, executed_ok=False, log_ref=None))
        store.record_observations(recs, logs)
    ok = sum(o.executed_ok for o in result.outcomes.values())
    log.info("test %s (%s, %ss): %d/%d binaries produced logs", test_id, spec.tool_id, spec.duration_s, ok, len(all_hashes))
    return result


def run_seed_for(spec: TestRunSpec, run_index: int) -> int:
    return seed_from("run", spec.seed, spec.tool_id, spec.duration_s, run_index)


def run_group(
    spec: TestRunSpec,
    sample_hashes: list[str],
    backend: GuestBackend,
    store: ArtefactStore,
    lineage: int | None = None,
) -> TestRunGroup:
    """Run the same trays ``spec.runs_per_group`` times (three by default).

    With no ``lineage`` the first run is a fresh random selection and later runs
    reference it; otherwise every run references the given earlier test.
    """
    if not sample_hashes:
        raise ValueError("a test run group needs at least one binary")
    trays = partition_in_trays(list(sample_hashes), spec.guest_count)
    binaries = _load_binaries(store, sample_hashes, None)
    group_id = store.create_group(spec.tool_id, spec.duration_s, asdict(spec), list(sample_hashes))
    run_ids: list[int] = []
    for i in range(spec.runs_per_group):
        run_lineage: str | int
        if lineage is not None:
            run_lineage = lineage
        else:
            run_lineage = run_ids[0] if run_ids else RANDOM_LINEAGE
        result = run_test(spec, trays, backend.for_run(run_seed_for(spec, i)), store, run_lineage, group_id, binaries)
        run_ids.append(result.test_id)
    store.set_group_runs(group_id, run_ids)
    return TestRunGroup(group_id, spec, tuple(run_ids), tuple(sample_hashes))


def load_group(store: ArtefactStore, group_id: int) -> TestRunGroup:
    g = store.get_group(group_id)
    if g is None:
        raise MatefError(f"unknown test run group {group_id}")
    return TestRunGroup(g["group_id"], TestRunSpec(**g["spec"]), tuple(g["run_ids"]), tuple(g["hashes"]))
