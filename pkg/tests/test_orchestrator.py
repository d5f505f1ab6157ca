import pytest

from conftest import add_binaries
from matef.adapters import parse_canonical, type_counts
from matef.artefacts import ALL_TYPES, TypeCombo
from matef.dataset import repeatability_filter
from matef.errors import UnsupportedBackendError
from matef.library import partition_in_trays
from matef.orchestrator import TestRunSpec, load_group, run_group, run_test
from matef.sandbox import HypervisorBackend, SandboxModel, SimulatedBackend, simulate_execution
from matef.store import RANDOM_LINEAGE
from matef.synth import synthetic_binaries

RELIABLE = SandboxModel(broken_prob=0.0, failure_prob=0.0, variability_prob=0.0)


def test_six_binaries_three_guests(store):
    hashes = add_binaries(store, 6)
    spec = TestRunSpec("canonical", 60, guest_count=3)
    result = run_test(spec, partition_in_trays(hashes, 3), SimulatedBackend(RELIABLE), store)
    assert set(result.outcomes) == set(hashes)
    assert all(o.executed_ok and o.log is not None for o in result.outcomes.values())
    assert len(store.observations(result.test_id)) == 6


def test_failing_binary_is_isolated(store):
    hashes = add_binaries(store, 6)
    spec = TestRunSpec("canonical", 60, guest_count=3)
    trays = partition_in_trays(hashes, 3)
    clean = run_test(spec, trays, SimulatedBackend(RELIABLE), store)
    bad = hashes[2]
    result = run_test(spec, trays, SimulatedBackend(RELIABLE, fail_hashes={bad}), store)
    assert not result.outcomes[bad].executed_ok and result.outcomes[bad].log is None
    for h in hashes:
        if h != bad:
            assert result.outcomes[h] == clean.outcomes[h]
    assert not store.observations(result.test_id)[bad].executed_ok


def test_stagger_schedule_matches_brute_force(store):
    hashes = add_binaries(store, 10)
    spec = TestRunSpec("canonical", 60, guest_count=4, stagger_s=10)
    trays = partition_in_trays(hashes, 4)
    model = SandboxModel(overhead_s=600)
    result = run_test(spec, trays, SimulatedBackend(model), store)
    # oracle: guest g starts at g * stagger; each binary occupies overhead + duration
    expected = []
    for tray in trays:
        clock = tray.guest_index * 10.0
        for h in tray.hashes:
            expected.append((tray.guest_index, h, clock, clock + 660.0))
            clock += 660.0
    got = sorted((e.guest_index, e.md5, e.start_s, e.end_s) for e in result.schedule)
    assert got == sorted(expected)
    assert [min(s for g2, _, s, _ in got if g2 == g) for g in range(4)] == [0.0, 10.0, 20.0, 30.0]


def test_guest_fault_fails_remaining_binaries(store):
    hashes = add_binaries(store, 9)
    trays = partition_in_trays(hashes, 3)
    spec = TestRunSpec("canonical", 10, guest_count=3)
    result = run_test(spec, trays, SimulatedBackend(RELIABLE, fault_after={1: 1}), store)
    faulty = trays[1].hashes
    assert result.outcomes[faulty[0]].executed_ok
    for h in faulty[1:]:
        assert not result.outcomes[h].executed_ok and "fault" in result.outcomes[h].reason
    for t in (trays[0], trays[2]):
        assert all(result.outcomes[h].executed_ok for h in t.hashes)
    assert len(result.outcomes) == 9


def test_group_records_and_lineage(store):
    hashes = add_binaries(store, 6)
    spec = TestRunSpec("canonical", 60, guest_count=3, seed=4)
    group = run_group(spec, hashes, SimulatedBackend(RELIABLE), store)
    assert len(group.run_ids) == 3 and len(set(group.run_ids)) == 3
    assert sum(len(store.observations(t)) for t in group.run_ids) == 18
    tests = [store.get_test(t) for t in group.run_ids]
    assert tests[0].dataset_lineage == RANDOM_LINEAGE
    assert [t.dataset_lineage for t in tests[1:]] == [group.run_ids[0]] * 2
    assert all(t.group_id == group.group_id for t in tests)
    again = run_group(spec, hashes, SimulatedBackend(RELIABLE), store, lineage=group.run_ids[0])
    assert again.group_id != group.group_id
    assert all(store.get_test(t).dataset_lineage == group.run_ids[0] for t in again.run_ids)
    assert load_group(store, group.group_id) == group


def test_group_is_deterministic(tmp_path):
    from matef.store import open_store

    logs = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        with open_store(tmp_path / name) as s:
            hashes = add_binaries(s, 12)
            group = run_group(TestRunSpec("canonical", 300, guest_count=4, seed=9), hashes, SimulatedBackend(), s)
            logs.append([
                (md5, s.get_log(rec.log_ref) if rec.log_ref else None)
                for t in group.run_ids for md5, rec in sorted(s.observations(t).items())
            ])
    assert logs[0] == logs[1]


def test_completeness_with_more_guests_than_binaries(store):
    hashes = add_binaries(store, 5)
    spec = TestRunSpec("canonical", 10, guest_count=8)
    trays = partition_in_trays(hashes, 8)
    result = run_test(spec, trays, SimulatedBackend(), store)
    assert len(result.outcomes) == sum(len(t) for t in trays) == 5


def test_isolation_under_tray_permutation(store):
    hashes = add_binaries(store, 12)
    spec = TestRunSpec("canonical", 60, guest_count=4)
    trays = partition_in_trays(hashes, 4)
    base = run_test(spec, trays, SimulatedBackend(run_seed=3), store)
    # keep guest 0's tray, shuffle everything else between the other guests
    others = [h for t in trays[1:] for h in t.hashes][::-1]
    permuted = [trays[0]] + partition_in_trays(others, 3)
    permuted = [type(t)(i, t.hashes) for i, t in enumerate(permuted)]
    shuffled = run_test(spec, permuted, SimulatedBackend(run_seed=3), store)
    for h in trays[0].hashes:
        assert shuffled.outcomes[h] == base.outcomes[h]


def test_parallel_workers_match_sequential(store):
    hashes = add_binaries(store, 20)
    trays = partition_in_trays(hashes, 5)
    seq = run_test(TestRunSpec("canonical", 60, guest_count=5), trays, SimulatedBackend(run_seed=1), store)
    par = run_test(TestRunSpec("canonical", 60, guest_count=5, workers=4), trays, SimulatedBackend(run_seed=1), store)
    assert seq.outcomes == par.outcomes


def test_simulate_execution_deterministic():
    md5 = "9e107d9d372bb6826bd81d3542a419d6"
    assert simulate_execution(md5, 60, 1) == simulate_execution(md5, 60, 1)


def test_counts_monotone_in_duration():
    import hashlib

    for blob in synthetic_binaries(1000, seed=77):
        md5 = hashlib.md5(blob).hexdigest()
        short = type_counts(parse_canonical(simulate_execution(md5, 10, 5), md5).events)
        long = type_counts(parse_canonical(simulate_execution(md5, 600, 5), md5).events)
        assert all(long[t] >= short[t] for t in ALL_TYPES), md5


def test_degenerate_model_fully_repeatable(store):
    hashes = add_binaries(store, 40)
    group = run_group(TestRunSpec("canonical", 60, guest_count=6), hashes, SimulatedBackend(RELIABLE), store)
    kept = repeatability_filter(store.list_group(list(group.run_ids)), TypeCombo(ALL_TYPES), all_types=True)
    assert kept == set(hashes)


def test_default_model_shows_both_issues(store):
    hashes = add_binaries(store, 300)
    group = run_group(TestRunSpec("canonical", 600, guest_count=10), hashes, SimulatedBackend(), store)
    obs = store.list_group(list(group.run_ids))
    failed = {h for run in obs for h, r in run.items() if not r.executed_ok}
    varied = {
        h for h in hashes
        if h not in failed and len({tuple(run[h].counts.values()) for run in obs}) > 1
    }
    assert failed and varied


def test_spec_validation():
    with pytest.raises(ValueError):
        TestRunSpec("t", 0)
    with pytest.raises(ValueError):
        TestRunSpec("t", 10, stagger_s=-1)
    with pytest.raises(ValueError):
        run_group(TestRunSpec("t", 10), [], SimulatedBackend(), None)


def test_hypervisor_backend_is_unsupported(store):
    hashes = add_binaries(store, 2)
    with pytest.raises(UnsupportedBackendError):
        HypervisorBackend().provision(0)
    with pytest.raises(UnsupportedBackendError):
        run_test(TestRunSpec("canonical", 10, guest_count=1), partition_in_trays(hashes, 1), HypervisorBackend(), store)
