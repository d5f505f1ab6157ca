import random

import pytest
from hypothesis import given, strategies as st

from conftest import add_binaries
from matef.artefacts import ALL_TYPES, ArtefactType, TypeCombo, all_combos, zero_counts
from matef.dataset import (
    Dataset,
    DatasetRow,
    build_dataset,
    load_dataset,
    read_dataset,
    repeatability_filter,
    save_dataset,
)
from matef.oracle import OracleReport
from matef.orchestrator import TestRunSpec, run_group
from matef.sandbox import SandboxModel, SimulatedBackend
from matef.store import ObservationRecord

PORT = TypeCombo.parse("PortOnly")


def _rec(md5, port=None, ok=True, test_id=1):
    counts = zero_counts()
    if ok and port is not None:
        counts[ArtefactType.PORT] = port
    return ObservationRecord(test_id, md5, counts, ok)


def _group(*per_run: dict) -> list[dict]:
    return [{m: r for m, r in run.items()} for run in per_run]


def test_filter_examples():
    runs = [
        {"a": _rec("a", 4), "b": _rec("b", 4), "c": _rec("c", 4)},
        {"a": _rec("a", 4), "b": _rec("b", 5), "c": _rec("c", ok=False)},
        {"a": _rec("a", 4), "b": _rec("b", 4), "c": _rec("c", 4)},
    ]
    assert repeatability_filter(runs, PORT) == {"a"}


def test_filter_needs_three_runs():
    with pytest.raises(ValueError):
        repeatability_filter([{}, {}], PORT)


def test_filter_missing_from_a_run():
    runs = [{"a": _rec("a", 1)}, {"a": _rec("a", 1)}, {}]
    assert repeatability_filter(runs, PORT) == set()


def test_filter_combo_versus_all_types():
    def rec(file, port):
        c = zero_counts()
        c[ArtefactType.FILE], c[ArtefactType.PORT] = file, port
        return ObservationRecord(1, "a", c, True)

    runs = [{"a": rec(1, 2)}, {"a": rec(3, 2)}, {"a": rec(1, 2)}]
    assert repeatability_filter(runs, PORT) == {"a"}
    assert repeatability_filter(runs, PORT, all_types=True) == set()


def _brute_force_filter(runs, combo):
    kept = set()
    for md5 in runs[0]:
        ok = True
        totals = []
        for run in runs:
            rec = run.get(md5)
            if rec is None or not rec.executed_ok:
                ok = False
                break
            totals.append(sum(rec.counts[t] for t in ALL_TYPES if t in combo))
        if ok and totals[0] == totals[1] == totals[2]:
            kept.add(md5)
    return kept


def _synthetic_runs(n, seed, fail_p=0.15, vary_p=0.15):
    rng = random.Random(seed)
    runs = [{}, {}, {}]
    for i in range(n):
        md5 = f"{i:032x}"
        base = {t: rng.randrange(6) for t in ALL_TYPES}
        for r in range(3):
            if rng.random() < fail_p:
                runs[r][md5] = ObservationRecord(r, md5, zero_counts(), False)
                continue
            counts = dict(base)
            if rng.random() < vary_p:
                counts[rng.choice(ALL_TYPES)] += 1
            runs[r][md5] = ObservationRecord(r, md5, counts, True)
    return runs


def test_filter_against_brute_force_oracle():
    runs = _synthetic_runs(1000, seed=11)
    for combo in (PORT, TypeCombo.parse("FileOrMutex"), TypeCombo(ALL_TYPES)):
        got = repeatability_filter(runs, combo)
        assert got == _brute_force_filter(runs, combo)
        assert 0 < len(got) < 1000


@given(st.integers(0, 10_000), st.sampled_from(all_combos()))
def test_filter_output_is_subset_of_successful_runs(seed, combo):
    runs = _synthetic_runs(40, seed)
    kept = repeatability_filter(runs, combo)
    ok_everywhere = set.intersection(*({m for m, r in run.items() if r.executed_ok} for run in runs))
    assert kept <= ok_everywhere
    # run order does not matter
    assert repeatability_filter(runs[::-1], combo) == kept
    assert repeatability_filter([runs[1], runs[0], runs[2]], combo) == kept


def _put_oracle(store, md5, counts, source="sim-oracle"):
    sets = {t: frozenset(f"{t.value}{i}" for i in range(counts.get(t, 0))) for t in ALL_TYPES}
    store.put_report(OracleReport(md5, source, sets))


def test_build_dataset_matches_join_oracle(store):
    hashes = add_binaries(store, 120, seed=3)
    model = SandboxModel()
    for h in hashes[:-10]:  # the last ten stay unknown to the oracle
        store.put_report(model.oracle_report(h, "sim-oracle"))
    group = run_group(TestRunSpec("canonical", 300, guest_count=8, seed=5), hashes, SimulatedBackend(model), store)
    combo = TypeCombo.parse("Port+RPort")
    ds = build_dataset(store, group, combo, "sim-oracle", "A.2")

    runs = store.list_group(list(group.run_ids))
    kept = _brute_force_filter(runs, combo)
    expected_rows = []
    unknown = 0
    for md5 in sorted(kept):
        report = store.latest_report(md5, "sim-oracle")
        if report is None:
            unknown += 1
            continue
        exp = sum(len(report.artefacts[t]) for t in combo)
        obs = sum(runs[0][md5].counts[t] for t in combo)
        expected_rows.append(DatasetRow(md5, exp, obs))
    assert ds.rows == expected_rows
    assert ds.dropped_unknown == unknown > 0
    assert ds.dataset_id == "A.2" and ds.tool_id == "canonical" and ds.duration_s == 300
    assert ds.lineage == group.group_id


def test_perfect_tool_gives_zero_error(store):
    hashes = add_binaries(store, 15)
    model = SandboxModel(broken_prob=0, failure_prob=0, variability_prob=0, oracle_recall=1.0, oracle_extra_mean=0.0)
    for h in hashes:
        store.put_report(model.oracle_report(h))
    # long enough for every artefact to emerge
    group = run_group(TestRunSpec("canonical", 1e6, guest_count=3), hashes, SimulatedBackend(model), store)
    ds = build_dataset(store, group, TypeCombo(ALL_TYPES), "sim-oracle")
    assert len(ds.rows) == 15
    assert all(r.error == 0 for r in ds.rows)


def test_all_failed_group_gives_empty_dataset(store, caplog):
    hashes = add_binaries(store, 4)
    model = SandboxModel(broken_prob=1.0)
    group = run_group(TestRunSpec("canonical", 10, guest_count=2), hashes, SimulatedBackend(model), store)
    with caplog.at_level("WARNING"):
        ds = build_dataset(store, group, PORT, "sim-oracle")
    assert ds.rows == []
    assert "empty dataset" in caplog.text


def test_csv_and_store_round_trip(store, tmp_path):
    ds = Dataset("B.3", "tcpvcon", 300, PORT, [DatasetRow("a" * 32, 3, 1), DatasetRow("b" * 32, 0, 0)], lineage=7)
    path = ds.write(tmp_path / "datasets")
    back = read_dataset(path)
    assert (back.dataset_id, back.tool_id, back.duration_s, back.combo, back.rows, back.lineage) == (
        "B.3", "tcpvcon", 300, PORT, ds.rows, 7)
    assert path.read_text().splitlines()[0] == "md5,expected,observed"
    save_dataset(store, ds)
    assert load_dataset(store, "B.3").rows == ds.rows


def test_duplicate_rows_rejected():
    with pytest.raises(ValueError):
        Dataset("X", "t", 10, PORT, [DatasetRow("a", 1, 1), DatasetRow("a", 2, 2)])
