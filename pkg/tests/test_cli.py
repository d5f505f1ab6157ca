import csv
import subprocess
import sys

import pytest
import yaml

from matef.cli import main
from matef.store import open_store
from matef.synth import write_corpus
from matef.sandbox import SandboxModel

MODEL = {
    "tools": {
        "sim-a": {"types": ["File", "Mutex", "Registry", "Port", "RPort"], "detect_rate": 0.95},
        "sim-b": {"types": ["Port", "RPort"], "detect_rate": 0.9},
    }
}


def _manifest(tmp_path, **overrides):
    data = {
        "name": "cli-test",
        "seed": 7,
        "store": "store.sqlite",
        "output_dir": "out",
        "sample": {"tag": "network_artefacts", "count": 40},
        "synthetic": {"count": 40},
        "tools": [{"id": "sim-a"}, {"id": "sim-b"}],
        "durations_s": [60, 300, 600, 10],
        "guest_count": 6,
        "combo": "Port+RPort",
        "backend": {"kind": "simulated", "model": MODEL},
    }
    data.update(overrides)
    path = tmp_path / "manifest.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def _prepare(tmp_path, **overrides) -> str:
    m = str(_manifest(tmp_path, **overrides))
    assert main(["synth", str(tmp_path / "corpus"), "--manifest", m]) == 0
    assert main(["ingest", str(tmp_path / "corpus" / "binaries"), "--manifest", m]) == 0
    assert main(["oracle-import", str(tmp_path / "corpus" / "oracle"), "--manifest", m]) == 0
    return m


def test_ingest_counts(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    db = str(tmp_path / "db.sqlite")
    assert main(["ingest", str(empty), "--store", db]) == 0
    assert "ingested 0 new" in capsys.readouterr().out
    files = tmp_path / "bins"
    files.mkdir()
    for i in range(5):
        (files / f"b{i}.bin").write_bytes(b"MZ" + bytes([i]) * 10)
    assert main(["ingest", str(files), "--store", db, "--tag", "network_artefacts"]) == 0
    out = capsys.readouterr().out
    assert "ingested 5 new" in out and "network_artefacts: 5" in out
    assert main(["ingest", str(files), "--store", db]) == 0
    assert "ingested 0 new, 5 duplicates" in capsys.readouterr().out


def test_oracle_import_lax_and_strict(tmp_path, capsys):
    write_corpus(tmp_path / "c", 3, seed=1, model=SandboxModel())
    reports = tmp_path / "c" / "oracle"
    (reports / "zz_broken.xml").write_text("<report md5='abc'><artefacts>")
    db = str(tmp_path / "db.sqlite")
    assert main(["oracle-import", str(reports), "--store", db]) == 0
    out = capsys.readouterr().out
    assert "stored 3 oracle reports" in out and "malformed" in out
    assert main(["oracle-import", str(reports), "--store", db, "--strict"]) == 1
    assert main(["oracle-import", str(tmp_path / "missing"), "--store", db]) == 1


def test_full_chain(tmp_path, capsys):
    m = _prepare(tmp_path)
    assert main(["run", "--manifest", m]) == 0
    with open_store(tmp_path / "store.sqlite", readonly=True) as s:
        groups = s.list_groups()
        tests = s.list_tests()
    assert len(groups) == 8 and len(tests) == 24
    first = tests[0].test_id
    assert tests[0].dataset_lineage == "Random"
    assert all(t.dataset_lineage == first for t in tests[1:])

    assert main(["build-dataset", "--manifest", m]) == 0
    datasets = sorted(p.name for p in (tmp_path / "out" / "datasets").glob("*.csv"))
    assert datasets == [f"{t}.{i}.csv" for t in "AB" for i in range(1, 5)]

    assert main(["analyze", "--manifest", m]) == 0
    reports = tmp_path / "out" / "reports"
    for tool in ("sim-a", "sim-b"):
        rows = list(csv.DictReader(open(reports / f"results_H1_{tool}.csv")))
        assert len(rows) == 3
        plan = list(csv.DictReader(open(reports / f"plan_H1_{tool}.csv")))
        assert [r["Test"] for r in plan] == [r["Test"] for r in rows]
    h2 = list(csv.DictReader(open(reports / "results_H2.csv")))
    assert [r["Test"] for r in h2] == ["3.1", "3.2", "3.3", "3.4"]
    assert list(h2[0]) == ["Test", "Description", "r", "z", "SE", "T", "p", "N", "Result"]
    assert (reports / "normality.csv").exists() and (reports / "results_all.txt").exists()
    assert (tmp_path / "out" / "manifest.yaml").exists()

    capsys.readouterr()
    assert main(["report", "--manifest", m, "--datasets"]) == 0
    out = capsys.readouterr().out
    assert "A.1: sim-a 60s" in out and "3.4" in out


def test_single_tool_single_duration(tmp_path):
    m = _prepare(tmp_path, tools=[{"id": "sim-a"}], durations_s=[60])
    assert main(["run", "--manifest", m]) == 0
    with open_store(tmp_path / "store.sqlite", readonly=True) as s:
        assert len(s.list_groups()) == 1 and len(s.list_tests()) == 3


def test_rerun_same_seed_is_identical(tmp_path):
    outputs = []
    for name in ("one", "two"):
        d = tmp_path / name
        d.mkdir()
        m = _prepare(d, durations_s=[60, 10])
        for cmd in ("run", "build-dataset", "analyze"):
            assert main([cmd, "--manifest", m]) == 0
        files = sorted((d / "out" / "datasets").glob("*")) + sorted((d / "out" / "reports").glob("*"))
        outputs.append({f.name: f.read_bytes() for f in files})
    assert outputs[0] == outputs[1]


def test_seed_override_changes_sample(tmp_path):
    m = _prepare(tmp_path, sample={"tag": "network_artefacts", "count": 10}, durations_s=[10], tools=[{"id": "sim-a"}])
    assert main(["run", "--manifest", m]) == 0
    assert main(["run", "--manifest", m, "--seed", "8"]) == 0
    with open_store(tmp_path / "store.sqlite", readonly=True) as s:
        g1, g2 = s.list_groups()
    assert g1["hashes"] != g2["hashes"]


def test_empty_analysis_list_is_noop(tmp_path, capsys):
    m = _prepare(tmp_path, analysis={"auto": False})
    capsys.readouterr()
    assert main(["analyze", "--manifest", m]) == 0
    assert "no analyses configured" in capsys.readouterr().out
    assert not (tmp_path / "out" / "reports").exists()


def test_custom_analysis_spec(tmp_path):
    m = _prepare(tmp_path, durations_s=[60, 10], analysis={
        "auto": False,
        "specs": [{"hypothesis": "H2", "dataset_a": "A.2", "dataset_b": "B.2", "test": "9.1"}],
    })
    for cmd in ("run", "build-dataset", "analyze"):
        assert main([cmd, "--manifest", m]) == 0
    rows = list(csv.DictReader(open(tmp_path / "out" / "reports" / "results_H2.csv")))
    assert [r["Test"] for r in rows] == ["9.1"]


def test_missing_datasets_exit_5(tmp_path, capsys):
    m = _prepare(tmp_path)
    assert main(["analyze", "--manifest", m]) == 5
    assert "missing datasets" in capsys.readouterr().err


@pytest.mark.parametrize("override", [
    {"tools": []},
    {"durations_s": [60, -1]},
    {"runs_per_group": 2},
    {"combo": "Files"},
    {"tools": [{"id": "x", "adapter": "wireshark"}]},
])
def test_bad_manifest_exit_2(tmp_path, override):
    m = str(_manifest(tmp_path, **override))
    assert main(["run", "--manifest", m]) == 2


def test_unparseable_manifest_exit_2(tmp_path):
    bad = tmp_path / "m.yaml"
    bad.write_text("tools: [unclosed\n")
    assert main(["run", "--manifest", str(bad)]) == 2
    assert main(["run"]) == 2


def test_hypervisor_backend_exit_4(tmp_path, capsys):
    m = _prepare(tmp_path, tools=[{"id": "sim-a"}], durations_s=[10],
                 backend={"kind": "hypervisor"}, sample={"tag": "network_artefacts", "count": 4})
    assert main(["run", "--manifest", m]) == 4
    assert "not supported" in capsys.readouterr().err
    with open_store(tmp_path / "store.sqlite", readonly=True) as s:
        assert s.list_tests() == []


def test_locked_store_exit_3(tmp_path):
    db = tmp_path / "db.sqlite"
    with open_store(db):
        empty = tmp_path / "e"
        empty.mkdir()
        assert main(["ingest", str(empty), "--store", str(db)]) == 3


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "matef", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
