import json
from datetime import datetime, timedelta, timezone
from itertools import combinations

import pytest
from hypothesis import given, settings, strategies as st

from matef.artefacts import ALL_TYPES, PRESETS, ArtefactType, TypeCombo, all_combos
from matef.errors import OracleError, OracleParseError, StoreError, UnknownToOracleError
from matef.oracle import (
    OracleReport,
    expected_artefacts,
    expected_count,
    ingest_report,
    parse_report_csv,
    parse_report_xml,
    report_to_xml,
)

MD5 = "0123456789abcdef0123456789abcdef"
T0 = datetime(2022, 1, 1, tzinfo=timezone.utc)


def _xml(body: str, md5: str = MD5, source: str = "anubis") -> str:
    return f'<report md5="{md5}" source="{source}"><artefacts>{body}</artefacts></report>'


def _report(counts: dict[ArtefactType, int], md5: str = MD5, source: str = "anubis") -> OracleReport:
    return OracleReport(md5, source, {t: frozenset(f"{t.value}-{i}" for i in range(counts.get(t, 0))) for t in ALL_TYPES}, T0)


def test_direct_parse():
    r = parse_report_xml(_xml('<file name="a.tmp"/><file name="b.dll"/><port number="80"/>'))
    assert r.artefacts[ArtefactType.FILE] == {"a.tmp", "b.dll"}
    assert r.artefacts[ArtefactType.PORT] == {"80"}
    assert r.counts()[ArtefactType.MUTEX] == 0


def test_empty_artefacts_element():
    r = parse_report_xml(_xml(""))
    assert all(len(r.artefacts[t]) == 0 for t in ALL_TYPES)
    r = parse_report_xml(f'<report md5="{MD5}" source="x"><artefacts/></report>')
    assert r.counts() == {t: 0 for t in ALL_TYPES}


def test_fixture_matches_hand_tally(fixtures_dir):
    tally = json.loads((fixtures_dir / "oracle" / "sample01.tally.json").read_text())
    r = parse_report_xml((fixtures_dir / "oracle" / "sample01.xml").read_bytes())
    assert r.md5 == tally["md5"] and r.source_id == tally["source"]
    assert {t.value: c for t, c in r.counts().items()} == tally["counts"]


def test_malformed_document_reports_position():
    with pytest.raises(OracleParseError) as info:
        parse_report_xml(f'<report md5="{MD5}" source="x">\n<artefacts>\n<file name="a"\n</report>')
    assert info.value.line is not None and info.value.position is not None


def test_unknown_tag_strict_and_lax():
    doc = _xml('<file name="a"/><socket addr="1.2.3.4"/>')
    with pytest.raises(OracleError, match="socket"):
        parse_report_xml(doc)
    r = parse_report_xml(doc, strict=False)
    assert r.counts()[ArtefactType.FILE] == 1


def test_bad_md5_rejected():
    with pytest.raises(OracleParseError):
        parse_report_xml(_xml("", md5="nothex"))


def test_xml_round_trip():
    r = _report({ArtefactType.FILE: 2, ArtefactType.RPORT: 3})
    back = parse_report_xml(report_to_xml(r), received_at=T0)
    assert back == r


def test_csv_alternative():
    text = f"md5,type,label\n{MD5},file,a\n{MD5},file,a\n{MD5},rport,80\n{'f' * 32},mutex,m\n"
    reports = {r.md5: r for r in parse_report_csv(text, "csvsrc")}
    assert reports[MD5].counts()[ArtefactType.FILE] == 1
    assert reports[MD5].counts()[ArtefactType.RPORT] == 1
    assert reports["f" * 32].counts()[ArtefactType.MUTEX] == 1
    with pytest.raises(OracleError):
        parse_report_csv(f"md5,type,label\n{MD5},socket,x\n", "s")
    with pytest.raises(OracleParseError):
        parse_report_csv("hash,kind\n", "s")


def test_expected_count_sum(store):
    store.put_report(_report({ArtefactType.FILE: 3, ArtefactType.MUTEX: 2}))
    assert expected_count(store, MD5, PRESETS["FileOrMutex"]) == 5
    assert expected_count(store, MD5, PRESETS["RegistryOnly"]) == 0


def test_all_zero_counts(store):
    store.put_report(_report({}))
    assert all(expected_count(store, MD5, c) == 0 for c in all_combos())


def test_all_31_combos_against_subset_sum(store):
    counts = {ArtefactType.FILE: 3, ArtefactType.MUTEX: 2, ArtefactType.REGISTRY: 7,
              ArtefactType.PORT: 1, ArtefactType.RPORT: 4}
    store.put_report(_report(counts))
    # brute-force oracle: enumerate subsets by bitmask over the five counts
    values = [3, 2, 7, 1, 4]
    oracle = {}
    for mask in range(1, 32):
        members = frozenset(ALL_TYPES[i] for i in range(5) if mask >> i & 1)
        oracle[members] = sum(values[i] for i in range(5) if mask >> i & 1)
    combos = all_combos()
    assert len(combos) == 31 == len(oracle)
    for combo in combos:
        assert expected_count(store, MD5, combo) == oracle[frozenset(combo)]


def test_unknown_md5(store):
    with pytest.raises(UnknownToOracleError):
        expected_count(store, MD5, PRESETS["PortOnly"])


def test_reingest_is_idempotent(store, fixtures_dir):
    doc = (fixtures_dir / "oracle" / "sample01.xml").read_bytes()
    first = ingest_report(store, doc, received_at=T0)
    before = {c: expected_count(store, first.md5, c) for c in all_combos()}
    ingest_report(store, doc, received_at=T0 + timedelta(days=1))
    assert {c: expected_count(store, first.md5, c) for c in all_combos()} == before
    assert store._conn.execute("SELECT COUNT(*) FROM oracle_reports").fetchone()[0] == 1


def test_latest_report_wins(store):
    old = _report({ArtefactType.FILE: 1})
    new = _report({ArtefactType.FILE: 4})
    store.put_report(OracleReport(new.md5, new.source_id, new.artefacts, T0 + timedelta(hours=1)))
    store.put_report(OracleReport(old.md5, old.source_id, old.artefacts, T0))
    assert expected_count(store, MD5, PRESETS["FileOnly"]) == 4


def test_sources_are_not_merged(store):
    store.put_report(_report({ArtefactType.FILE: 1}, source="anubis"))
    store.put_report(_report({ArtefactType.FILE: 5}, source="cuckoo"))
    assert expected_count(store, MD5, PRESETS["FileOnly"], "anubis") == 1
    assert expected_count(store, MD5, PRESETS["FileOnly"], "cuckoo") == 5
    with pytest.raises(StoreError):
        expected_count(store, MD5, PRESETS["FileOnly"])


counts_st = st.fixed_dictionaries({t: st.integers(0, 20) for t in ALL_TYPES})
combo_st = st.sets(st.sampled_from(ALL_TYPES), min_size=1).map(TypeCombo)


@given(counts_st, combo_st, combo_st)
def test_monotone_and_additive(counts, a, b):
    from matef.oracle import ExpectedArtefacts

    ex = ExpectedArtefacts(MD5, counts)
    union = TypeCombo(a | b)
    assert ex.total(a) <= ex.total(union)
    if not a & b:
        assert ex.total(a) + ex.total(b) == ex.total(union)


def test_type_combo_presets_and_parse():
    assert TypeCombo.parse("FileOrMutex") == {ArtefactType.FILE, ArtefactType.MUTEX}
    assert TypeCombo.parse("port+rport") == {ArtefactType.PORT, ArtefactType.RPORT}
    assert TypeCombo.parse("PortOnly").name == "PortOnly"
    with pytest.raises(ValueError):
        TypeCombo([])
    assert len({frozenset(c) for c in all_combos()}) == 31
    assert all(len(c) >= 1 for c in all_combos())
    assert sum(1 for _ in combinations(ALL_TYPES, 2)) == 10
