"""Oracle reports and the expected number of artefacts per binary."""

from __future__ import annotations

import csv
import io
import logging
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import TYPE_CHECKING, Mapping

from .artefacts import ALL_TYPES, ArtefactType, TypeCombo
from .errors import OracleError, OracleParseError, UnknownToOracleError

if TYPE_CHECKING:
    from .store import ArtefactStore

log = logging.getLogger(__name__)

_MD5_RE = re.compile(r"^[0-9a-f]{32}$")

# XML element -> (artefact type, attribute carrying the label)
XML_ELEMENTS: dict[str, tuple[ArtefactType, str]] = {
    "file": (ArtefactType.FILE, "name"),
    "mutex": (ArtefactType.MUTEX, "name"),
    "registry": (ArtefactType.REGISTRY, "key"),
    "port": (ArtefactType.PORT, "number"),
    "rport": (ArtefactType.RPORT, "number"),
}


@dataclass(frozen=True)
class OracleReport:
    md5: str
    source_id: str
    artefacts: Mapping[ArtefactType, frozenset[str]]
    received_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc), compare=False)

    def counts(self) -> dict[ArtefactType, int]:
        return {t: len(self.artefacts.get(t, ())) for t in ALL_TYPES}

    def content_key(self) -> tuple:
        return (self.md5, self.source_id, tuple(tuple(sorted(self.artefacts.get(t, ()))) for t in ALL_TYPES))


@dataclass(frozen=True)
class ExpectedArtefacts:
    md5: str
    counts: Mapping[ArtefactType, int]

    def total(self, combo: TypeCombo) -> int:
        return combo.total(self.counts)


def _check_md5(md5: str | None, where: str) -> str:
    if not md5 or not _MD5_RE.match(md5.lower()):
        raise OracleParseError(f"{where}: missing or invalid md5 {md5!r}")
    return md5.lower()


def parse_report_xml(
    document: bytes | str,
    strict: bool = True,
    received_at: datetime | None = None,
) -> OracleReport:
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        line, col = exc.position
        raise OracleParseError(f"malformed oracle report: {exc}", line, col) from exc
    if root.tag != "report":
        raise OracleParseError(f"root element must be <report>, got <{root.tag}>")
    md5 = _check_md5(root.get("md5"), "<report>")
    source = root.get("source") or ""
    if not source:
        raise OracleParseError("<report> has no source attribute")

    sets: dict[ArtefactType, set[str]] = {t: set() for t in ALL_TYPES}
    containers = root.findall("artefacts")
    if len(containers) > 1:
        raise OracleParseError("more than one <artefacts> element")
    for container in containers:
        for el in container:
            spec = XML_ELEMENTS.get(el.tag)
            if spec is None:
                if strict:
                    raise OracleError(f"unknown artefact type tag <{el.tag}> in report for {md5}")
                log.warning("skipping unknown artefact tag <%s> in report for %s", el.tag, md5)
                continue
            atype, attr = spec
            label = el.get(attr)
            if label is None or label == "":
                raise OracleParseError(f"<{el.tag}> without a {attr} attribute in report for {md5}")
            sets[atype].add(label)
    return OracleReport(
        md5=md5,
        source_id=source,
        artefacts={t: frozenset(v) for t, v in sets.items()},
        received_at=received_at or datetime.now(timezone.utc),
    )


def parse_report_csv(
    text: str,
    source_id: str,
    strict: bool = True,
    received_at: datetime | None = None,
) -> list[OracleReport]:
    """CSV alternative with header ``md5,type,label``; one report per distinct md5."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != ["md5", "type", "label"]:
        raise OracleParseError(f"expected CSV header md5,type,label, got {reader.fieldnames}", 1, 0)
    grouped: dict[str, dict[ArtefactType, set[str]]] = {}
    for lineno, row in enumerate(reader, start=2):
        md5 = _check_md5(row["md5"], f"line {lineno}")
        try:
            atype = XML_ELEMENTS[row["type"].strip().lower()][0]
        except KeyError:
            if strict:
                raise OracleError(f"unknown artefact type {row['type']!r} on line {lineno}") from None
            log.warning("skipping unknown artefact type %r on line %d", row["type"], lineno)
            continue
        sets = grouped.setdefault(md5, {t: set() for t in ALL_TYPES})
        if row["label"]:
            sets[atype].add(row["label"])
    stamp = received_at or datetime.now(timezone.utc)
    return [
        OracleReport(md5, source_id, {t: frozenset(v) for t, v in sets.items()}, stamp)
        for md5, sets in grouped.items()
    ]


def report_to_xml(report: OracleReport) -> str:
    root = ET.Element("report", md5=report.md5, source=report.source_id)
    container = ET.SubElement(root, "artefacts")
    for tag, (atype, attr) in XML_ELEMENTS.items():
        for label in sorted(report.artefacts.get(atype, ())):
            ET.SubElement(container, tag, {attr: label})
    return ET.tostring(root, encoding="unicode")


def ingest_report(
    store: "ArtefactStore",
    document: bytes | str,
    strict: bool = True,
    received_at: datetime | None = None,
) -> OracleReport:
    report = parse_report_xml(document, strict=strict, received_at=received_at)
    return store.put_report(report)


def expected_artefacts(store: "ArtefactStore", md5: str, source_id: str | None = None) -> ExpectedArtefacts:
    """Resolve the latest report for ``md5`` from one source into per-type counts."""
    report = store.latest_report(md5, source_id)
    if report is None:
        raise UnknownToOracleError(f"{md5} is unknown to the oracle" + (f" source {source_id!r}" if source_id else ""))
    return ExpectedArtefacts(md5, report.counts())


def expected_count(store: "ArtefactStore", md5: str, combo: TypeCombo, source_id: str | None = None) -> int:
    return expected_artefacts(store, md5, source_id).total(combo)
