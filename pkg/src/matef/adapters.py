"""Tool log adapters: raw tool output -> canonical artefact events -> observed counts.

The canonical JSON Lines format is the reference path. The Process Monitor and
TCPVCon adapters are driven by column/operation mappings that can be overridden
from a YAML adapter config, since neither vendor format is fixed here.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Iterable

from .artefacts import ALL_TYPES, ArtefactType, TypeCombo, zero_counts
from .errors import AdapterError, LogParseError

log = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class CanonicalEvent:
    md5: str
    type: ArtefactType
    label: str
    t_offset_s: float = 0.0

    def __post_init__(self):
        if not self.label:
            raise ValueError("event label must be non-empty")
        if self.t_offset_s < 0:
            raise ValueError("t_offset_s must be non-negative")

    def to_json(self) -> str:
        return json.dumps(
            {"md5": self.md5, "type": self.type.value, "label": self.label, "t_offset_s": self.t_offset_s},
            separators=(",", ":"),
        )


@dataclass
class ParseOutcome:
    events: list[CanonicalEvent]
    unrecognized: int = 0


Parser = Callable[[bytes, str, bool], ParseOutcome]


def serialize_events(events: Iterable[CanonicalEvent]) -> bytes:
    return "".join(e.to_json() + "\n" for e in events).encode()


def _decode(raw: bytes, strict: bool, encoding: str = "utf-8") -> str:
    try:
        return raw.decode(encoding)
    except UnicodeDecodeError as exc:
        if strict:
            raise LogParseError(f"undecodable bytes in log: {exc.reason}", exc.start) from exc
        return raw.decode(encoding, errors="replace")


def parse_canonical(raw: bytes, md5: str, strict: bool = False) -> ParseOutcome:
    text = _decode(raw, strict)
    events, bad = [], 0
    offset = 0
    for line in text.splitlines(keepends=True):
        start, offset = offset, offset + len(line.encode())
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            events.append(
                CanonicalEvent(
                    md5=obj.get("md5") or md5,
                    type=ArtefactType.parse(obj["type"]),
                    label=str(obj["label"]),
                    t_offset_s=float(obj.get("t_offset_s", 0.0)),
                )
            )
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            if strict:
                raise LogParseError(f"unrecognized canonical record: {exc}", start) from exc
            bad += 1
    return ParseOutcome(events, bad)


# Process Monitor CSV export ("Time of Day","Process Name","PID","Operation","Path","Result","Detail").
PROCMON_DEFAULTS = {
    "columns": {"time": "Time of Day", "operation": "Operation", "path": "Path", "result": "Result"},
    "operations": {
        "CreateFile": "File",
        "WriteFile": "File",
        "SetRenameInformationFile": "File",
        "SetDispositionInformationFile": "File",
        "RegCreateKey": "Registry",
        "RegSetValue": "Registry",
        "RegDeleteKey": "Registry",
        "RegDeleteValue": "Registry",
        "CreateMutant": "Mutex",
        "TCP Connect": "Port+RPort",
        "TCP Send": "Port+RPort",
        "TCP Receive": "Port+RPort",
        "TCP Accept": "Port+RPort",
        "UDP Send": "Port+RPort",
        "UDP Receive": "Port+RPort",
    },
    # Rows whose Result is in this list are ignored entirely (operation did not happen).
    "ignore_results": ["NAME NOT FOUND", "PATH NOT FOUND", "ACCESS DENIED"],
}

# TCPVCon CSV (-c): protocol,process,pid,state,local address,remote address
TCPVCON_DEFAULTS = {
    "columns": {"protocol": 0, "process": 1, "pid": 2, "state": 3, "local": 4, "remote": 5},
    "local_type": "Port",
    "remote_type": "RPort",
}

_TIME_FORMATS = ("%I:%M:%S.%f %p", "%H:%M:%S.%f", "%I:%M:%S %p", "%H:%M:%S")


def _parse_time(text: str) -> float | None:
    text = text.strip()
    if "." in text:
        # Procmon prints 7 fractional digits; strptime accepts at most 6.
        head, _, tail = text.partition(".")
        frac, _, rest = tail.partition(" ")
        text = f"{head}.{frac[:6]}" + (f" {rest}" if rest else "")
    for fmt in _TIME_FORMATS:
        try:
            t = datetime.strptime(text, fmt)
        except ValueError:
            continue
        return t.hour * 3600 + t.minute * 60 + t.second + t.microsecond / 1e6
    return None


def _endpoint_port(endpoint: str) -> str | None:
    endpoint = endpoint.strip()
    if ":" not in endpoint:
        return None
    port = endpoint.rsplit(":", 1)[1].strip()
    return port or None


def _split_connection(path: str) -> tuple[str, str] | None:
    """Procmon network paths look like ``host:port -> remote:port``."""
    if "->" not in path:
        return None
    local, remote = (p.strip() for p in path.split("->", 1))
    return local, remote


@dataclass
class ProcmonAdapter:
    config: dict = field(default_factory=lambda: json.loads(json.dumps(PROCMON_DEFAULTS)))

    def __call__(self, raw: bytes, md5: str, strict: bool = False) -> ParseOutcome:
        text = _decode(raw, strict, "utf-8-sig")
        cols = self.config["columns"]
        ops = self.config["operations"]
        ignored = set(self.config.get("ignore_results", ()))
        reader = csv.DictReader(io.StringIO(text))
        if not text.strip():
            return ParseOutcome([])
        missing = [c for c in (cols["operation"], cols["path"]) if c not in (reader.fieldnames or [])]
        if missing:
            raise LogParseError(f"procmon log lacks columns {missing}", 0)
        events, bad = [], 0
        t0 = None
        for lineno, row in enumerate(reader, start=2):
            op = (row.get(cols["operation"]) or "").strip()
            target = ops.get(op)
            if target is None:
                if strict:
                    raise LogParseError(f"unmapped procmon operation {op!r} on line {lineno}")
                bad += 1
                continue
            if (row.get(cols.get("result", "")) or "").strip() in ignored:
                continue
            t = _parse_time(row.get(cols.get("time", ""), "") or "")
            if t is not None and t0 is None:
                t0 = t
            offset = max(0.0, t - t0) if t is not None and t0 is not None else 0.0
            path = (row.get(cols["path"]) or "").strip()
            if target == "Port+RPort":
                conn = _split_connection(path)
                if conn is None:
                    bad += 1
                    continue
                for endpoint, atype in zip(conn, (ArtefactType.PORT, ArtefactType.RPORT)):
                    port = _endpoint_port(endpoint)
                    if port:
                        events.append(CanonicalEvent(md5, atype, port, offset))
                continue
            if not path:
                bad += 1
                continue
            events.append(CanonicalEvent(md5, ArtefactType.parse(target), path, offset))
        return ParseOutcome(events, bad)


@dataclass
class TcpvconAdapter:
    config: dict = field(default_factory=lambda: json.loads(json.dumps(TCPVCON_DEFAULTS)))

    def __call__(self, raw: bytes, md5: str, strict: bool = False) -> ParseOutcome:
        text = _decode(raw, strict)
        cols = self.config["columns"]
        local_t = ArtefactType.parse(self.config["local_type"])
        remote_t = ArtefactType.parse(self.config["remote_type"])
        events, bad = [], 0
        for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
            if not row or not "".join(row).strip():
                continue
            proto = row[cols["protocol"]].strip().strip("[]").upper() if len(row) > cols["protocol"] else ""
            if proto not in ("TCP", "UDP", "TCPV6", "UDPV6") or len(row) <= max(cols["local"], cols["remote"]):
                if strict:
                    raise LogParseError(f"unrecognized tcpvcon record on line {lineno}")
                bad += 1
                continue
            for value, atype in ((row[cols["local"]], local_t), (row[cols["remote"]], remote_t)):
                port = _endpoint_port(value)
                if port and port != "*":
                    events.append(CanonicalEvent(md5, atype, port))
        return ParseOutcome(events, bad)


_REGISTRY: dict[str, Parser] = {}


def register_adapter(tool_id: str, parser: Parser) -> None:
    _REGISTRY[tool_id] = parser


def registered_adapters() -> list[str]:
    return sorted(_REGISTRY)


def get_adapter(tool_id: str) -> Parser:
    try:
        return _REGISTRY[tool_id]
    except KeyError:
        raise AdapterError(
            f"no adapter registered for tool {tool_id!r}; registered: {', '.join(registered_adapters())}"
        ) from None


def configure_adapter(kind: str, overrides: dict | None = None) -> Parser:
    """Build a parser of a known kind, merging config overrides over the shipped defaults."""
    if kind == "canonical":
        return parse_canonical
    base = {"procmon": PROCMON_DEFAULTS, "tcpvcon": TCPVCON_DEFAULTS}.get(kind)
    if base is None:
        raise AdapterError(f"unknown adapter kind {kind!r}")
    config = json.loads(json.dumps(base))
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(config.get(key), dict):
            config[key].update(value)
        else:
            config[key] = value
    return ProcmonAdapter(config) if kind == "procmon" else TcpvconAdapter(config)


register_adapter("canonical", parse_canonical)
register_adapter("procmon", ProcmonAdapter())
register_adapter("tcpvcon", TcpvconAdapter())


def parse_log_outcome(tool_id: str, raw: bytes, md5: str, strict: bool = False) -> ParseOutcome:
    outcome = get_adapter(tool_id)(raw, md5, strict)
    if outcome.unrecognized:
        log.warning("%s log for %s: %d unrecognized records skipped", tool_id, md5, outcome.unrecognized)
    return outcome


def parse_log(tool_id: str, raw: bytes, md5: str, strict: bool = False) -> list[CanonicalEvent]:
    return parse_log_outcome(tool_id, raw, md5, strict).events


def type_counts(events: Iterable[CanonicalEvent]) -> dict[ArtefactType, int]:
    """Distinct labels per artefact type."""
    labels: dict[ArtefactType, set[str]] = {t: set() for t in ALL_TYPES}
    for e in events:
        labels[e.type].add(e.label)
    counts = zero_counts()
    counts.update({t: len(v) for t, v in labels.items()})
    return counts


def observed_count(events: Iterable[CanonicalEvent], combo: TypeCombo) -> int:
    return len({(e.type, e.label) for e in events if e.type in combo})
