"""Catch-all internet services for the isolated test network: DNS, HTTP and TCP echo."""

from __future__ import annotations

import http.server
import ipaddress
import json
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .errors import BindError

QTYPE_A = 1
QCLASS_IN = 1
RCODE_OK = 0
RCODE_FORMERR = 1

QTYPE_NAMES = {1: "A", 2: "NS", 5: "CNAME", 6: "SOA", 12: "PTR", 15: "MX", 16: "TXT", 28: "AAAA", 33: "SRV", 255: "ANY"}


@dataclass(frozen=True)
class ServiceConfig:
    dns_answer_ip: str = "10.0.0.1"
    dns_ttl: int = 300
    http_status: int = 200
    http_body: bytes = b"<html><body>OK</body></html>"
    tcp_echo_ports: frozenset[int] = frozenset()
    bind_host: str = "127.0.0.1"
    dns_port: int = 53
    http_port: int = 80

    def __post_init__(self):
        ipaddress.IPv4Address(self.dns_answer_ip)
        if self.dns_ttl < 0:
            raise ValueError("dns_ttl must be non-negative")
        bad = [p for p in self.tcp_echo_ports if not 1 <= p <= 65535]
        if bad:
            raise ValueError(f"tcp echo ports out of range: {sorted(bad)}")


@dataclass(frozen=True)
class InteractionEvent:
    at: datetime
    service: str
    peer: str
    detail: str

    def to_json(self) -> str:
        return json.dumps({"at": self.at.isoformat(), "service": self.service, "peer": self.peer, "detail": self.detail})


class DnsFormatError(ValueError):
    pass


@dataclass
class DnsQuestion:
    name: str
    qtype: int
    qclass: int
    offset: int  # where the name starts in the request, for answer pointers


def _read_name(msg: bytes, pos: int) -> tuple[str, int]:
    labels = []
    end = None
    jumps = 0
    while True:
        if pos >= len(msg):
            raise DnsFormatError("name runs past end of message")
        length = msg[pos]
        if length == 0:
            pos += 1
            break
        if length & 0xC0 == 0xC0:
            if pos + 1 >= len(msg):
                raise DnsFormatError("truncated compression pointer")
            jumps += 1
            if jumps > 16:
                raise DnsFormatError("compression loop")
            if end is None:
                end = pos + 2
            pos = ((length & 0x3F) << 8) | msg[pos + 1]
            continue
        if length & 0xC0:
            raise DnsFormatError("unsupported label type")
        label = msg[pos + 1:pos + 1 + length]
        if len(label) != length:
            raise DnsFormatError("truncated label")
        labels.append(label.decode("ascii", errors="replace"))
        pos += 1 + length
    return ".".join(labels), end if end is not None else pos


def parse_query(msg: bytes) -> tuple[int, int, list[DnsQuestion], int]:
    """Return (id, flags, questions, end of question section)."""
    if len(msg) < 12:
        raise DnsFormatError("message shorter than the DNS header")
    tid, flags, qd, _an, _ns, _ar = struct.unpack("!6H", msg[:12])
    if qd < 1:
        raise DnsFormatError("no question")
    pos = 12
    questions = []
    for _ in range(qd):
        start = pos
        name, pos = _read_name(msg, pos)
        if pos + 4 > len(msg):
            raise DnsFormatError("truncated question")
        qtype, qclass = struct.unpack("!HH", msg[pos:pos + 4])
        pos += 4
        questions.append(DnsQuestion(name, qtype, qclass, start))
    return tid, flags, questions, pos


def _formerr(msg: bytes) -> bytes:
    tid = struct.unpack("!H", msg[:2])[0] if len(msg) >= 2 else 0
    opcode = (msg[2] & 0x78) if len(msg) >= 3 else 0
    return struct.pack("!6H", tid, 0x8000 | (opcode << 8) | RCODE_FORMERR, 0, 0, 0, 0)


def dns_answer(query: bytes, cfg: ServiceConfig) -> bytes:
    """Answer every A/IN question with the configured address; other types get no answers."""
    try:
        tid, flags, questions, qend = parse_query(query)
    except DnsFormatError:
        return _formerr(query)
    opcode = flags & 0x7800
    rd = flags & 0x0100
    resp_flags = 0x8000 | opcode | 0x0400 | rd | 0x0080 | RCODE_OK
    address = ipaddress.IPv4Address(cfg.dns_answer_ip).packed
    answers = b""
    ancount = 0
    for q in questions:
        if q.qtype == QTYPE_A and q.qclass == QCLASS_IN:
            answers += struct.pack("!HHHIH", 0xC000 | q.offset, QTYPE_A, QCLASS_IN, cfg.dns_ttl, 4) + address
            ancount += 1
    header = struct.pack("!6H", tid, resp_flags, len(questions), ancount, 0, 0)
    return header + query[12:qend] + answers


class InteractionLog:
    """Append-only event log; timestamps never go backwards within a service."""

    def __init__(self):
        self._lock = threading.Lock()
        self._events: list[InteractionEvent] = []
        self._last: dict[str, datetime] = {}

    def append(self, service: str, peer: tuple, detail: str) -> InteractionEvent:
        with self._lock:
            now = datetime.now(timezone.utc)
            last = self._last.get(service)
            if last is not None and now < last:
                now = last
            self._last[service] = now
            event = InteractionEvent(now, service, f"{peer[0]}:{peer[1]}", detail)
            self._events.append(event)
            return event

    def events(self, service: str | None = None) -> list[InteractionEvent]:
        with self._lock:
            return [e for e in self._events if service is None or e.service == service]

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events())


class _DnsServer(socketserver.ThreadingUDPServer):
    allow_reuse_address = False
    daemon_threads = True


class _TcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class _HttpServer(http.server.ThreadingHTTPServer):
    allow_reuse_address = True
    daemon_threads = True


def _dns_handler(cfg: ServiceConfig, log: InteractionLog):
    class Handler(socketserver.BaseRequestHandler):
        def handle(self):
            data, sock = self.request
            try:
                _, _, questions, _ = parse_query(data)
            except DnsFormatError:
                questions = []
            for q in questions:
                log.append("dns", self.client_address, f"{q.name} {QTYPE_NAMES.get(q.qtype, str(q.qtype))}")
            sock.sendto(dns_answer(data, cfg), self.client_address)

    return Handler


def _http_handler(cfg: ServiceConfig, log: InteractionLog):
    class Handler(http.server.BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "Apache/2.4.41"
        sys_version = ""

        def _respond(self):
            length = int(self.headers.get("Content-Length") or 0)
            if length:
                self.rfile.read(length)
            log.append("http", self.client_address, self.requestline)
            self.send_response(cfg.http_status)
            self.send_header("Content-Type", "text/html")
            self.send_header("Content-Length", str(len(cfg.http_body)))
            self.end_headers()
            if self.command != "HEAD":
                self.wfile.write(cfg.http_body)

        def __getattr__(self, name):
            if name.startswith("do_"):
                return self._respond
            raise AttributeError(name)

        def log_message(self, format, *args):
            pass

    return Handler


def _echo_handler(port: int, log: InteractionLog):
    class Handler(socketserver.BaseRequestHandler):
        def handle(self):
            total = 0
            while True:
                chunk = self.request.recv(65536)
                if not chunk:
                    break
                self.request.sendall(chunk)
                total += len(chunk)
            log.append("tcp", self.client_address, f"port {port} echoed {total} bytes")

    return Handler


@dataclass
class ServiceHandle:
    config: ServiceConfig
    log: InteractionLog
    addresses: dict[str, tuple[str, int]] = field(default_factory=dict)
    _servers: list = field(default_factory=list)
    _threads: list = field(default_factory=list)

    def stop(self) -> None:
        for server in self._servers:
            server.shutdown()
            server.server_close()
        for t in self._threads:
            t.join(timeout=5)
        self._servers.clear()
        self._threads.clear()

    def __enter__(self) -> "ServiceHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def start_services(cfg: ServiceConfig) -> ServiceHandle:
    """Bind every listener first; if any bind fails, close the rest and raise."""
    log = InteractionLog()
    handle = ServiceHandle(cfg, log)
    plan = [
        ("dns", (cfg.bind_host, cfg.dns_port), _DnsServer, _dns_handler(cfg, log)),
        ("http", (cfg.bind_host, cfg.http_port), _HttpServer, _http_handler(cfg, log)),
    ]
    plan += [
        (f"tcp/{p}", (cfg.bind_host, p), _TcpServer, _echo_handler(p, log)) for p in sorted(cfg.tcp_echo_ports)
    ]
    bound = []
    for name, endpoint, server_cls, handler in plan:
        try:
            server = server_cls(endpoint, handler)
        except OSError as exc:
            for _, s in bound:
                s.server_close()
            raise BindError(name, endpoint, exc) from exc
        bound.append((name, server))
    for name, server in bound:
        handle.addresses[name] = server.server_address[:2]
        t = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True, name=f"netsim-{name}")
        t.start()
        handle._servers.append(server)
        handle._threads.append(t)
    return handle


def interaction_log(handle: ServiceHandle) -> list[InteractionEvent]:
    return handle.log.events()
