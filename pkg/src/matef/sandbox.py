"""Deterministic simulated sandbox used in place of real guest VMs.

Every random choice is drawn from a generator seeded by a SHA-256 of its inputs,
so a (md5, duration, run seed, model) tuple always yields the same log.

Artefact model, per binary:

* base artefacts: per type, a Poisson(mean) number of distinct labels, each with
  an emergence time ~ Exponential(tau). An artefact is produced iff its
  emergence time is within the execution duration, so counts saturate as the
  duration grows and never decrease.
* broken binaries (probability ``broken_prob``, fixed per md5) never execute;
  others fail a given run with probability ``failure_prob``.
* variable binaries (probability ``variability_prob``, fixed per md5) produce
  0..``max_extra`` extra run-specific artefacts in each run.

Tools see a subset of types and detect each artefact with a fixed per-artefact
probability, so tool blind spots are repeatable across runs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .adapters import CanonicalEvent, serialize_events
from .artefacts import ALL_TYPES, ArtefactType
from .errors import BackendError, UnsupportedBackendError
from .oracle import OracleReport


def seed_from(*parts) -> int:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng(seed_from(*parts))


def _uniform(*parts) -> float:
    return seed_from(*parts) / 2.0**64


@dataclass
class ToolProfile:
    types: tuple[str, ...] = tuple(t.value for t in ALL_TYPES)
    detect_rate: float = 1.0


@dataclass
class SandboxModel:
    means: dict[str, float] = field(
        default_factory=lambda: {"File": 6.0, "Mutex": 2.0, "Registry": 8.0, "Port": 3.0, "RPort": 3.0}
    )
    tau_s: dict[str, float] = field(
        default_factory=lambda: {"File": 20.0, "Mutex": 5.0, "Registry": 15.0, "Port": 40.0, "RPort": 60.0}
    )
    broken_prob: float = 0.1
    failure_prob: float = 0.05
    variability_prob: float = 0.1
    max_extra: int = 3
    overhead_s: float = 600.0
    oracle_recall: float = 0.9
    oracle_extra_mean: float = 1.0
    tools: dict[str, ToolProfile] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict | None) -> "SandboxModel":
        data = dict(data or {})
        tools = {k: ToolProfile(**{**v, "types": tuple(v.get("types", ToolProfile().types))})
                 for k, v in data.pop("tools", {}).items()}
        model = cls(**data)
        model.tools = tools
        return model

    def to_dict(self) -> dict:
        return asdict(self)

    # -- ground-truth behaviour -------------------------------------------

    def base_artefacts(self, md5: str) -> list[tuple[ArtefactType, str, float]]:
        rng = _rng("base", md5)
        out = []
        for atype in ALL_TYPES:
            n = int(rng.poisson(self.means.get(atype.value, 0.0)))
            labels = _labels(atype, md5, n, rng)
            times = rng.exponential(self.tau_s.get(atype.value, 1.0), size=len(labels))
            out.extend((atype, label, float(t)) for label, t in zip(labels, times))
        return out

    def extra_artefacts(self, md5: str, run_seed: int) -> list[tuple[ArtefactType, str, float]]:
        if _uniform("variable", md5) >= self.variability_prob:
            return []
        rng = _rng("extra", md5, run_seed)
        k = int(rng.integers(0, self.max_extra + 1))
        out = []
        for i in range(k):
            atype = ALL_TYPES[int(rng.integers(0, len(ALL_TYPES)))]
            t = float(rng.exponential(self.tau_s.get(atype.value, 1.0)))
            out.append((atype, f"run{run_seed:x}-extra{i}", t))
        return out

    def fails(self, md5: str, duration_s: float, run_seed: int) -> bool:
        if _uniform("broken", md5) < self.broken_prob:
            return True
        return _uniform("fail", md5, duration_s, run_seed) < self.failure_prob

    def events(self, md5: str, duration_s: float, run_seed: int) -> list[CanonicalEvent]:
        produced = [
            CanonicalEvent(md5, atype, label, round(t, 6))
            for atype, label, t in self.base_artefacts(md5) + self.extra_artefacts(md5, run_seed)
            if t <= duration_s
        ]
        return sorted(produced, key=lambda e: (e.t_offset_s, e.type.value, e.label))

    def tool_view(self, tool_id: str, events: list[CanonicalEvent]) -> list[CanonicalEvent]:
        profile = self.tools.get(tool_id, ToolProfile())
        visible = set(profile.types)
        return [
            e for e in events
            if e.type.value in visible and _uniform("detect", tool_id, e.md5, e.type.value, e.label) < profile.detect_rate
        ]

    def oracle_report(self, md5: str, source_id: str = "sim-oracle") -> OracleReport:
        sets: dict[ArtefactType, set[str]] = {t: set() for t in ALL_TYPES}
        for atype, label, _ in self.base_artefacts(md5):
            if _uniform("oracle", md5, atype.value, label) < self.oracle_recall:
                sets[atype].add(label)
        rng = _rng("oracle-extra", md5)
        for atype in ALL_TYPES:
            for i in range(int(rng.poisson(self.oracle_extra_mean / len(ALL_TYPES)))):
                sets[atype].add(f"oracle-only-{i}")
        return OracleReport(md5, source_id, {t: frozenset(v) for t, v in sets.items()})


def _labels(atype: ArtefactType, md5: str, n: int, rng: np.random.Generator) -> list[str]:
    tag = md5[:8]
    if atype is ArtefactType.FILE:
        return [f"C:\\Users\\victim\\AppData\\Local\\Temp\\{tag}_{i}.tmp" for i in range(n)]
    if atype is ArtefactType.MUTEX:
        return [f"Global\\{tag}-mtx{i}" for i in range(n)]
    if atype is ArtefactType.REGISTRY:
        return [f"HKCU\\Software\\{tag}\\k{i}" for i in range(n)]
    # Ports: distinct numbers; nominal labels, so only their string form matters.
    ports: list[str] = []
    while len(ports) < n:
        p = str(int(rng.integers(1, 65536)))
        if p not in ports:
            ports.append(p)
    return ports


DEFAULT_MODEL = SandboxModel()


def simulate_execution(md5: str, duration_s: float, run_seed: int, model: SandboxModel = DEFAULT_MODEL) -> bytes:
    """Canonical JSONL event log of everything the binary does within ``duration_s``."""
    return serialize_events(model.events(md5, duration_s, run_seed))


@dataclass(frozen=True)
class ToolPackage:
    tool_id: str


class SimulatedGuest:
    """One guest VM on a virtual clock. Holds no state shared with other guests."""

    def __init__(self, backend: "SimulatedBackend", guest_index: int, start_at: float):
        self.backend = backend
        self.guest_index = guest_index
        self.now = float(start_at)
        self._clean = {"files": {}}
        self.state = {"files": {}}
        self._tool: ToolPackage | None = None
        self._md5: str | None = None
        self._log: bytes | None = None
        self.processed = 0
        self.alive = True

    def _check_fault(self) -> None:
        limit = self.backend.fault_after.get(self.guest_index)
        if limit is not None and self.processed >= limit:
            raise BackendError(f"guest {self.guest_index} stopped responding")

    def revert_to_clean(self) -> None:
        self._check_fault()
        self.state = json.loads(json.dumps(self._clean))
        self._tool = self._md5 = self._log = None

    def copy_in(self, tool_package: ToolPackage, binary: bytes) -> None:
        md5 = hashlib.md5(binary).hexdigest()
        self.state["files"]["tool"] = tool_package.tool_id
        self.state["files"]["sample"] = md5
        self._tool, self._md5 = tool_package, md5

    def execute_for(self, duration_s: float) -> None:
        if self._md5 is None or self._tool is None:
            raise BackendError("execute_for called before copy_in")
        model = self.backend.model
        md5, seed = self._md5, self.backend.run_seed
        self.now += model.overhead_s + duration_s
        self.processed += 1
        if md5 in self.backend.fail_hashes or model.fails(md5, duration_s, seed):
            self._log = None
            return
        events = model.tool_view(self._tool.tool_id, model.events(md5, duration_s, seed))
        self._log = serialize_events(events)

    def collect_log(self) -> bytes | None:
        return self._log

    def shutdown(self) -> None:
        self.alive = False


class SimulatedBackend:
    """Guest fleet backed by :class:`SandboxModel`; safe across distinct guest indices."""

    def __init__(
        self,
        model: SandboxModel | None = None,
        run_seed: int = 0,
        fail_hashes: set[str] | None = None,
        fault_after: dict[int, int] | None = None,
    ):
        self.model = model or SandboxModel()
        self.run_seed = run_seed
        self.fail_hashes = set(fail_hashes or ())
        self.fault_after = dict(fault_after or {})

    def for_run(self, run_seed: int) -> "SimulatedBackend":
        return SimulatedBackend(self.model, run_seed, self.fail_hashes, self.fault_after)

    def provision(self, guest_index: int, start_at: float = 0.0) -> SimulatedGuest:
        return SimulatedGuest(self, guest_index, start_at)


class HypervisorBackend:
    """Placeholder for a real hypervisor driver (snapshot revert, guest copy, timed run)."""

    def __init__(self, **options):
        self.options = options

    def for_run(self, run_seed: int) -> "HypervisorBackend":
        return self

    def provision(self, guest_index: int, start_at: float = 0.0):
        raise UnsupportedBackendError("real hypervisor backends are not supported in this build")
