"""Experiment manifest (YAML) loading and validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adapters import configure_adapter, register_adapter
from .artefacts import TypeCombo
from .errors import ConfigError
from .library import NETWORK_TAG
from .sandbox import SandboxModel


@dataclass
class ToolConfig:
    id: str
    adapter: str = "canonical"
    adapter_config: dict = field(default_factory=dict)


@dataclass
class ExperimentManifest:
    name: str
    tools: list[ToolConfig]
    durations_s: list[float]
    sample_tag: str = NETWORK_TAG
    sample_count: int | None = None
    sample_hashes: list[str] | None = None
    seed: int = 0
    runs_per_group: int = 3
    guest_count: int = 60
    stagger_s: float = 10.0
    workers: int = 1
    combo: TypeCombo = field(default_factory=lambda: TypeCombo.parse("PortOnly"))
    oracle_source: str = "sim-oracle"
    backend: str = "simulated"
    model: SandboxModel = field(default_factory=SandboxModel)
    all_types_repeatability: bool = False
    analysis_auto: bool = True
    h1_reference_s: float = 60
    alpha: float = 0.05
    outlier_method: str = "tukey_1_5_iqr"
    zero_method: str = "wilcox"
    continuity: bool = False
    analyses: list[dict] = field(default_factory=list)
    output_dir: Path = Path("matef-out")
    synthetic_count: int = 0
    source_path: Path | None = None
    raw: dict = field(default_factory=dict)

    @property
    def tool_ids(self) -> list[str]:
        return [t.id for t in self.tools]

    def dataset_id(self, tool_id: str, duration_s: float) -> str:
        ti = self.tool_ids.index(tool_id)
        di = [float(d) for d in self.durations_s].index(float(duration_s))
        letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
        return f"{letters[ti]}.{di + 1}"

    def register_adapters(self) -> None:
        for tool in self.tools:
            register_adapter(tool.id, configure_adapter(tool.adapter, tool.adapter_config))


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def parse_manifest(data: dict, base_dir: Path | None = None) -> ExperimentManifest:
    _require(isinstance(data, dict), "manifest must be a mapping")
    base_dir = base_dir or Path.cwd()
    tools_raw = data.get("tools") or []
    _require(isinstance(tools_raw, list) and tools_raw, "manifest needs a non-empty 'tools' list")
    tools = []
    for t in tools_raw:
        if isinstance(t, str):
            t = {"id": t}
        _require(isinstance(t, dict) and "id" in t, f"bad tool entry {t!r}")
        tools.append(ToolConfig(str(t["id"]), t.get("adapter", "canonical"), t.get("adapter_config") or {}))
    _require(len({t.id for t in tools}) == len(tools), "tool ids must be unique")

    durations = [float(d) for d in data.get("durations_s") or []]
    _require(bool(durations), "manifest needs 'durations_s'")
    _require(all(d > 0 for d in durations), "durations must be positive")
    _require(len(set(durations)) == len(durations), "durations must be distinct")

    sample = data.get("sample") or {}
    analysis = data.get("analysis") or {}
    backend = data.get("backend") or {}
    synthetic = data.get("synthetic") or {}
    out = Path(data.get("output_dir", "matef-out"))
    try:
        m = ExperimentManifest(
            name=str(data.get("name", "experiment")),
            tools=tools,
            durations_s=durations,
            sample_tag=sample.get("tag", NETWORK_TAG),
            sample_count=sample.get("count"),
            sample_hashes=sample.get("hashes"),
            seed=int(data.get("seed", 0)),
            runs_per_group=int(data.get("runs_per_group", 3)),
            guest_count=int(data.get("guest_count", 60)),
            stagger_s=float(data.get("stagger_s", 10.0)),
            workers=int(data.get("workers", 1)),
            combo=TypeCombo.parse(str(data.get("combo", "PortOnly"))),
            oracle_source=str(data.get("oracle_source", "sim-oracle")),
            backend=str(backend.get("kind", "simulated")),
            model=SandboxModel.from_dict(backend.get("model")),
            all_types_repeatability=bool(data.get("all_types_repeatability", False)),
            analysis_auto=bool(analysis.get("auto", True)),
            h1_reference_s=float(analysis.get("h1_reference_s", 60)),
            alpha=float(analysis.get("alpha", 0.05)),
            outlier_method=str(analysis.get("outlier_method", "tukey_1_5_iqr")),
            zero_method=str(analysis.get("zero_method", "wilcox")),
            continuity=bool(analysis.get("continuity", False)),
            analyses=list(analysis.get("specs") or []),
            output_dir=out if out.is_absolute() else base_dir / out,
            synthetic_count=int(synthetic.get("count", 0)),
            raw=data,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid manifest: {exc}") from exc
    _require(m.runs_per_group == 3, "a test run group has exactly 3 runs")
    _require(m.guest_count >= 1, "guest_count must be at least 1")
    _require(m.stagger_s >= 0, "stagger_s must be non-negative")
    _require(0 < m.alpha < 1, "alpha must lie in (0, 1)")
    _require(m.backend in ("simulated", "hypervisor"), f"unknown backend {m.backend!r}")
    _require(m.sample_hashes is not None or (m.sample_count or 0) > 0,
             "sample needs either 'hashes' or a positive 'count'")
    for tool in tools:
        try:
            configure_adapter(tool.adapter, tool.adapter_config)
        except Exception as exc:
            raise ConfigError(f"tool {tool.id!r}: {exc}") from exc
    return m


def load_manifest(path: str | Path, seed: int | None = None) -> ExperimentManifest:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"manifest {path} is not valid YAML: {exc}") from exc
    if seed is not None:
        data["seed"] = seed
    m = parse_manifest(data, path.parent)
    m.source_path = path
    return m
