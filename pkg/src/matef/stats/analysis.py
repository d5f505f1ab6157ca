"""Hypothesis analyses: pairing plans, the join-filter-test pipeline and result tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, asdict
from itertools import combinations
from typing import TYPE_CHECKING

from ..errors import AnalysisError
from .normality import NormalityResult, ks_normality, shapiro_wilk
from .wilcoxon import OUTLIER_METHODS, WilcoxonResult, join_by_hash, remove_outliers, wilcoxon_signed_rank

if TYPE_CHECKING:
    from ..store import ArtefactStore

RESULT_HEADER = ["Test", "Description", "r", "z", "SE", "T", "p", "N", "Result"]
PLAN_HEADER = ["Test", "Analysis description", "Datasets", "Number rows"]


@dataclass(frozen=True)
class AnalysisSpec:
    hypothesis: str
    dataset_a_id: str
    dataset_b_id: str
    alpha: float = 0.05
    outlier_method: str = "tukey_1_5_iqr"
    test: str = ""
    description: str = ""
    long_description: str = ""
    zero_method: str = "wilcox"
    continuity: bool = False

    def __post_init__(self):
        if self.hypothesis not in ("H1", "H2"):
            raise ValueError(f"hypothesis must be H1 or H2, got {self.hypothesis!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie strictly between 0 and 1")
        if self.outlier_method not in OUTLIER_METHODS:
            raise ValueError(f"outlier_method must be one of {OUTLIER_METHODS}")


@dataclass
class AnalysisOutcome:
    spec: AnalysisSpec
    result: WilcoxonResult
    normality: dict[str, dict[str, NormalityResult | None]]
    provenance: dict = field(default_factory=dict)

    def row(self) -> dict[str, str]:
        return result_row(self.spec, self.result)


def short_duration(seconds: float) -> str:
    seconds = float(seconds)
    if seconds >= 60 and seconds % 60 == 0:
        return f"{int(seconds // 60)}m"
    return f"{seconds:g}s"


def long_duration(seconds: float) -> str:
    seconds = float(seconds)
    if seconds >= 60 and seconds % 60 == 0:
        value, unit = int(seconds // 60), "minute"
    else:
        value, unit = seconds, "second"
    return f"{value:g} {unit}"


def _fmt(value: float, places: int) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "NaN"
    text = f"{value:.{places}f}"
    return "0." + "0" * places if text == "-0." + "0" * places else text


def result_row(spec: AnalysisSpec, res: WilcoxonResult) -> dict[str, str]:
    verdict = "Reject" if res.decision == "reject" else "Retain"
    return {
        "Test": spec.test,
        "Description": spec.description,
        "r": _fmt(res.r, 4),
        "z": _fmt(res.z, 3),
        "SE": _fmt(res.SE, 3),
        "T": _fmt(res.T, 3),
        "p": _fmt(res.p, 3),
        "N": str(res.N),
        "Result": f"{verdict} {spec.hypothesis}",
    }


def _normality(values) -> dict[str, NormalityResult | None]:
    out: dict[str, NormalityResult | None] = {}
    for name, fn in (("kolmogorov_smirnov", ks_normality), ("shapiro_wilk", shapiro_wilk)):
        try:
            out[name] = fn(values)
        except AnalysisError:
            out[name] = None
    return out


def analyse_datasets(spec: AnalysisSpec, ds_a, ds_b) -> AnalysisOutcome:
    joined = join_by_hash(ds_a, ds_b)
    pairs = remove_outliers(joined, spec.outlier_method)
    if not pairs.rows:
        raise AnalysisError(
            f"no paired rows for {spec.dataset_a_id} vs {spec.dataset_b_id}: "
            f"{len(ds_a.rows)} and {len(ds_b.rows)} rows, {len(joined)} shared hashes, "
            f"{len(pairs)} after {spec.outlier_method} outlier removal"
        )
    result = wilcoxon_signed_rank(pairs, spec.alpha, spec.zero_method, spec.continuity)
    provenance = {
        "spec": asdict(spec),
        "rows_a": len(ds_a.rows),
        "rows_b": len(ds_b.rows),
        "joined": len(joined),
        "after_outliers": len(pairs),
        "n_effective": result.n_effective,
        "p_exact": result.p_exact,
    }
    return AnalysisOutcome(
        spec,
        result,
        {"a": _normality(pairs.err_a), "b": _normality(pairs.err_b)},
        provenance,
    )


def run_analysis(spec: AnalysisSpec, store: "ArtefactStore") -> AnalysisOutcome:
    """Join, filter outliers, check normality, test, and persist the result row."""
    from ..dataset import load_dataset

    outcome = analyse_datasets(spec, load_dataset(store, spec.dataset_a_id), load_dataset(store, spec.dataset_b_id))
    if not store.readonly:
        store.save_result(spec.test or f"{spec.dataset_a_id}~{spec.dataset_b_id}", spec.description, outcome.row())
    return outcome


@dataclass(frozen=True)
class DatasetRef:
    dataset_id: str
    tool_id: str
    duration_s: float


def h1_plan(datasets: list[DatasetRef], tools: list[str], reference_s: float = 60, alpha: float = 0.05,
            outlier_method: str = "tukey_1_5_iqr") -> list[AnalysisSpec]:
    """Per tool: the reference duration against every other duration, shortest first."""
    specs = []
    for ti, tool in enumerate(tools):
        mine = {d.duration_s: d for d in datasets if d.tool_id == tool}
        ref = mine.get(float(reference_s))
        if ref is None:
            continue
        others = sorted(d for d in mine if d != float(reference_s))
        for k, dur in enumerate(others, start=1):
            other = mine[dur]
            specs.append(AnalysisSpec(
                hypothesis="H1",
                dataset_a_id=ref.dataset_id,
                dataset_b_id=other.dataset_id,
                alpha=alpha,
                outlier_method=outlier_method,
                test=f"{ti + 1}.{k}",
                description=f"{short_duration(reference_s)} vs {short_duration(dur)}",
                long_description=f"{tool}: comparing {long_duration(reference_s)} to {long_duration(dur)} execution times",
            ))
    return specs


def h2_plan(datasets: list[DatasetRef], tools: list[str], alpha: float = 0.05,
            outlier_method: str = "tukey_1_5_iqr") -> list[AnalysisSpec]:
    """Every tool pair at every shared duration, shortest duration first."""
    by_key = {(d.tool_id, d.duration_s): d for d in datasets}
    durations = sorted({d.duration_s for d in datasets})
    specs = []
    k = 0
    for dur in durations:
        for ta, tb in combinations(tools, 2):
            a, b = by_key.get((ta, dur)), by_key.get((tb, dur))
            if a is None or b is None:
                continue
            k += 1
            specs.append(AnalysisSpec(
                hypothesis="H2",
                dataset_a_id=a.dataset_id,
                dataset_b_id=b.dataset_id,
                alpha=alpha,
                outlier_method=outlier_method,
                test=f"{len(tools) + 1}.{k}",
                description=f"{ta}-{tb} ({short_duration(dur)})",
                long_description=f"{ta} vs {tb}, run for {long_duration(dur)}",
            ))
    return specs


def plan_rows(outcomes: list[AnalysisOutcome]) -> list[dict[str, str]]:
    return [
        {
            "Test": o.spec.test,
            "Analysis description": o.spec.long_description or o.spec.description,
            "Datasets": f"{o.spec.dataset_a_id}, {o.spec.dataset_b_id}",
            "Number rows": str(o.result.N),
        }
        for o in outcomes
    ]


def to_csv(rows: list[dict[str, str]], header: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def to_text(rows: list[dict[str, str]], header: list[str]) -> str:
    widths = [max([len(h)] + [len(r[h]) for r in rows]) for h in header]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(r[h].ljust(w) for h, w in zip(header, widths)).rstrip())
    return "\n".join(lines) + "\n"
