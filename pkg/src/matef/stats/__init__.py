from .analysis import AnalysisOutcome, AnalysisSpec, analyse_datasets, h1_plan, h2_plan, result_row, run_analysis
from .normality import NormalityResult, ks_normality, shapiro_wilk
from .wilcoxon import (
    PairedErrors,
    PairedRow,
    WilcoxonResult,
    decide,
    effect_size,
    exact_signed_rank_p,
    join_by_hash,
    remove_outliers,
    wilcoxon_signed_rank,
)

__all__ = [
    "AnalysisOutcome",
    "AnalysisSpec",
    "NormalityResult",
    "PairedErrors",
    "PairedRow",
    "WilcoxonResult",
    "analyse_datasets",
    "decide",
    "effect_size",
    "exact_signed_rank_p",
    "h1_plan",
    "h2_plan",
    "join_by_hash",
    "ks_normality",
    "remove_outliers",
    "result_row",
    "run_analysis",
    "shapiro_wilk",
    "wilcoxon_signed_rank",
]
