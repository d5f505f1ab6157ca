"""Paired absolute errors, outlier fences and the Wilcoxon signed-rank test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..errors import AnalysisError

EXACT_MAX_N = 12
ZERO_METHODS = ("wilcox", "pratt")
OUTLIER_METHODS = ("tukey_1_5_iqr", "none")


@dataclass(frozen=True)
class PairedRow:
    md5: str
    err_a: int
    err_b: int


@dataclass
class PairedErrors:
    rows: list[PairedRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def err_a(self) -> np.ndarray:
        return np.array([r.err_a for r in self.rows], dtype=float)

    @property
    def err_b(self) -> np.ndarray:
        return np.array([r.err_b for r in self.rows], dtype=float)

    @classmethod
    def from_arrays(cls, err_a: Iterable, err_b: Iterable, prefix: str = "row") -> "PairedErrors":
        return cls([PairedRow(f"{prefix}{i}", a, b) for i, (a, b) in enumerate(zip(err_a, err_b))])

    def swapped(self) -> "PairedErrors":
        return PairedErrors([PairedRow(r.md5, r.err_b, r.err_a) for r in self.rows])


def join_by_hash(ds_a, ds_b) -> PairedErrors:
    """Pair the absolute errors of binaries present in both datasets (ds_a order)."""
    b_rows = {r.md5: r for r in ds_b.rows}
    return PairedErrors([
        PairedRow(r.md5, abs(r.expected - r.observed), abs(b_rows[r.md5].expected - b_rows[r.md5].observed))
        for r in ds_a.rows
        if r.md5 in b_rows
    ])


def tukey_fences(values: np.ndarray) -> tuple[float, float]:
    q1, q3 = np.percentile(values, [25, 75])
    iqr = q3 - q1
    return q1 - 1.5 * iqr, q3 + 1.5 * iqr


def remove_outliers(pairs: PairedErrors, method: str = "tukey_1_5_iqr") -> PairedErrors:
    """Drop a pair when either side lies outside that side's Tukey fences."""
    if method == "none" or not pairs.rows:
        return PairedErrors(list(pairs.rows))
    if method != "tukey_1_5_iqr":
        raise ValueError(f"unknown outlier method {method!r}")
    a, b = pairs.err_a, pairs.err_b
    lo_a, hi_a = tukey_fences(a)
    lo_b, hi_b = tukey_fences(b)
    keep = (a >= lo_a) & (a <= hi_a) & (b >= lo_b) & (b <= hi_b)
    return PairedErrors([r for r, k in zip(pairs.rows, keep) if k])


def average_ranks(values: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """1-based ranks with ties sharing their mean rank, plus the tie-group sizes."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=float)
    ties = []
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        if j > i:
            ties.append(j - i + 1)
        i = j + 1
    return ranks, ties


def exact_signed_rank_p(ranks: Sequence[float], t_obs: float) -> float:
    """Exact two-sided p under the sign-flip null, for (possibly tied) ranks.

    Counts sign assignments whose positive-rank sum is at least as far from its
    mean as ``t_obs``. Ranks are doubled to integers so the count is exact.
    """
    doubled = [int(round(2 * r)) for r in ranks]
    n = len(doubled)
    if n == 0:
        return 1.0
    total = sum(doubled)
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    t2 = int(round(2 * t_obs))
    dist = abs(2 * t2 - total)
    sums = np.arange(total + 1)
    extreme = np.abs(2 * sums - total) >= dist
    hits = sum(counts[extreme])
    return min(1.0, hits / 2**n)


@dataclass(frozen=True)
class WilcoxonResult:
    N: int
    n_effective: int
    T: float
    SE: float
    z: float
    p: float
    r: float
    decision: str
    mean_T: float = 0.0
    p_exact: float | None = None
    zero_method: str = "wilcox"
    continuity: bool = False


def effect_size(z: float, N: int) -> float:
    if N < 1:
        raise ValueError("N must be at least 1")
    if z is None or math.isnan(z):
        return math.nan
    return z / math.sqrt(N)


def decide(p: float, alpha: float = 0.05) -> str:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    return "reject" if p < alpha else "retain"


def wilcoxon_signed_rank(
    pairs: PairedErrors,
    alpha: float = 0.05,
    zero_method: str = "wilcox",
    continuity: bool = False,
    exact: bool | None = None,
) -> WilcoxonResult:
    """Related-samples signed-rank test on d = err_a - err_b.

    T is the sum of ranks of positive differences. ``zero_method="wilcox"``
    drops zero differences; ``"pratt"`` ranks them and then discards their
    ranks. When the null variance is zero (no usable differences) z and r are
    NaN and p is 1. The exact p is computed when ``n_effective <= 12`` unless
    ``exact`` says otherwise.
    """
    if zero_method not in ZERO_METHODS:
        raise ValueError(f"zero_method must be one of {ZERO_METHODS}")
    N = len(pairs)
    if N == 0:
        raise AnalysisError("the signed-rank test needs at least one pair")
    d = pairs.err_a - pairs.err_b
    nonzero = d != 0
    n_eff = int(nonzero.sum())

    if zero_method == "wilcox":
        ranks, ties = average_ranks(np.abs(d[nonzero]))
        signs = d[nonzero]
        mean_t = n_eff * (n_eff + 1) / 4.0
        var = n_eff * (n_eff + 1) * (2 * n_eff + 1) / 24.0
    else:
        all_ranks, _ = average_ranks(np.abs(d))
        ranks = all_ranks[nonzero]
        signs = d[nonzero]
        _, ties = average_ranks(ranks)
        n0 = N - n_eff
        mean_t = (N * (N + 1) - n0 * (n0 + 1)) / 4.0
        var = (N * (N + 1) * (2 * N + 1) - n0 * (n0 + 1) * (2 * n0 + 1)) / 24.0
    var -= sum(t**3 - t for t in ties) / 48.0
    T = float(ranks[signs > 0].sum())
    se = math.sqrt(var) if var > 0 else 0.0

    if se > 0:
        diff = T - mean_t
        if continuity:
            diff = math.copysign(max(abs(diff) - 0.5, 0.0), diff)
        z = diff / se
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
        r = effect_size(z, N)
    else:
        z, p, r = math.nan, 1.0, math.nan

    use_exact = n_eff <= EXACT_MAX_N if exact is None else exact
    p_exact = exact_signed_rank_p(ranks.tolist(), T) if use_exact else None
    return WilcoxonResult(
        N=N,
        n_effective=n_eff,
        T=T,
        SE=se,
        z=z,
        p=p,
        r=r,
        decision=decide(p, alpha),
        mean_T=mean_t,
        p_exact=p_exact,
        zero_method=zero_method,
        continuity=continuity,
    )
