"""Verification error rates and fairness measures over score sets.

Decision rule, used consistently everywhere: a pair is a match iff
score >= threshold. FMR is the fraction of impostor scores at or above the
threshold; FNMR the fraction of genuine scores strictly below it.

Rates are computed exactly from the retained score tail whenever the
threshold lies inside the exactly-known range; outside it, callers may
either request a histogram estimate (bin-width-bounded) or get an error
telling them to rescore with a larger tail fraction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import CalibrationError, DataError
from .pairs import PairCategory
from .scoring import KEEP_LARGEST, KEEP_SMALLEST, ScoreCell, ScoreSet

log = logging.getLogger(__name__)


@dataclass
class ThresholdTable:
    """Calibrated decision thresholds: one global plus one per pair category.

    Pairs in a category absent from per_category fall back to the global
    threshold. Thresholds normally lie in [-1, 1]; an unreachable-target
    calibration may sit one ulp above 1, which matches nothing.
    """

    global_threshold: float
    per_category: dict[str, float] = field(default_factory=dict)
    fallback: str = "global"

    def __post_init__(self):
        top = np.nextafter(1.0, np.inf)
        for name, t in [("global", self.global_threshold), *self.per_category.items()]:
            if not -1.0 <= t <= top:
                raise ValueError(f"threshold for {name!r} outside [-1, 1]: {t}")

    def threshold_for(self, category: PairCategory | None) -> float:
        if category is not None and category.name in self.per_category:
            return self.per_category[category.name]
        return self.global_threshold

    def to_json_dict(self) -> dict:
        return {
            "threshold": self.global_threshold,
            "per_category": dict(sorted(self.per_category.items())),
            "fallback": self.fallback,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ThresholdTable":
        return cls(
            global_threshold=data["threshold"],
            per_category=dict(data.get("per_category", {})),
            fallback=data.get("fallback", "global"),
        )


def _count_geq(cell: ScoreSet, t: float) -> int | None:
    """Exact number of scores >= t, or None if the tail cannot tell."""
    if cell.keep != KEEP_LARGEST:
        raise ValueError("count of scores >= t requires a largest-keeping score set")
    tail = cell.tail
    if cell.full_retention:
        return cell.count - int(np.searchsorted(tail, t, side="left"))
    if tail.size and t > tail[0]:  # every score >= t was retained
        return tail.size - int(np.searchsorted(tail, t, side="left"))
    return None


def _count_lt(cell: ScoreSet, t: float) -> int | None:
    """Exact number of scores < t, or None if the tail cannot tell."""
    if cell.keep != KEEP_SMALLEST:
        raise ValueError("count of scores < t requires a smallest-keeping score set")
    tail = cell.tail
    if cell.full_retention:
        return int(np.searchsorted(tail, t, side="left"))
    if tail.size and t <= tail[-1]:  # every score < t was retained
        return int(np.searchsorted(tail, t, side="left"))
    return None


def _hist_count_geq(cell: ScoreSet, t: float) -> float:
    """Histogram estimate of #scores >= t (linear within the straddled bin)."""
    edges = cell.bin_edges()
    b = int(np.clip(np.floor((t + 1.0) * (cell.bins / 2.0)), 0, cell.bins - 1))
    suffix = int(cell.hist[b + 1:].sum())
    width = edges[b + 1] - edges[b]
    frac = min(max((edges[b + 1] - t) / width, 0.0), 1.0)
    return suffix + float(cell.hist[b]) * frac


def matches_at(cell: ScoreSet, t: float) -> int:
    """Exact number of impostor scores matching (>=) threshold t."""
    if cell.count == 0:
        return 0
    if t > cell.max:
        return 0
    if t <= cell.min:
        return cell.count
    n = _count_geq(cell, t)
    if n is None:
        raise DataError(
            f"threshold {t} is below the retained impostor tail; "
            "rescore with a larger tail_frac for an exact match count"
        )
    return n


def fmr_at(cell: ScoreSet, t: float, exact: bool = True) -> float | None:
    """False match rate of an impostor score set at threshold t.

    Returns None (undefined) for an empty cell. With exact=True (default),
    raises if t falls below the exactly-known tail range; with exact=False a
    histogram estimate is returned instead.
    """
    if cell.count == 0:
        return None
    if t > cell.max:
        return 0.0
    if t <= cell.min:
        return 1.0
    n = _count_geq(cell, t)
    if n is not None:
        return n / cell.count
    if exact:
        raise DataError(
            f"threshold {t} is below the retained impostor tail; "
            "rescore with a larger tail_frac for an exact FMR"
        )
    return _hist_count_geq(cell, t) / cell.count


def fnmr_at(cell: ScoreSet, t: float, exact: bool = True) -> float | None:
    """False non-match rate of a genuine score set at threshold t (strict <)."""
    if cell.count == 0:
        return None
    if t <= cell.min:
        return 0.0
    if t > cell.max:
        return 1.0
    n = _count_lt(cell, t)
    if n is not None:
        return n / cell.count
    if exact:
        raise DataError(
            f"threshold {t} is above the retained genuine tail; "
            "rescore with a larger tail_frac for an exact FNMR"
        )
    return (cell.count - _hist_count_geq(cell, t)) / cell.count


def _max_allowed_matches(count: int, target: float) -> int:
    """Largest m with m/count <= target under float division semantics."""
    m = int(count * target)
    while (m + 1) / count <= target:
        m += 1
    while m > 0 and m / count > target:
        m -= 1
    return m


def threshold_for_fmr(cell: ScoreSet, target: float) -> float:
    """Smallest observed score t with fmr_at(cell, t) <= target.

    Ties are resolved by this minimality rule, so raising the result to the
    next lower distinct score violates the target. When even the maximum
    score matches too often, one ulp above the maximum is returned with a
    warning (nothing matches there).
    """
    if not 0.0 < target <= 1.0:
        raise ValueError(f"target FMR must be in (0, 1], got {target}")
    if cell.keep != KEEP_LARGEST:
        raise ValueError("threshold calibration requires an impostor (largest-keeping) score set")
    if cell.count == 0:
        raise CalibrationError("cannot calibrate a threshold on an empty impostor score set")
    if cell.count < 1.0 / target:
        log.warning(
            "calibrating a %g FMR target on only %d impostor scores; "
            "at least %d are recommended", target, cell.count, math.ceil(1.0 / target),
        )
    allowed = _max_allowed_matches(cell.count, target)
    if allowed >= cell.count:  # every score may match: the minimum is the answer
        return float(cell.min)
    tail = cell.tail
    uniq = np.unique(tail)  # ascending distinct values
    n_geq = tail.size - np.searchsorted(tail, uniq, side="left")
    ok = n_geq <= allowed
    if not ok.any():
        t = float(np.nextafter(cell.max, np.inf))
        log.warning(
            "FMR target %g unreachable (max score occurs %d times in %d); "
            "returning %r (matches nothing)", target, int(n_geq[-1]), cell.count, t,
        )
        return t
    i = int(np.argmax(ok))  # first (smallest) distinct value meeting the target
    if i == 0 and not cell.full_retention:
        raise DataError(
            "calibration needs scores below the retained tail; "
            "rescore with a larger tail_frac"
        )
    return float(uniq[i])


@dataclass(frozen=True)
class EERResult:
    """Equal error rate and the threshold where FMR and FNMR cross."""

    rate: float
    threshold: float
    uncertainty: float
    perfect_separation: bool
    method: str  # "exact" or "histogram"


def eer(imp: ScoreSet, gen: ScoreSet) -> EERResult:
    """Threshold minimizing |FMR - FNMR| and the error rate at the crossing.

    When both sets retain every score, the sweep over distinct scores is
    exact. Otherwise rates are evaluated at histogram bin edges (exact at
    edges), with the reported uncertainty bounding what the within-bin
    placement could change.
    """
    if imp.count == 0 or gen.count == 0:
        raise ValueError("EER requires non-empty impostor and genuine score sets")
    if imp.full_retention and gen.full_retention:
        imp_scores = imp.tail
        gen_scores = gen.tail
        candidates = np.unique(np.concatenate([imp_scores, gen_scores]))
        candidates = np.append(candidates, np.nextafter(candidates[-1], np.inf))
        fmr = (imp.count - np.searchsorted(imp_scores, candidates, side="left")) / imp.count
        fnmr = np.searchsorted(gen_scores, candidates, side="left") / gen.count
        diffs = np.abs(fmr - fnmr)
        i = int(np.argmin(diffs))
        rate = (fmr[i] + fnmr[i]) / 2.0
        return EERResult(
            rate=float(rate),
            threshold=float(candidates[i]),
            uncertainty=float(diffs[i] / 2.0),
            perfect_separation=bool(rate == 0.0),
            method="exact",
        )
    if imp.bins != gen.bins:
        raise DataError(f"histogram configuration mismatch: {imp.bins} vs {gen.bins} bins")
    edges = imp.bin_edges()
    # at edge e_j: #imp >= e_j is the suffix sum from bin j; #gen < e_j the prefix sum
    imp_suffix = np.concatenate([np.cumsum(imp.hist[::-1])[::-1], [0]])
    gen_prefix = np.concatenate([[0], np.cumsum(gen.hist)])
    fmr = imp_suffix / imp.count
    fnmr = gen_prefix / gen.count
    diffs = np.abs(fmr - fnmr)
    j = int(np.argmin(diffs))
    rate = (fmr[j] + fnmr[j]) / 2.0
    spread = 0.0
    for b in (j - 1, j):
        if 0 <= b < imp.bins:
            spread = max(spread, (float(imp.hist[b]) / imp.count + float(gen.hist[b]) / gen.count) / 2.0)
    return EERResult(
        rate=float(rate),
        threshold=float(edges[j]),
        uncertainty=float(diffs[j] / 2.0 + spread),
        perfect_separation=bool(rate == 0.0),
        method="histogram",
    )


@dataclass(frozen=True)
class InequityResult:
    """Max/min FMR ratio across groups, with zero/undefined groups excluded."""

    ratio: float | None
    included: dict[str, float]
    excluded_zero_fmr: tuple[str, ...]
    excluded_undefined: tuple[str, ...]


def inequity_ratio(fmrs: Mapping[str, float | None]) -> InequityResult:
    """(max FMR) / (min FMR) over groups with FMR > 0.

    Groups with zero FMR are excluded and flagged (a ratio against zero is
    meaningless); undefined (None) groups likewise. Ratio is None when no
    group has positive FMR.
    """
    defined = {g: v for g, v in fmrs.items() if v is not None}
    if len(defined) < 2:
        raise ValueError(f"inequity ratio needs at least 2 groups with defined FMR, got {len(defined)}")
    included = {g: v for g, v in defined.items() if v > 0.0}
    excluded_zero = tuple(sorted(g for g, v in defined.items() if v == 0.0))
    excluded_undefined = tuple(sorted(g for g in fmrs if fmrs[g] is None))
    ratio = None
    if included:
        ratio = max(included.values()) / min(included.values())
    return InequityResult(
        ratio=ratio,
        included=included,
        excluded_zero_fmr=excluded_zero,
        excluded_undefined=excluded_undefined,
    )


@dataclass(frozen=True)
class CellError:
    """Error rates of one score cell at its applicable threshold."""

    kind: str
    category: str | None
    scope: str | None
    count: int
    threshold: float
    fmr: float | None
    fnmr: float | None
    zero_count: bool


@dataclass(frozen=True)
class ErrorReport:
    """FMR/FNMR per cell under a threshold table, with zero-FMR flags."""

    cells: tuple[CellError, ...]
    excluded_zero_fmr: tuple[str, ...]

    def to_json_dict(self) -> dict:
        return {
            "cells": [
                {
                    "kind": c.kind,
                    "category": c.category,
                    "scope": c.scope,
                    "count": c.count,
                    "threshold": c.threshold,
                    "fmr": c.fmr,
                    "fnmr": c.fnmr,
                    "zero_count": c.zero_count,
                }
                for c in self.cells
            ],
            "excluded_zero_fmr": list(self.excluded_zero_fmr),
        }


def error_report(cells: Sequence[ScoreCell], thresholds: ThresholdTable) -> ErrorReport:
    """Evaluate every cell at its category threshold (global fallback)."""
    out = []
    zero_fmr = []
    for cell in cells:
        t = thresholds.threshold_for(cell.category)
        fmr = fnmr = None
        if cell.kind == "impostor":
            fmr = fmr_at(cell.scores, t)
            if fmr == 0.0:
                zero_fmr.append(cell.category.name if cell.category else "(all)")
        else:
            fnmr = fnmr_at(cell.scores, t)
        out.append(
            CellError(
                kind=cell.kind,
                category=cell.category.name if cell.category else None,
                scope=cell.scope,
                count=cell.scores.count,
                threshold=t,
                fmr=fmr,
                fnmr=fnmr,
                zero_count=cell.scores.count == 0,
            )
        )
    return ErrorReport(cells=tuple(out), excluded_zero_fmr=tuple(zero_fmr))
