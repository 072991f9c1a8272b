"""Repeated subject-disjoint split experiment: global vs adaptive thresholds.

For each split, subjects are shuffled and halved into validation and test.
A global threshold is calibrated on all validation impostor scores, and one
adaptive threshold per pair group on that group's validation impostors, all
at the same target FMR. Both threshold sets are then evaluated on the
disjoint test half. Pairs outside every calibrated group fall back to the
global threshold in adaptive mode.

Splits where any group's test FMR is zero are excluded from the inequity
ratio aggregate only (their per-group FMRs still count toward the means).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, EmbeddingStore, select_demographic, select_subjects
from .errors import CalibrationError, DataError
from .metrics import (
    InequityResult,
    ThresholdTable,
    fmr_at,
    fnmr_at,
    inequity_ratio,
    matches_at,
    threshold_for_fmr,
)
from .pairs import DEFAULT_SCHEME, PairCategory, RatioClassScheme
from .scoring import DEFAULT_BLOCK_SIZE, HISTOGRAM_BINS, score_cells

log = logging.getLogger(__name__)

DEFAULT_GROUPS = (
    PairCategory.parse("cl_vs_cl"),
    PairCategory.parse("cl_vs_fh_L1"),
    PairCategory.parse("fh_L2_vs_fh_L2"),
)

# Group FMR under a *global* threshold can far exceed the target (that
# disparity is the point), so the exact tail must reach well past
# 10x target; 50x keeps rate queries exact at negligible memory cost.
PROTOCOL_TAIL_FACTOR = 50.0


@dataclass(frozen=True)
class SplitPlan:
    """Seeded plan for n repeated validation/test subject splits."""

    seed: int = 0
    n_splits: int = 5

    def __post_init__(self):
        if self.n_splits < 1:
            raise ValueError("n_splits must be >= 1")


def _classes_overlap(a: str, b: str) -> bool:
    return a == b or {a, b} == {"fh_L1", "fh_L2"}


def _groups_disjoint(groups) -> bool:
    """Whether no image pair can belong to two of the given categories."""
    for i, x in enumerate(groups):
        for y in groups[i + 1:]:
            straight = _classes_overlap(x.left, y.left) and _classes_overlap(x.right, y.right)
            crossed = _classes_overlap(x.left, y.right) and _classes_overlap(x.right, y.left)
            if straight or crossed:
                return False
    return True


def split_subjects(subjects, seed: int, index: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Deterministically shuffle subjects and halve them (validation, test).

    Validation receives the extra subject on odd counts. Reproducible
    byte-for-byte for a given (seed, index).
    """
    subjects = sorted(subjects)
    if len(subjects) < 2:
        raise ValueError(f"need at least 2 subjects to split, got {len(subjects)}")
    rng = np.random.default_rng([seed, index])
    perm = rng.permutation(len(subjects))
    n_val = (len(subjects) + 1) // 2
    val = tuple(sorted(subjects[i] for i in perm[:n_val]))
    test = tuple(sorted(subjects[i] for i in perm[n_val:]))
    return val, test


@dataclass
class GroupSplitResult:
    """One pair group's outcome in one split."""

    threshold: float            # adaptive threshold calibrated on validation
    val_count: int
    count: int                  # test impostor pairs
    fmr_global: float | None
    fmr_adaptive: float | None


@dataclass
class SplitResult:
    """All outcomes of one validation/test split."""

    index: int
    n_val_subjects: int
    n_test_subjects: int
    thresholds: ThresholdTable
    groups: dict[str, GroupSplitResult]
    overall_count: int
    overall_fmr_global: float | None
    overall_fmr_adaptive: float | None
    genuine_count: int
    fnmr_global: float | None
    fnmr_estimated: bool
    ratio_global: InequityResult = field(repr=False, default=None)
    ratio_adaptive: InequityResult = field(repr=False, default=None)


@dataclass
class ModeAggregate:
    """Across-split mean/std of per-group FMRs and of the inequity ratio."""

    fmr_mean: dict[str, float | None]
    fmr_std: dict[str, float | None]
    fmr_splits_used: dict[str, int]
    ratio_mean: float | None
    ratio_std: float | None
    ratio_splits_used: tuple[int, ...]
    ratio_splits_excluded: tuple[int, ...]


@dataclass
class ProtocolResult:
    """Per-split detail plus per-mode aggregates for one demographic scope."""

    scope: str | None
    target_fmr: float
    seed: int
    group_names: tuple[str, ...]
    splits: list[SplitResult]
    aggregates: dict[str, ModeAggregate]

    def to_json_dict(self) -> dict:
        def ratio_dict(r: InequityResult) -> dict:
            return {
                "ratio": r.ratio,
                "included": {k: v for k, v in sorted(r.included.items())},
                "excluded_zero_fmr": list(r.excluded_zero_fmr),
                "excluded_undefined": list(r.excluded_undefined),
            }

        return {
            "scope": self.scope,
            "target_fmr": self.target_fmr,
            "seed": self.seed,
            "groups": list(self.group_names),
            "splits": [
                {
                    "index": s.index,
                    "n_val_subjects": s.n_val_subjects,
                    "n_test_subjects": s.n_test_subjects,
                    "threshold": s.thresholds.global_threshold,
                    "per_category_thresholds": dict(sorted(s.thresholds.per_category.items())),
                    "groups": {
                        name: {
                            "threshold": g.threshold,
                            "val_count": g.val_count,
                            "count": g.count,
                            "fmr_global": g.fmr_global,
                            "fmr_adaptive": g.fmr_adaptive,
                        }
                        for name, g in sorted(s.groups.items())
                    },
                    "overall": {
                        "count": s.overall_count,
                        "fmr_global": s.overall_fmr_global,
                        "fmr_adaptive": s.overall_fmr_adaptive,
                    },
                    "genuine": {
                        "count": s.genuine_count,
                        "fnmr": s.fnmr_global,
                        "fnmr_estimated": s.fnmr_estimated,
                    },
                    "ratio_global": ratio_dict(s.ratio_global),
                    "ratio_adaptive": ratio_dict(s.ratio_adaptive),
                }
                for s in self.splits
            ],
            "aggregates": {
                mode: {
                    "fmr_mean": {k: v for k, v in sorted(agg.fmr_mean.items())},
                    "fmr_std": {k: v for k, v in sorted(agg.fmr_std.items())},
                    "fmr_splits_used": {k: v for k, v in sorted(agg.fmr_splits_used.items())},
                    "ratio_mean": agg.ratio_mean,
                    "ratio_std": agg.ratio_std,
                    "ratio_splits_used": list(agg.ratio_splits_used),
                    "excluded_zero_fmr": list(agg.ratio_splits_excluded),
                }
                for mode, agg in sorted(self.aggregates.items())
            },
        }


def run_protocol(
    ds: Dataset,
    store: EmbeddingStore,
    plan: SplitPlan,
    scope: str | None = None,
    target_fmr: float = 1e-4,
    groups=DEFAULT_GROUPS,
    scheme: RatioClassScheme = DEFAULT_SCHEME,
    tail_frac: float | None = None,
    bins: int = HISTOGRAM_BINS,
    block_size: int = DEFAULT_BLOCK_SIZE,
    workers: int = 1,
) -> ProtocolResult:
    """Run the full repeated-split calibration/evaluation experiment.

    Args:
        ds: dataset with ratios attached.
        store: matching embedding store.
        plan: seed and number of splits.
        scope: demographic tag to restrict to (None = whole dataset).
        target_fmr: FMR target each threshold is calibrated to.
        groups: pair categories receiving adaptive thresholds.
        tail_frac: exact-tail fraction per cell; defaults to
            PROTOCOL_TAIL_FACTOR * target_fmr.
        workers: scoring parallelism (must not change any result).

    Raises CalibrationError when a validation group has no impostor pairs.
    """
    if not 0.0 < target_fmr < 1.0:
        raise ValueError(f"target_fmr must be in (0, 1), got {target_fmr}")
    if tail_frac is None:
        tail_frac = min(PROTOCOL_TAIL_FACTOR * target_fmr, 1.0)
    groups = tuple(groups)
    ds_scope = select_demographic(ds, scope) if scope is not None else ds
    if not ds_scope.records:
        raise DataError(f"no records in scope {scope!r}")
    subjects = sorted(ds_scope.subjects)
    categories = [None, *groups]

    splits = []
    for index in range(plan.n_splits):
        val_subjects, test_subjects = split_subjects(subjects, plan.seed, index)
        ds_val = select_subjects(ds_scope, val_subjects)
        ds_test = select_subjects(ds_scope, test_subjects)

        val_cells = score_cells(
            ds_val, store, kinds=("impostor",), categories=categories, scope=scope,
            scheme=scheme, tail_frac=tail_frac, bins=bins,
            block_size=block_size, workers=workers,
        )
        val_by_cat = {c.category.name if c.category else None: c.scores for c in val_cells}

        global_threshold = threshold_for_fmr(val_by_cat[None], target_fmr)
        per_category = {}
        for g in groups:
            val_set = val_by_cat[g.name]
            if val_set.count == 0:
                raise CalibrationError(
                    f"cannot calibrate group {g.name!r}: no impostor pairs in "
                    f"validation half of split {index} (scope {scope!r})"
                )
            per_category[g.name] = threshold_for_fmr(val_set, target_fmr)
        thresholds = ThresholdTable(global_threshold=global_threshold, per_category=per_category)

        test_cells = score_cells(
            ds_test, store, kinds=("impostor", "genuine"), categories=categories, scope=scope,
            scheme=scheme, tail_frac=tail_frac, bins=bins,
            block_size=block_size, workers=workers,
        )
        imp_by_cat = {
            c.category.name if c.category else None: c.scores
            for c in test_cells if c.kind == "impostor"
        }
        gen_all = next(c.scores for c in test_cells if c.kind == "genuine" and c.category is None)

        group_results = {}
        for g in groups:
            s = imp_by_cat[g.name]
            group_results[g.name] = GroupSplitResult(
                threshold=per_category[g.name],
                val_count=val_by_cat[g.name].count,
                count=s.count,
                fmr_global=fmr_at(s, global_threshold),
                fmr_adaptive=fmr_at(s, per_category[g.name]),
            )

        all_imp = imp_by_cat[None]
        overall_fmr_global = fmr_at(all_imp, global_threshold)
        overall_fmr_adaptive = None
        if all_imp.count and _groups_disjoint(groups):
            # pairs outside all groups are judged at the global threshold in
            # adaptive mode; the decomposition needs disjoint groups
            in_group_global = sum(matches_at(imp_by_cat[g.name], global_threshold) for g in groups)
            in_group_adaptive = sum(
                matches_at(imp_by_cat[g.name], per_category[g.name]) for g in groups
            )
            rest = matches_at(all_imp, global_threshold) - in_group_global
            overall_fmr_adaptive = (rest + in_group_adaptive) / all_imp.count

        fnmr_estimated = False
        try:
            fnmr_global = fnmr_at(gen_all, global_threshold)
        except DataError:
            fnmr_global = fnmr_at(gen_all, global_threshold, exact=False)
            fnmr_estimated = True

        split = SplitResult(
            index=index,
            n_val_subjects=len(val_subjects),
            n_test_subjects=len(test_subjects),
            thresholds=thresholds,
            groups=group_results,
            overall_count=all_imp.count,
            overall_fmr_global=overall_fmr_global,
            overall_fmr_adaptive=overall_fmr_adaptive,
            genuine_count=gen_all.count,
            fnmr_global=fnmr_global,
            fnmr_estimated=fnmr_estimated,
            ratio_global=inequity_ratio({n: g.fmr_global for n, g in group_results.items()}),
            ratio_adaptive=inequity_ratio({n: g.fmr_adaptive for n, g in group_results.items()}),
        )
        splits.append(split)
        log.info(
            "split %d (scope %s): global ratio %s, adaptive ratio %s",
            index, scope,
            f"{split.ratio_global.ratio:.2f}" if split.ratio_global.ratio else "undefined",
            f"{split.ratio_adaptive.ratio:.2f}" if split.ratio_adaptive.ratio else "undefined",
        )

    group_names = tuple(g.name for g in groups)
    aggregates = {
        "global": _aggregate(splits, group_names, "global"),
        "adaptive": _aggregate(splits, group_names, "adaptive"),
    }
    return ProtocolResult(
        scope=scope,
        target_fmr=target_fmr,
        seed=plan.seed,
        group_names=group_names,
        splits=splits,
        aggregates=aggregates,
    )


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else None
    return mean, std


def _aggregate(splits, group_names, mode: str) -> ModeAggregate:
    fmr_mean = {}
    fmr_std = {}
    used = {}
    for name in group_names:
        vals = []
        for s in splits:
            v = s.groups[name].fmr_global if mode == "global" else s.groups[name].fmr_adaptive
            if v is not None:
                vals.append(v)
        fmr_mean[name], fmr_std[name] = _mean_std(vals)
        used[name] = len(vals)

    ratio_vals = []
    included_idx = []
    excluded_idx = []
    for s in splits:
        r = s.ratio_global if mode == "global" else s.ratio_adaptive
        # a split counts toward the ratio aggregate only if every group had
        # a defined, non-zero FMR
        if r.ratio is not None and not r.excluded_zero_fmr and not r.excluded_undefined:
            ratio_vals.append(r.ratio)
            included_idx.append(s.index)
        else:
            excluded_idx.append(s.index)
    ratio_mean, ratio_std = _mean_std(ratio_vals)
    return ModeAggregate(
        fmr_mean=fmr_mean,
        fmr_std=fmr_std,
        fmr_splits_used=used,
        ratio_mean=ratio_mean,
        ratio_std=ratio_std,
        ratio_splits_used=tuple(included_idx),
        ratio_splits_excluded=tuple(excluded_idx),
    )


def fmr_table_rows(results: list[ProtocolResult]) -> list[list[str]]:
    """Rows for the per-group FMR summary CSV (scope x mode rows).

    FMRs are reported x 10^-4 with 2 decimals; the last columns carry the
    max/min FMR ratio and how many splits it used.
    """
    if not results:
        return []
    group_names = results[0].group_names

    def fe4(v: float | None) -> str:
        return "" if v is None else f"{v * 1e4:.2f}"

    def f2(v: float | None) -> str:
        return "" if v is None else f"{v:.2f}"

    header = ["scope", "mode"]
    for name in group_names:
        header += [f"{name}_fmr_e4_mean", f"{name}_fmr_e4_std"]
    header += ["ratio_mean", "ratio_std", "ratio_splits_used"]
    rows = [header]
    for res in results:
        for mode in ("global", "adaptive"):
            agg = res.aggregates[mode]
            row = [res.scope or "all", mode]
            for name in group_names:
                row += [fe4(agg.fmr_mean.get(name)), fe4(agg.fmr_std.get(name))]
            row += [f2(agg.ratio_mean), f2(agg.ratio_std), str(len(agg.ratio_splits_used))]
            rows.append(row)
    return rows
