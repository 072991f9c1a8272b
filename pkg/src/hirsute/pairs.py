"""Ratio classes, pair enumeration and symmetric pair categories.

Images are classed by facial hair ratio: ``cl`` (clean-shaven), ``fh_S``
(small), ``fh_L1`` (large) partition [0, 1]; ``fh_L2`` (larger) overlaps
``fh_L1`` by design. A pair of images gets every category its two class
sets support, symmetrically: (0.0005, 0.2) matches both cl_vs_fh_L1 and
cl_vs_fh_L2.

Boundary convention: lower bounds inclusive, upper bounds exclusive
(r = 0.1 is fh_L1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .dataset import Dataset, ImageRecord
from .errors import DataError

CLASS_NAMES = ("cl", "fh_S", "fh_L1", "fh_L2")
_CLASS_RANK = {name: i for i, name in enumerate(CLASS_NAMES)}


@dataclass(frozen=True)
class RatioClassScheme:
    """Ratio thresholds defining the classes.

    cl: r < cl_max; fh_S: cl_max <= r < fh_s_max; fh_L1: r >= fh_s_max;
    fh_L2: r >= fh_l2_min (a sub-class of fh_L1).
    """

    cl_max: float = 0.001
    fh_s_max: float = 0.1
    fh_l2_min: float = 0.15

    def __post_init__(self):
        if not 0.0 < self.cl_max < self.fh_s_max <= self.fh_l2_min:
            raise ValueError(
                f"invalid scheme thresholds: need 0 < cl_max < fh_s_max <= fh_l2_min, "
                f"got {self.cl_max}, {self.fh_s_max}, {self.fh_l2_min}"
            )


DEFAULT_SCHEME = RatioClassScheme()


def classify(r: float, scheme: RatioClassScheme = DEFAULT_SCHEME) -> frozenset[str]:
    """All class names matching ratio r: one of {cl, fh_S, fh_L1} plus maybe fh_L2."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"ratio {r} outside [0, 1]")
    if r < scheme.cl_max:
        return frozenset({"cl"})
    if r < scheme.fh_s_max:
        return frozenset({"fh_S"})
    if r >= scheme.fh_l2_min:
        return frozenset({"fh_L1", "fh_L2"})
    return frozenset({"fh_L1"})


def class_membership(ratios: np.ndarray, scheme: RatioClassScheme = DEFAULT_SCHEME) -> dict[str, np.ndarray]:
    """Vectorized classify: boolean membership array per class name."""
    r = np.asarray(ratios, dtype=np.float64)
    if r.size and (r.min() < 0.0 or r.max() > 1.0):
        raise ValueError("ratios outside [0, 1]")
    return {
        "cl": r < scheme.cl_max,
        "fh_S": (r >= scheme.cl_max) & (r < scheme.fh_s_max),
        "fh_L1": r >= scheme.fh_s_max,
        "fh_L2": r >= scheme.fh_l2_min,
    }


@dataclass(frozen=True)
class PairCategory:
    """Symmetric category of an image pair, e.g. cl_vs_fh_L1.

    The two class names are stored in canonical order (cl, fh_S, fh_L1,
    fh_L2), so category(a, b) == category(b, a).
    """

    left: str
    right: str

    def __post_init__(self):
        for name in (self.left, self.right):
            if name not in _CLASS_RANK:
                raise ValueError(f"unknown ratio class {name!r}; known: {CLASS_NAMES}")
        if _CLASS_RANK[self.left] > _CLASS_RANK[self.right]:
            lo, hi = self.right, self.left
            object.__setattr__(self, "left", lo)
            object.__setattr__(self, "right", hi)

    @classmethod
    def of(cls, a: str, b: str) -> "PairCategory":
        return cls(left=a, right=b)

    @classmethod
    def parse(cls, name: str) -> "PairCategory":
        parts = name.split("_vs_")
        if len(parts) != 2:
            raise ValueError(f"cannot parse pair category {name!r}; expected '<class>_vs_<class>'")
        return cls(left=parts[0], right=parts[1])

    @property
    def name(self) -> str:
        return f"{self.left}_vs_{self.right}"

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class PairSpec:
    """Which pairs to consider: kind, optional demographic scope, optional category."""

    kind: str  # "genuine" or "impostor"
    scope: str | None = None
    category: PairCategory | None = None

    def __post_init__(self):
        if self.kind not in ("genuine", "impostor"):
            raise ValueError(f"kind must be 'genuine' or 'impostor', got {self.kind!r}")


def categorize_pair(
    ra: float,
    rb: float,
    target: PairCategory,
    scheme: RatioClassScheme = DEFAULT_SCHEME,
) -> bool:
    """True iff the two ratios' class sets admit the target category (symmetric)."""
    ca = classify(ra, scheme)
    cb = classify(rb, scheme)
    return (target.left in ca and target.right in cb) or (
        target.left in cb and target.right in ca
    )


def scoped_records(ds: Dataset, scope: str | None) -> list[ImageRecord]:
    """Records in scope, ordered by image_id (the canonical pair-stream order)."""
    recs = [r for r in ds.records if scope is None or r.demographic == scope]
    recs.sort(key=lambda r: r.image_id)
    return recs


def enumerate_pairs(
    ds: Dataset,
    spec: PairSpec,
    scheme: RatioClassScheme = DEFAULT_SCHEME,
) -> Iterator[tuple[ImageRecord, ImageRecord]]:
    """Yield each unordered in-scope pair exactly once, sorted by image_id pair.

    Genuine pairs share a subject (distinct images); impostor pairs have
    distinct subjects. Pairs are streamed, never materialized. When the spec
    carries a category filter, both records must already have ratios.
    """
    recs = scoped_records(ds, spec.scope)
    genuine = spec.kind == "genuine"
    for i, a in enumerate(recs):
        for b in recs[i + 1:]:
            if (a.subject_id == b.subject_id) != genuine:
                continue
            if spec.category is not None:
                if a.facial_hair_ratio is None or b.facial_hair_ratio is None:
                    raise DataError(
                        f"pair ({a.image_id}, {b.image_id}) lacks ratios; "
                        "attach ratios before category filtering"
                    )
                if not categorize_pair(a.facial_hair_ratio, b.facial_hair_ratio, spec.category, scheme):
                    continue
            yield a, b
