"""Segmentation-quality and facial-hair-extent metrics over label masks.

A label mask is a 2-D grid of per-pixel classes: 0 = not facial hair,
1 = facial hair, 2 = five-o'clock shadow.  All operations here are pure;
callers may evaluate mask pairs concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

NOT_FACIAL_HAIR = 0
FACIAL_HAIR = 1
SHADOW = 2

VALID_LABELS = (NOT_FACIAL_HAIR, FACIAL_HAIR, SHADOW)


@dataclass(frozen=True)
class LabelMask:
    """2-D per-pixel label grid, shape (height, width), values in {0, 1, 2}."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2 or arr.size == 0:
            raise DataError(f"mask must be a non-empty 2-D grid, got shape {arr.shape}")
        if not np.isin(arr, VALID_LABELS).all():
            bad = sorted(set(np.unique(arr)) - set(VALID_LABELS))
            raise DataError(f"mask contains invalid label values {bad}; allowed: 0/1/2")
        object.__setattr__(self, "labels", arr.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class IoUReport:
    """Intersection-over-union pixel counts for one class of one mask pair."""

    class_id: int
    intersection: int
    union: int

    @property
    def iou(self) -> float | None:
        """IoU in [0, 1], or None when neither mask contains the class."""
        if self.union == 0:
            return None
        return self.intersection / self.union


@dataclass(frozen=True)
class RatioBucket:
    """Half-open facial-hair-ratio interval; the lower bound may be exclusive."""

    lower: float
    upper: float
    include_lower: bool = True

    def contains(self, ratio: float) -> bool:
        if self.include_lower:
            if ratio < self.lower:
                return False
        elif ratio <= self.lower:
            return False
        return ratio < self.upper

    def label(self) -> str:
        lo = f"≥{self.lower:g}" if self.include_lower else f">{self.lower:g}"
        if math.isinf(self.upper):
            return lo
        return f"{lo} & <{self.upper:g}"


# Default ranges for bucketed IoU reporting: (0, 0.05), [0.05, 0.1), [0.1, 0.15), [0.15, inf)
DEFAULT_BUCKETS = (
    RatioBucket(0.0, 0.05, include_lower=False),
    RatioBucket(0.05, 0.1),
    RatioBucket(0.1, 0.15),
    RatioBucket(0.15, math.inf),
)


@dataclass
class BucketReport:
    """Mean IoU of the mask pairs whose ground-truth ratio falls in one bucket."""

    bucket: RatioBucket
    count: int = 0
    mean_iou: float | None = None
    undefined_count: int = 0  # pairs in bucket whose IoU was undefined (union 0)


@dataclass(frozen=True)
class AgreementReport:
    """Micro-averaged IoU between two aligned annotation lists."""

    class_id: int
    intersection: int
    union: int
    per_pair: tuple[IoUReport, ...] = field(repr=False)

    @property
    def aggregate_iou(self) -> float | None:
        if self.union == 0:
            return None
        return self.intersection / self.union


def iou(pred: LabelMask, gt: LabelMask, class_id: int = FACIAL_HAIR) -> IoUReport:
    """Pixel IoU of one class between a predicted and a ground-truth mask.

    Undefined (union 0) is reported as iou=None, not 0, so that pairs where
    neither annotator marked the class can be excluded from averages.
    """
    if pred.labels.shape != gt.labels.shape:
        raise DataError(
            f"mask shape mismatch: pred {pred.labels.shape} vs gt {gt.labels.shape}"
        )
    a = pred.labels == class_id
    b = gt.labels == class_id
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    return IoUReport(class_id=class_id, intersection=inter, union=union)


def facial_hair_ratio(mask: LabelMask, include_shadow: bool = False) -> float:
    """Fraction of pixels labelled facial hair.

    Shadow pixels (label 2) are excluded by default; pass include_shadow=True
    to count them as facial hair.
    """
    hair = np.count_nonzero(mask.labels == FACIAL_HAIR)
    if include_shadow:
        hair += np.count_nonzero(mask.labels == SHADOW)
    return hair / mask.labels.size


def _check_buckets(buckets) -> None:
    for i, a in enumerate(buckets):
        if a.upper <= a.lower:
            raise ValueError(f"bucket {a.label()!r} is empty or inverted")
        for b in buckets[i + 1:]:
            lo = max(a.lower, b.lower)
            hi = min(a.upper, b.upper)
            if lo < hi:  # open/half-open intervals overlap iff interiors intersect
                raise ValueError(f"buckets {a.label()!r} and {b.label()!r} overlap")


def iou_by_ratio_bucket(
    pairs,
    buckets=DEFAULT_BUCKETS,
    class_id: int = FACIAL_HAIR,
    include_shadow: bool = False,
) -> list[BucketReport]:
    """Unweighted mean IoU per ground-truth-ratio bucket.

    Args:
        pairs: iterable of (pred, gt) LabelMask pairs. Each pair is bucketed by
            the ground-truth mask's facial hair ratio; pairs whose ratio falls
            in no bucket are skipped.
        buckets: disjoint RatioBucket intervals.
        class_id: class whose IoU is averaged.
        include_shadow: forwarded to the ratio computation.

    Pairs with undefined IoU do not contribute to the mean but are counted.
    """
    _check_buckets(buckets)
    sums = [0.0] * len(buckets)
    defined = [0] * len(buckets)
    reports = [BucketReport(bucket=b) for b in buckets]
    for pred, gt in pairs:
        r = facial_hair_ratio(gt, include_shadow=include_shadow)
        for i, b in enumerate(buckets):
            if b.contains(r):
                rep = iou(pred, gt, class_id)
                reports[i].count += 1
                if rep.iou is None:
                    reports[i].undefined_count += 1
                else:
                    sums[i] += rep.iou
                    defined[i] += 1
                break
    for i, rep in enumerate(reports):
        if defined[i]:
            rep.mean_iou = sums[i] / defined[i]
    return reports


def annotator_agreement(gt1, gt2, class_id: int = FACIAL_HAIR) -> AgreementReport:
    """Aggregate (micro-averaged) IoU across two aligned annotation lists.

    Aggregate = sum of intersections / sum of unions over all index-aligned
    pairs, so larger regions dominate; per-pair reports are retained so a
    mean-of-pairs convention can be recomputed by the caller.
    """
    gt1 = list(gt1)
    gt2 = list(gt2)
    if len(gt1) != len(gt2):
        raise DataError(f"annotation list length mismatch: {len(gt1)} vs {len(gt2)}")
    if not gt1:
        raise DataError("annotator agreement over empty lists is undefined")
    per_pair = tuple(iou(a, b, class_id) for a, b in zip(gt1, gt2))
    inter = sum(r.intersection for r in per_pair)
    union = sum(r.union for r in per_pair)
    return AgreementReport(class_id=class_id, intersection=inter, union=union, per_pair=per_pair)


def load_mask(path) -> LabelMask:
    """Load a mask from an 8-bit single-channel PNG or an ASCII (P2) PGM."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"mask file not found: {path}")
    if path.suffix.lower() == ".pgm":
        return _load_pgm(path)
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise DataError(f"{path}: expected single-channel 8-bit mask, got mode {img.mode!r}")
            arr = np.asarray(img)
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"{path}: cannot read mask image: {exc}") from exc
    return _validated(arr, path)


def save_mask(mask: LabelMask, path) -> None:
    """Write a mask as PNG or ASCII PGM depending on the file extension."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        lines = [f"P2\n{mask.width} {mask.height}\n2\n"]
        for row in mask.labels:
            lines.append(" ".join(str(int(v)) for v in row) + "\n")
        path.write_text("".join(lines))
    else:
        Image.fromarray(mask.labels, mode="L").save(path, format="PNG")


def _load_pgm(path: Path) -> LabelMask:
    tokens = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if not tokens or tokens[0] != "P2":
        raise DataError(f"{path}: not an ASCII PGM (expected P2 header)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
        values = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{path}: malformed PGM: {exc}") from exc
    if maxval > 255:
        raise DataError(f"{path}: PGM maxval {maxval} exceeds 8-bit range")
    if values.size != width * height:
        raise DataError(f"{path}: PGM declares {width * height} pixels, found {values.size}")
    return _validated(values.reshape(height, width), path)


def _validated(arr: np.ndarray, path: Path) -> LabelMask:
    try:
        return LabelMask(labels=arr)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc
