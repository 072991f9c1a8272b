"""Desk-scale synthetic datasets with a controllable facial-hair confound.

Each subject gets a latent unit identity vector; each image embedding is
normalize(identity_spread * identity + within_subject_noise * noise
+ hair_axis_strength * ratio * hair_axis) where hair_axis is one shared
unit direction. With hair_axis_strength > 0, two images with large ratios
are measurably more similar even across subjects, reproducing the
impostor-score shift that motivates per-category thresholds; with 0 the
confound is absent by construction.

Also provides naive all-pairs oracles (double loop, full sort, exact
counts) used as ground truth by the scoring/metrics equivalence tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import maskops
from .dataset import Dataset, EmbeddingStore, ImageRecord, build_dataset
from .errors import DataError
from .pairs import DEFAULT_SCHEME, PairSpec, RatioClassScheme, categorize_pair, scoped_records
from .scoring import cosine

ORACLE_MAX_IMAGES = 10_000


@dataclass(frozen=True)
class GenConfig:
    """Synthetic dataset shape and confound strength.

    Ratios are a mixture of a point mass at 0 (clean_fraction) and a
    right-skewed Beta(ratio_alpha, ratio_beta) scaled to (0, ratio_max].
    """

    n_subjects: int = 2000
    images_per_subject: int = 3
    dim: int = 512
    identity_spread: float = 0.5
    within_subject_noise: float = 0.015
    hair_axis_strength: float = 0.5
    clean_fraction: float = 0.5
    ratio_alpha: float = 2.0
    ratio_beta: float = 2.5
    ratio_max: float = 0.35
    demographic: str = "SYN"
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"embedding dim must be >= 2, got {self.dim}")
        if self.n_subjects < 2:
            raise ValueError(f"need >= 2 subjects, got {self.n_subjects}")
        if self.images_per_subject < 1:
            raise ValueError("images_per_subject must be >= 1")
        if not 0.0 <= self.clean_fraction <= 1.0:
            raise ValueError(f"clean_fraction outside [0, 1]: {self.clean_fraction}")
        if self.identity_spread < 0 or self.within_subject_noise < 0 or self.hair_axis_strength < 0:
            raise ValueError("spread, noise and hair_axis_strength must be >= 0")
        if not 0.0 < self.ratio_max <= 1.0:
            raise ValueError(f"ratio_max outside (0, 1]: {self.ratio_max}")
        if self.identity_spread == 0 and self.within_subject_noise == 0:
            raise ValueError("identity_spread and within_subject_noise cannot both be 0")


def generate(cfg: GenConfig) -> tuple[Dataset, EmbeddingStore]:
    """Generate a dataset and matching unit-normalized embedding store.

    Deterministic given cfg.seed: the same config yields bitwise-identical
    records and vectors.
    """
    rng = np.random.default_rng(cfg.seed)
    hair_axis = rng.standard_normal(cfg.dim)
    hair_axis /= np.linalg.norm(hair_axis)
    latents = rng.standard_normal((cfg.n_subjects, cfg.dim))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)

    n = cfg.n_subjects * cfg.images_per_subject
    subject_of = np.repeat(np.arange(cfg.n_subjects), cfg.images_per_subject)
    clean = rng.random(n) < cfg.clean_fraction
    ratios = np.where(
        clean, 0.0, cfg.ratio_max * rng.beta(cfg.ratio_alpha, cfg.ratio_beta, size=n)
    )
    noise = rng.standard_normal((n, cfg.dim))

    emb = (
        cfg.identity_spread * latents[subject_of]
        + cfg.within_subject_noise * noise
        + cfg.hair_axis_strength * np.outer(ratios, hair_axis)
    )
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if not np.all(norms > 0):
        raise DataError("degenerate configuration produced a zero embedding")
    emb = (emb / norms).astype(np.float32)

    width = len(str(n - 1))
    swidth = len(str(cfg.n_subjects - 1))
    records = [
        ImageRecord(
            image_id=f"img{i:0{width}d}",
            subject_id=f"s{subject_of[i]:0{swidth}d}",
            demographic=cfg.demographic,
            embedding_index=i,
            facial_hair_ratio=float(ratios[i]),
        )
        for i in range(n)
    ]
    return build_dataset(records), EmbeddingStore(vectors=emb)


def ratio_mask(
    ratio: float,
    height: int = 64,
    width: int = 64,
    region_fraction: float = 0.4,
) -> maskops.LabelMask:
    """A mask whose facial-hair ratio equals the request within one pixel.

    Label-1 pixels fill a rectangular lower-face region row-major; the pixel
    count is floor(ratio * height * width). Ratios needing more pixels than
    the region holds are unreachable.
    """
    if height < 8 or width < 8:
        raise ValueError(f"mask dimensions must be >= 8x8, got {height}x{width}")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio outside [0, 1]: {ratio}")
    total = height * width
    pixels = math.floor(ratio * total)
    region_rows = int(round(height * region_fraction))
    if pixels > region_rows * width:
        raise ValueError(
            f"ratio {ratio} unreachable: needs {pixels} pixels but the lower-face "
            f"region holds only {region_rows * width}"
        )
    labels = np.zeros((height, width), dtype=np.uint8)
    start = height - region_rows
    flat = labels[start:].reshape(-1)
    flat[:pixels] = maskops.FACIAL_HAIR
    return maskops.LabelMask(labels=labels)


def masks_for(ds: Dataset, height: int = 64, width: int = 64, region_fraction: float = 0.4):
    """One mask per record, consistent with each record's ratio."""
    out = []
    for rec in ds.records:
        if rec.facial_hair_ratio is None:
            raise DataError(f"record {rec.image_id!r} has no ratio to build a mask from")
        out.append(ratio_mask(rec.facial_hair_ratio, height, width, region_fraction))
    return out


def generate_masks(cfg: GenConfig, height: int = 64, width: int = 64, region_fraction: float = 0.4):
    """Masks matching generate(cfg)'s per-record ratios."""
    ds, _ = generate(cfg)
    return masks_for(ds, height, width, region_fraction)


def oracle_scores(
    ds: Dataset,
    store: EmbeddingStore,
    spec: PairSpec,
    scheme: RatioClassScheme = DEFAULT_SCHEME,
) -> np.ndarray:
    """All pair scores of a spec via a naive double loop (reference path).

    Materializes every score; guarded to <= 10,000 images.
    """
    recs = scoped_records(ds, spec.scope)
    if len(recs) > ORACLE_MAX_IMAGES:
        raise ValueError(f"oracle limited to {ORACLE_MAX_IMAGES} images, got {len(recs)}")
    genuine = spec.kind == "genuine"
    out = []
    for i, a in enumerate(recs):
        va = store.vectors[a.embedding_index]
        for b in recs[i + 1:]:
            if (a.subject_id == b.subject_id) != genuine:
                continue
            if spec.category is not None and not categorize_pair(
                a.facial_hair_ratio, b.facial_hair_ratio, spec.category, scheme
            ):
                continue
            out.append(cosine(va, store.vectors[b.embedding_index]))
    return np.array(out, dtype=np.float64)


@dataclass(frozen=True)
class OracleMetrics:
    """Exact rates from a full sort of all pair scores."""

    kind: str
    count: int
    matches: int          # scores >= threshold
    fmr: float | None     # impostor specs
    fnmr: float | None    # genuine specs


def oracle_metrics(
    ds: Dataset,
    store: EmbeddingStore,
    spec: PairSpec,
    threshold: float,
    scheme: RatioClassScheme = DEFAULT_SCHEME,
) -> OracleMetrics:
    """Exact FMR (impostor spec) or FNMR (genuine spec) at a threshold.

    Rates are None (undefined) when the spec selects no pairs.
    """
    scores = oracle_scores(ds, store, spec, scheme)
    count = scores.size
    matches = int(np.count_nonzero(scores >= threshold))
    fmr = fnmr = None
    if count:
        if spec.kind == "impostor":
            fmr = matches / count
        else:
            fnmr = (count - matches) / count
    return OracleMetrics(kind=spec.kind, count=count, matches=matches, fmr=fmr, fnmr=fnmr)
