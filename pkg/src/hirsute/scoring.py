"""Blocked cosine scoring over pair streams with exact tail retention.

Scores are float32 embeddings accumulated in float64. Every dot product is
evaluated with ``np.einsum(..., optimize=False)``: unlike BLAS matmul, its
per-element result does not depend on the shape of the block it was computed
in, so a blocked evaluation is bitwise-identical to a per-pair evaluation and
to itself under any worker count or block size.

Each (kind, category, scope) cell keeps: exact pair count, a histogram over
[-1, 1], min/max, and an exact tail of extreme scores (largest for impostor
cells, smallest for genuine cells) bounded by a shared capacity. With a
shared capacity, tail merging is exact, so parallel partial cells merge to
the same result as a single pass.
"""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset, EmbeddingStore
from .errors import DataError
from .pairs import (
    DEFAULT_SCHEME,
    PairCategory,
    PairSpec,
    RatioClassScheme,
    class_membership,
    scoped_records,
)

log = logging.getLogger(__name__)

HISTOGRAM_BINS = 100_000
DEFAULT_TAIL_FRAC = 1e-3  # 10x the default 1e-4 FMR target
DEFAULT_BLOCK_SIZE = 256
MIN_TAIL_CAPACITY = 64

CACHE_MAGIC = b"FHSC"
CACHE_VERSION = 1

KEEP_LARGEST = "largest"
KEEP_SMALLEST = "smallest"


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two unit vectors: their dot product, clamped to [-1, 1]."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    s = np.einsum("k,k->", a.astype(np.float64), b.astype(np.float64), optimize=False)
    return float(min(1.0, max(-1.0, s)) + 0.0)  # +0.0 folds -0.0 into 0.0


class ScoreSet:
    """Streaming summary of one similarity-score population.

    Attributes:
        keep: which extreme the tail retains ("largest" or "smallest").
        tail_frac: fraction of scores the queryable tail must cover.
        capacity: fixed retention bound; all mutually mergeable ScoreSets
            share it so tail merging stays exact.
        bins: histogram bin count over [-1, 1].
    """

    __slots__ = ("keep", "tail_frac", "capacity", "bins", "count", "hist", "_tail", "_min", "_max")

    def __init__(
        self,
        keep: str,
        tail_frac: float = DEFAULT_TAIL_FRAC,
        capacity: int = MIN_TAIL_CAPACITY,
        bins: int = HISTOGRAM_BINS,
    ):
        if keep not in (KEEP_LARGEST, KEEP_SMALLEST):
            raise ValueError(f"keep must be 'largest' or 'smallest', got {keep!r}")
        if not 0.0 < tail_frac <= 1.0:
            raise ValueError(f"tail_frac must be in (0, 1], got {tail_frac}")
        self.keep = keep
        self.tail_frac = tail_frac
        self.capacity = max(int(capacity), 1)
        self.bins = int(bins)
        self.count = 0
        self.hist = np.zeros(self.bins, dtype=np.int64)
        self._tail = np.empty(0, dtype=np.float64)  # sorted ascending
        self._min = math.inf
        self._max = -math.inf

    @property
    def min(self) -> float | None:
        return None if self.count == 0 else self._min

    @property
    def max(self) -> float | None:
        return None if self.count == 0 else self._max

    @property
    def tail(self) -> np.ndarray:
        """All retained extreme scores, sorted ascending (may exceed tail_k)."""
        return self._tail

    @property
    def full_retention(self) -> bool:
        return len(self._tail) == self.count

    @property
    def tail_k(self) -> int:
        """Nominal tail size: ceil(count * tail_frac), capped by count."""
        return min(math.ceil(self.count * self.tail_frac), self.count)

    @property
    def top_tail(self) -> np.ndarray:
        """The tail_k most extreme scores, sorted from most to least extreme."""
        k = self.tail_k
        if k > len(self._tail):
            raise DataError(
                f"tail holds {len(self._tail)} scores but tail_k is {k}; "
                "rescore with a larger tail_frac or capacity"
            )
        if k == 0:
            return np.empty(0, dtype=np.float64)
        if self.keep == KEEP_LARGEST:
            return self._tail[-k:][::-1].copy()
        return self._tail[:k].copy()

    def update(self, scores: np.ndarray) -> None:
        """Fold a batch of scores in. Clamps to [-1, 1]; order-independent."""
        scores = np.asarray(scores, dtype=np.float64).ravel()
        if scores.size == 0:
            return
        scores = np.clip(scores, -1.0, 1.0) + 0.0  # clamp; fold -0.0 into 0.0
        self.count += scores.size
        self._min = min(self._min, float(scores.min()))
        self._max = max(self._max, float(scores.max()))
        idx = ((scores + 1.0) * (self.bins / 2.0)).astype(np.int64)
        np.clip(idx, 0, self.bins - 1, out=idx)  # score 1.0 lands in the top bin
        self.hist += np.bincount(idx, minlength=self.bins)
        self._update_tail(scores)

    def _update_tail(self, scores: np.ndarray) -> None:
        cap = self.capacity
        if len(self._tail) >= cap:
            # Value-equal ties at the cutoff are interchangeable; strict
            # comparison keeps the retained multiset exact.
            if self.keep == KEEP_LARGEST:
                scores = scores[scores > self._tail[0]]
            else:
                scores = scores[scores < self._tail[-1]]
            if scores.size == 0:
                return
        merged = np.sort(np.concatenate([self._tail, scores]))
        self._tail = merged[-cap:] if self.keep == KEEP_LARGEST else merged[:cap]

    def merge(self, other: "ScoreSet") -> None:
        """Fold another ScoreSet in. Requires identical configuration."""
        if (self.keep, self.tail_frac, self.capacity, self.bins) != (
            other.keep, other.tail_frac, other.capacity, other.bins,
        ):
            raise DataError(
                "cannot merge score sets with different configurations: "
                f"({self.keep}, {self.tail_frac}, {self.capacity}, {self.bins}) vs "
                f"({other.keep}, {other.tail_frac}, {other.capacity}, {other.bins})"
            )
        if other.count == 0:
            return
        self.count += other.count
        self._min = min(self._min, other._min)
        self._max = max(self._max, other._max)
        self.hist += other.hist
        merged = np.sort(np.concatenate([self._tail, other._tail]))
        cap = self.capacity
        self._tail = merged[-cap:] if self.keep == KEEP_LARGEST else merged[:cap]

    def bin_edges(self) -> np.ndarray:
        return -1.0 + np.arange(self.bins + 1) * (2.0 / self.bins)


@dataclass
class ScoreCell:
    """Scores of one (pair kind x category x scope) population."""

    kind: str
    category: PairCategory | None
    scope: str | None
    scores: ScoreSet

    @property
    def key(self) -> tuple[str, str, str]:
        return (
            self.kind,
            self.category.name if self.category else "",
            self.scope or "",
        )


def merge(cells_a: Sequence[ScoreCell], cells_b: Sequence[ScoreCell]) -> list[ScoreCell]:
    """Merge two cell lists by (kind, category, scope) key; associative and commutative."""
    out: dict[tuple, ScoreCell] = {}
    for cell in list(cells_a) + list(cells_b):
        existing = out.get(cell.key)
        if existing is None:
            fresh = ScoreSet(
                keep=cell.scores.keep,
                tail_frac=cell.scores.tail_frac,
                capacity=cell.scores.capacity,
                bins=cell.scores.bins,
            )
            fresh.merge(cell.scores)
            out[cell.key] = ScoreCell(cell.kind, cell.category, cell.scope, fresh)
        else:
            existing.scores.merge(cell.scores)
    return list(out.values())


@dataclass(frozen=True)
class _Job:
    """Everything a scoring pass needs, precomputed once."""

    vectors: np.ndarray          # (n, dim) float64, scope order
    subject_codes: np.ndarray    # (n,) int codes
    membership: dict[str, np.ndarray]
    kinds: tuple[str, ...]
    categories: tuple[PairCategory | None, ...]
    block_size: int


def tail_capacity_for(total_pairs: int, tail_frac: float) -> int:
    return max(math.ceil(total_pairs * tail_frac), MIN_TAIL_CAPACITY)


def score_pairs(
    ds: Dataset,
    store: EmbeddingStore,
    spec: PairSpec,
    categories: Sequence[PairCategory | None],
    scheme: RatioClassScheme = DEFAULT_SCHEME,
    tail_frac: float = DEFAULT_TAIL_FRAC,
    bins: int = HISTOGRAM_BINS,
    block_size: int = DEFAULT_BLOCK_SIZE,
    workers: int = 1,
) -> list[ScoreCell]:
    """Score all pairs of one kind into per-category cells.

    A category of None collects every pair of the kind in scope. Overlapping
    categories are allowed: a pair contributes to every matching cell exactly
    once. Results are bitwise-independent of block_size and workers.
    """
    return score_cells(
        ds, store,
        kinds=(spec.kind,),
        categories=categories,
        scope=spec.scope,
        prefilter_category=spec.category,
        scheme=scheme,
        tail_frac=tail_frac,
        bins=bins,
        block_size=block_size,
        workers=workers,
    )


def score_cells(
    ds: Dataset,
    store: EmbeddingStore,
    kinds: Sequence[str] = ("genuine", "impostor"),
    categories: Sequence[PairCategory | None] = (None,),
    scope: str | None = None,
    prefilter_category: PairCategory | None = None,
    scheme: RatioClassScheme = DEFAULT_SCHEME,
    tail_frac: float = DEFAULT_TAIL_FRAC,
    bins: int = HISTOGRAM_BINS,
    block_size: int = DEFAULT_BLOCK_SIZE,
    workers: int = 1,
) -> list[ScoreCell]:
    """Score genuine and/or impostor pairs into (kind x category) cells in one pass."""
    for kind in kinds:
        if kind not in ("genuine", "impostor"):
            raise ValueError(f"unknown pair kind {kind!r}")
    recs = scoped_records(ds, scope)
    n = len(recs)
    need_ratios = prefilter_category is not None or any(c is not None for c in categories)
    ratios = np.empty(n, dtype=np.float64)
    for i, rec in enumerate(recs):
        if rec.embedding_index >= store.count:
            raise DataError(
                f"record {rec.image_id!r}: embedding_index {rec.embedding_index} "
                f"out of range for store of {store.count} vectors"
            )
        if rec.facial_hair_ratio is None:
            if need_ratios:
                raise DataError(f"record {rec.image_id!r} has no facial_hair_ratio")
            ratios[i] = 0.0
        else:
            ratios[i] = rec.facial_hair_ratio

    vectors = store.vectors[[r.embedding_index for r in recs]].astype(np.float64)
    _, subject_codes = np.unique([r.subject_id for r in recs], return_inverse=True)
    membership = class_membership(ratios, scheme)

    capacity = tail_capacity_for(n * (n - 1) // 2, tail_frac)
    cells = [
        ScoreCell(
            kind=kind,
            category=cat,
            scope=scope,
            scores=ScoreSet(
                keep=KEEP_LARGEST if kind == "impostor" else KEEP_SMALLEST,
                tail_frac=tail_frac,
                capacity=capacity,
                bins=bins,
            ),
        )
        for kind in kinds
        for cat in categories
    ]
    if n < 2:
        return cells

    job = _Job(
        vectors=vectors,
        subject_codes=subject_codes,
        membership=membership,
        kinds=tuple(kinds),
        categories=tuple(categories),
        block_size=block_size,
    )

    blocks = [
        (i0, j0)
        for i0 in range(0, n, block_size)
        for j0 in range(i0, n, block_size)
    ]
    prefilter_masks = None
    if prefilter_category is not None:
        prefilter_masks = _category_masks(membership, prefilter_category)

    if workers <= 1:
        partials = [_score_blocks(job, blocks, prefilter_masks, tail_frac, bins, capacity)]
    else:
        chunks = [blocks[w::workers] for w in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(
                pool.map(
                    lambda chunk: _score_blocks(job, chunk, prefilter_masks, tail_frac, bins, capacity),
                    chunks,
                )
            )
    for cell, *parts in zip(cells, *partials):
        for part in parts:
            cell.scores.merge(part)
    return cells


def _category_masks(membership, category: PairCategory):
    return membership[category.left], membership[category.right]


def _score_blocks(job: _Job, blocks, prefilter_masks, tail_frac, bins, capacity) -> list[ScoreSet]:
    """Score a list of (i0, j0) blocks into private partial ScoreSets."""
    sets = [
        ScoreSet(
            keep=KEEP_LARGEST if kind == "impostor" else KEEP_SMALLEST,
            tail_frac=tail_frac,
            capacity=capacity,
            bins=bins,
        )
        for kind in job.kinds
        for _ in job.categories
    ]
    V = job.vectors
    subj = job.subject_codes
    bs = job.block_size
    n = V.shape[0]
    for i0, j0 in blocks:
        i1 = min(i0 + bs, n)
        j1 = min(j0 + bs, n)
        # einsum (not BLAS) so each element is independent of block shape
        scores = np.einsum("ik,jk->ij", V[i0:i1], V[j0:j1], optimize=False)
        same_subject = subj[i0:i1, None] == subj[None, j0:j1]
        if i0 == j0:
            base = np.triu(np.ones((i1 - i0, j1 - j0), dtype=bool), k=1)
        else:
            base = np.ones((i1 - i0, j1 - j0), dtype=bool)
        if prefilter_masks is not None:
            la, lb = prefilter_masks
            base &= (la[i0:i1, None] & lb[None, j0:j1]) | (lb[i0:i1, None] & la[None, j0:j1])
        si = 0
        for kind in job.kinds:
            kind_mask = base & (same_subject if kind == "genuine" else ~same_subject)
            for cat in job.categories:
                if cat is None:
                    mask = kind_mask
                else:
                    la = job.membership[cat.left]
                    lb = job.membership[cat.right]
                    cat_mask = (la[i0:i1, None] & lb[None, j0:j1]) | (
                        lb[i0:i1, None] & la[None, j0:j1]
                    )
                    mask = kind_mask & cat_mask
                sets[si].update(scores[mask])
                si += 1
    return sets


# ---------------------------------------------------------------------------
# Cell cache serialization (magic FHSC) and histogram export
# ---------------------------------------------------------------------------

_CELL_HEADER = struct.Struct("<4sII")


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: memoryview, off: int) -> tuple[str, int]:
    (length,) = struct.unpack_from("<H", buf, off)
    off += 2
    return bytes(buf[off:off + length]).decode("utf-8"), off + length


def save_cells(cells: Sequence[ScoreCell], path) -> None:
    """Write score cells to a versioned binary cache file."""
    path = Path(path)
    out = [_CELL_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, len(cells))]
    for cell in cells:
        s = cell.scores
        out.append(_pack_str(cell.kind))
        out.append(_pack_str(cell.category.name if cell.category else ""))
        out.append(_pack_str(cell.scope or ""))
        out.append(_pack_str(s.keep))
        out.append(struct.pack("<dIQ", s.tail_frac, s.bins, s.capacity))
        out.append(struct.pack("<Qdd", s.count, s._min, s._max))
        tail = np.ascontiguousarray(s._tail, dtype="<f8")
        out.append(struct.pack("<Q", tail.size))
        out.append(tail.tobytes())
        nz = np.flatnonzero(s.hist)
        out.append(struct.pack("<I", nz.size))
        out.append(np.ascontiguousarray(nz, dtype="<u4").tobytes())
        out.append(np.ascontiguousarray(s.hist[nz], dtype="<u8").tobytes())
    path.write_bytes(b"".join(out))


def load_cells(path) -> list[ScoreCell]:
    """Load score cells from a cache file written by save_cells."""
    path = Path(path)
    buf = memoryview(path.read_bytes())
    if len(buf) < _CELL_HEADER.size:
        raise DataError(f"{path}: truncated cache header")
    magic, version, n_cells = _CELL_HEADER.unpack_from(buf)
    if magic != CACHE_MAGIC:
        raise DataError(f"{path}: bad magic {bytes(magic)!r}, expected {CACHE_MAGIC!r}")
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    off = _CELL_HEADER.size
    cells = []
    try:
        for _ in range(n_cells):
            kind, off = _unpack_str(buf, off)
            cat_name, off = _unpack_str(buf, off)
            scope, off = _unpack_str(buf, off)
            keep, off = _unpack_str(buf, off)
            tail_frac, bins, capacity = struct.unpack_from("<dIQ", buf, off)
            off += struct.calcsize("<dIQ")
            count, mn, mx = struct.unpack_from("<Qdd", buf, off)
            off += struct.calcsize("<Qdd")
            (tail_len,) = struct.unpack_from("<Q", buf, off)
            off += 8
            tail = np.frombuffer(buf, dtype="<f8", count=tail_len, offset=off).copy()
            off += 8 * tail_len
            (n_nz,) = struct.unpack_from("<I", buf, off)
            off += 4
            nz = np.frombuffer(buf, dtype="<u4", count=n_nz, offset=off)
            off += 4 * n_nz
            counts = np.frombuffer(buf, dtype="<u8", count=n_nz, offset=off)
            off += 8 * n_nz
            s = ScoreSet(keep=keep, tail_frac=tail_frac, capacity=capacity, bins=bins)
            s.count = int(count)
            s._min = mn
            s._max = mx
            s._tail = tail
            s.hist[nz.astype(np.int64)] = counts.astype(np.int64)
            cells.append(
                ScoreCell(
                    kind=kind,
                    category=PairCategory.parse(cat_name) if cat_name else None,
                    scope=scope or None,
                    scores=s,
                )
            )
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: corrupt cache: {exc}") from exc
    return cells


def write_histogram_csv(cell: ScoreCell, path) -> None:
    """Export a cell's non-empty histogram bins as (bin_lower, count) CSV."""
    s = cell.scores
    edges = s.bin_edges()
    nz = np.flatnonzero(s.hist)
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("bin_lower,count\n")
        for b in nz:
            fh.write(f"{float(edges[b])!r},{int(s.hist[b])}\n")
