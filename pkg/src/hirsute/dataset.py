"""Manifest and embedding ingestion into an immutable in-memory dataset.

File formats:
  * Manifest: UTF-8 CSV with header
    ``image_id,subject_id,demographic,embedding_index,mask_path,facial_hair_ratio``;
    the last two columns may be empty.
  * Embeddings: little-endian binary; magic ``FHEB``, u32 count, u32 dim,
    then count x dim float32 row-major. Vectors are unit-normalized on load
    so cosine similarity reduces to a dot product.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = (
    "image_id",
    "subject_id",
    "demographic",
    "embedding_index",
    "mask_path",
    "facial_hair_ratio",
)

EMBEDDING_MAGIC = b"FHEB"
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class ImageRecord:
    """One face image: identifiers, demographic tag, embedding slot, optional mask/ratio."""

    image_id: str
    subject_id: str
    demographic: str
    embedding_index: int
    mask_path: str | None = None
    facial_hair_ratio: float | None = None

    def __post_init__(self):
        if self.facial_hair_ratio is not None and not 0.0 <= self.facial_hair_ratio <= 1.0:
            raise DataError(
                f"record {self.image_id!r}: facial_hair_ratio {self.facial_hair_ratio} "
                "outside [0, 1]"
            )
        if self.embedding_index < 0:
            raise DataError(f"record {self.image_id!r}: negative embedding_index")


@dataclass(frozen=True)
class EmbeddingStore:
    """Unit-normalized float32 embedding matrix, one row per stored vector."""

    vectors: np.ndarray

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class Dataset:
    """Immutable record collection with subject and demographic indices."""

    records: tuple[ImageRecord, ...]
    subjects: dict[str, tuple[str, ...]]
    demographics: dict[str, tuple[str, ...]]

    def __len__(self) -> int:
        return len(self.records)

    def record(self, image_id: str) -> ImageRecord:
        try:
            return self._by_image[image_id]
        except KeyError:
            raise KeyError(f"unknown image_id {image_id!r}") from None

    @property
    def _by_image(self) -> dict[str, ImageRecord]:
        cached = self.__dict__.get("_by_image_cache")
        if cached is None:
            cached = {r.image_id: r for r in self.records}
            self.__dict__["_by_image_cache"] = cached
        return cached


def build_dataset(records: Iterable[ImageRecord]) -> Dataset:
    """Index records by subject and demographic, rejecting duplicate image ids."""
    records = tuple(records)
    subjects: dict[str, list[str]] = {}
    demographics: dict[str, list[str]] = {}
    seen: set[str] = set()
    for rec in records:
        if rec.image_id in seen:
            raise DataError(f"duplicate image_id {rec.image_id!r}")
        seen.add(rec.image_id)
        subjects.setdefault(rec.subject_id, []).append(rec.image_id)
        demographics.setdefault(rec.demographic, []).append(rec.image_id)
    return Dataset(
        records=records,
        subjects={k: tuple(v) for k, v in subjects.items()},
        demographics={k: tuple(v) for k, v in demographics.items()},
    )


def load_manifest(path, store: EmbeddingStore | None = None) -> Dataset:
    """Load a manifest CSV; optionally validate embedding indices against a store.

    Row order is preserved as record order. Malformed rows are reported with
    their line number; duplicate image ids and out-of-range embedding indices
    are hard errors.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header row") from None
        if tuple(header) != MANIFEST_COLUMNS:
            raise DataError(
                f"{path}: bad header {header!r}, expected {','.join(MANIFEST_COLUMNS)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
            image_id, subject_id, demographic, emb_idx, mask_path, ratio = row
            if not image_id or not subject_id:
                raise DataError(f"{path}:{lineno}: image_id and subject_id must be non-empty")
            try:
                emb = int(emb_idx)
            except ValueError:
                raise DataError(f"{path}:{lineno}: embedding_index {emb_idx!r} is not an integer") from None
            ratio_val: float | None = None
            if ratio != "":
                try:
                    ratio_val = float(ratio)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: facial_hair_ratio {ratio!r} is not a number") from None
            try:
                records.append(
                    ImageRecord(
                        image_id=image_id,
                        subject_id=subject_id,
                        demographic=demographic,
                        embedding_index=emb,
                        mask_path=mask_path or None,
                        facial_hair_ratio=ratio_val,
                    )
                )
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    ds = build_dataset(records)
    if store is not None:
        validate_embedding_indices(ds, store)
    return ds


def write_manifest(ds: Dataset, path) -> None:
    """Write a dataset back to manifest CSV form (round-trips exactly)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in ds.records:
            ratio = "" if rec.facial_hair_ratio is None else repr(float(rec.facial_hair_ratio))
            writer.writerow(
                [rec.image_id, rec.subject_id, rec.demographic,
                 rec.embedding_index, rec.mask_path or "", ratio]
            )


def validate_embedding_indices(ds: Dataset, store: EmbeddingStore) -> None:
    for rec in ds.records:
        if rec.embedding_index >= store.count:
            raise DataError(
                f"record {rec.image_id!r}: embedding_index {rec.embedding_index} "
                f"out of range for store of {store.count} vectors"
            )


def load_embeddings(path, expected_dim: int | None = None) -> EmbeddingStore:
    """Load and unit-normalize an FHEB embedding file.

    Zero-norm vectors are rejected (they cannot be normalized); a declared
    dimension different from expected_dim is an error.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"embeddings file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, count, dim = _HEADER.unpack_from(raw)
    if magic != EMBEDDING_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}")
    if dim == 0:
        raise DataError(f"{path}: embedding dimension 0")
    if expected_dim is not None and dim != expected_dim:
        raise DataError(f"{path}: dimension mismatch: file declares {dim}, expected {expected_dim}")
    expected_bytes = _HEADER.size + 4 * count * dim
    if len(raw) < expected_bytes:
        raise DataError(
            f"{path}: truncated: header declares {count}x{dim} float32 "
            f"({expected_bytes} bytes), file has {len(raw)}"
        )
    vectors = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=_HEADER.size)
    vectors = vectors.reshape(count, dim)
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DataError(f"{path}: zero-norm vector at index {int(zero[0])}")
    normalized = (vectors.astype(np.float64) / norms[:, None]).astype(np.float32)
    return EmbeddingStore(vectors=normalized)


def write_embeddings(vectors: np.ndarray, path) -> None:
    """Write a (count, dim) float array as an FHEB file."""
    arr = np.ascontiguousarray(vectors, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(EMBEDDING_MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def attach_ratios(ds: Dataset, ratios: Mapping[str, float]) -> Dataset:
    """Return a new Dataset with every record's facial_hair_ratio populated.

    A manifest-supplied ratio wins over the mapped value (with a warning) so
    that precomputed ratios are never silently overwritten by mask-derived
    ones. Every record must end up with a ratio.
    """
    known = {r.image_id for r in ds.records}
    for image_id in ratios:
        if image_id not in known:
            raise DataError(f"ratio supplied for unknown image_id {image_id!r}")
    for image_id, value in ratios.items():
        if not 0.0 <= value <= 1.0:
            raise DataError(f"ratio {value} for {image_id!r} outside [0, 1]")
    out = []
    for rec in ds.records:
        supplied = ratios.get(rec.image_id)
        if rec.facial_hair_ratio is not None:
            if supplied is not None and supplied != rec.facial_hair_ratio:
                log.warning(
                    "image %s: keeping manifest ratio %g over supplied %g",
                    rec.image_id, rec.facial_hair_ratio, supplied,
                )
            out.append(rec)
        elif supplied is not None:
            out.append(replace(rec, facial_hair_ratio=supplied))
        else:
            raise DataError(f"record {rec.image_id!r} has no ratio and none was supplied")
    return build_dataset(out)


def select_subjects(ds: Dataset, subject_ids) -> Dataset:
    """Subset a dataset to the given subjects, preserving record order."""
    wanted = set(subject_ids)
    return build_dataset(r for r in ds.records if r.subject_id in wanted)


def select_demographic(ds: Dataset, tag: str) -> Dataset:
    """Subset a dataset to one demographic tag, preserving record order."""
    return build_dataset(r for r in ds.records if r.demographic == tag)
