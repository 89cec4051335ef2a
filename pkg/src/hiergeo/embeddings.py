"""Per-image embeddings: normalisation, similarity matrices and file I/O.

Binary layout (little-endian)::

    b"HGEO1" | dim: u32 | count: u64 | count x record
    record = image_id: u64 | building_id: u64 | view: u8 | normalized: u8 | dim x f32

A JSON-lines file with the same fields is accepted as an interchange format.
Square distance matrices use the same header with magic ``b"HGEO1D"``,
``rows: u32``, ``cols: u64`` followed by ``rows * cols`` f32 values.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DegenerateInputError, FormatError, InputError, ShapeError

DRONE = 0
SATELLITE = 1
VIEW_NAMES = {DRONE: "drone", SATELLITE: "satellite"}
VIEW_CODES = {v: k for k, v in VIEW_NAMES.items()}

MAGIC = b"HGEO1"
MATRIX_MAGIC = b"HGEO1D"
_HEADER = struct.Struct("<IQ")


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("image_id", "<u8"), ("building_id", "<u8"), ("view", "u1"),
                     ("normalized", "u1"), ("vector", "<f4", (dim,))])


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` (or each row of a 2-D array) to unit Euclidean norm."""
    x = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(~np.isfinite(x)):
        raise InputError("cannot normalise non-finite vector")
    if np.any(norm == 0):
        raise DegenerateInputError("cannot normalise a zero vector")
    return x / norm


def normalize_backward(raw, grad_unit) -> np.ndarray:
    """Chain rule through ``u = x / |x|``: maps dL/du to dL/dx (row-wise)."""
    x = np.asarray(raw, dtype=np.float64)
    g = np.asarray(grad_unit, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    u = x / norm
    return (g - u * np.sum(u * g, axis=-1, keepdims=True)) / norm


@dataclass(frozen=True)
class EmbeddingRecord:
    image_id: int
    building_id: int
    view: int
    vector: np.ndarray
    normalized: bool = False

    @property
    def label(self) -> int:
        return self.building_id


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Columnar, immutable set of image embeddings."""

    image_ids: np.ndarray
    building_ids: np.ndarray
    views: np.ndarray
    vectors: np.ndarray
    normalized: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.image_ids, dtype=np.uint64).reshape(-1)
        n = len(ids)
        vecs = np.asarray(self.vectors, dtype=np.float32)
        if vecs.ndim != 2:
            if vecs.size or n:
                raise ShapeError(f"vectors must be 2-D, got shape {vecs.shape}")
            vecs = vecs.reshape(0, 0)
        cols = {
            "image_ids": ids,
            "building_ids": np.asarray(self.building_ids, dtype=np.uint64).reshape(-1),
            "views": np.asarray(self.views, dtype=np.uint8).reshape(-1),
            "vectors": vecs,
            "normalized": np.asarray(self.normalized, dtype=bool).reshape(-1),
        }
        for name, arr in cols.items():
            if len(arr) != n:
                raise ShapeError(f"{name} has {len(arr)} rows, expected {n}")
        if len(np.unique(ids)) != n:
            raise InputError("duplicate image_id in embedding set")
        if np.any(cols["views"] > 1):
            raise InputError("view codes must be 0 (drone) or 1 (satellite)")
        for name, arr in cols.items():
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls, dim: int) -> "EmbeddingSet":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros((0, dim), np.float32),
                   np.zeros(0, bool))

    @classmethod
    def from_records(cls, records, dim: int | None = None) -> "EmbeddingSet":
        records = list(records)
        if not records:
            return cls.empty(dim or 0)
        dims = {len(r.vector) for r in records}
        if len(dims) != 1 or (dim is not None and dims != {dim}):
            raise ShapeError(f"inconsistent vector dimensions {sorted(dims)}")
        return cls(np.array([r.image_id for r in records]),
                   np.array([r.building_id for r in records]),
                   np.array([r.view for r in records]),
                   np.stack([np.asarray(r.vector, np.float32) for r in records]),
                   np.array([r.normalized for r in records]))

    def __len__(self) -> int:
        return len(self.image_ids)

    @property
    def dimension(self) -> int:
        return int(self.vectors.shape[1])

    def records(self) -> Iterator[EmbeddingRecord]:
        for i in range(len(self)):
            yield EmbeddingRecord(int(self.image_ids[i]), int(self.building_ids[i]),
                                  int(self.views[i]), self.vectors[i], bool(self.normalized[i]))

    def select(self, mask) -> "EmbeddingSet":
        mask = np.asarray(mask)
        return EmbeddingSet(self.image_ids[mask], self.building_ids[mask], self.views[mask],
                            self.vectors[mask], self.normalized[mask])

    def view(self, view: int) -> "EmbeddingSet":
        return self.select(self.views == view)

    def for_buildings(self, building_ids) -> "EmbeddingSet":
        return self.select(np.isin(self.building_ids, np.asarray(list(building_ids), np.uint64)))

    def normalized_copy(self) -> "EmbeddingSet":
        """Normalise rows not yet flagged as normalised; flagged rows are left alone."""
        vecs = self.vectors.astype(np.float32, copy=True)
        todo = ~self.normalized
        if np.any(todo):
            vecs[todo] = l2_normalize(vecs[todo]).astype(np.float32)
        return EmbeddingSet(self.image_ids, self.building_ids, self.views, vecs,
                            np.ones(len(self), bool))

    def concat(self, other: "EmbeddingSet") -> "EmbeddingSet":
        if len(self) and len(other) and self.dimension != other.dimension:
            raise ShapeError("dimension mismatch")
        return EmbeddingSet(np.concatenate([self.image_ids, other.image_ids]),
                            np.concatenate([self.building_ids, other.building_ids]),
                            np.concatenate([self.views, other.views]),
                            np.concatenate([self.vectors, other.vectors]),
                            np.concatenate([self.normalized, other.normalized]))


def similarity_matrix(queries: EmbeddingSet, gallery: EmbeddingSet) -> np.ndarray:
    """Cosine similarities (query rows x gallery columns), accumulated in f64."""
    if queries.dimension != gallery.dimension:
        raise ShapeError(f"dimension mismatch: {queries.dimension} vs {gallery.dimension}")
    if not (np.all(queries.normalized) and np.all(gallery.normalized)):
        raise InputError("similarity_matrix expects normalised embedding sets")
    return queries.vectors.astype(np.float64) @ gallery.vectors.astype(np.float64).T


def similarity_to_distance(sim) -> np.ndarray:
    return 1.0 - np.asarray(sim, dtype=np.float64)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def save_embeddings(es: EmbeddingSet, path) -> None:
    path = Path(path)
    if path.suffix == ".jsonl":
        _save_jsonl(es, path)
        return
    rec = np.zeros(len(es), dtype=_record_dtype(es.dimension))
    rec["image_id"] = es.image_ids
    rec["building_id"] = es.building_ids
    rec["view"] = es.views
    rec["normalized"] = es.normalized
    rec["vector"] = es.vectors
    with open(path, "wb") as fh:
        fh.write(MAGIC + _HEADER.pack(es.dimension, len(es)))
        fh.write(rec.tobytes())


def load_embeddings(path, normalize: bool = True) -> EmbeddingSet:
    """Read an embedding file; unflagged rows are normalised unless ``normalize=False``."""
    path = Path(path)
    if path.suffix == ".jsonl":
        es = _load_jsonl(path)
    else:
        es = _load_binary(path)
    return es.normalized_copy() if normalize else es


def _load_binary(path: Path) -> EmbeddingSet:
    data = path.read_bytes()
    head = len(MAGIC) + _HEADER.size
    if len(data) < head or data[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: missing HGEO1 header")
    dim, count = _HEADER.unpack_from(data, len(MAGIC))
    dt = _record_dtype(dim)
    if len(data) != head + count * dt.itemsize:
        raise FormatError(f"{path}: expected {count} records of dim {dim}, "
                          f"file size {len(data)} does not match")
    rec = np.frombuffer(data, dtype=dt, count=count, offset=head)
    if np.any(rec["normalized"] > 1):
        raise FormatError(f"{path}: bad normalized flag")
    try:
        return EmbeddingSet(rec["image_id"].copy(), rec["building_id"].copy(),
                            rec["view"].copy(), rec["vector"].reshape(count, dim).copy(),
                            rec["normalized"].astype(bool))
    except (InputError, ShapeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _save_jsonl(es: EmbeddingSet, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": "HGEO1", "dimension": es.dimension, "count": len(es)}) + "\n")
        for r in es.records():
            fh.write(json.dumps({"image_id": r.image_id, "building_id": r.building_id,
                                 "view": VIEW_NAMES[r.view], "normalized": r.normalized,
                                 "vector": [float(x) for x in r.vector]}) + "\n")


def _load_jsonl(path: Path) -> EmbeddingSet:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    try:
        header = json.loads(lines[0])
        dim, count = int(header["dimension"]), int(header["count"])
        if header.get("format") != "HGEO1":
            raise KeyError("format")
    except (IndexError, KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header") from exc
    if len(lines) - 1 != count:
        raise FormatError(f"{path}: header says {count} records, found {len(lines) - 1}")
    recs = []
    for ln in lines[1:]:
        try:
            o = json.loads(ln)
            vec = np.asarray(o["vector"], dtype=np.float32)
            view = VIEW_CODES[o["view"]] if isinstance(o["view"], str) else int(o["view"])
            recs.append(EmbeddingRecord(int(o["image_id"]), int(o["building_id"]), view, vec,
                                        bool(o.get("normalized", False))))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}: malformed record") from exc
        if len(vec) != dim:
            raise FormatError(f"{path}: record of dim {len(vec)} in a dim-{dim} file")
    try:
        return EmbeddingSet.from_records(recs, dim) if recs else EmbeddingSet.empty(dim)
    except (InputError, ShapeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_distance_matrix(d, path) -> None:
    d = np.asarray(d)
    path = Path(path)
    if path.suffix == ".csv":
        np.savetxt(path, d, delimiter=",", fmt="%.17g")
        return
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC + _HEADER.pack(d.shape[0], d.shape[1]))
        fh.write(np.ascontiguousarray(d, dtype="<f4").tobytes())


def load_distance_matrix(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".csv":
        try:
            return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    data = path.read_bytes()
    head = len(MATRIX_MAGIC) + _HEADER.size
    if len(data) < head or data[:len(MATRIX_MAGIC)] != MATRIX_MAGIC:
        raise FormatError(f"{path}: missing HGEO1D header")
    rows, cols = _HEADER.unpack_from(data, len(MATRIX_MAGIC))
    if len(data) != head + 4 * rows * cols:
        raise FormatError(f"{path}: truncated matrix")
    return np.frombuffer(data, dtype="<f4", offset=head).reshape(rows, cols).astype(np.float64)
