"""
dense_prf/index.py

Exact inner-product index over frozen document embeddings.

The same FlatIndex serves the first pass, the second (feedback) pass and
training, where its rows are the fixed d+ / d- embeddings. Search is a
brute-force matrix-vector product accumulated in float64; results are ordered
by (score desc, doc_id asc).

File format (little endian):
    b"DPRFIDX1"                      8-byte magic
    dim, count                       u64, u64
    matrix                           count*dim float32, row-major
    id table                         per id: u32 byte length + UTF-8 bytes
    crc32                            u32 over every preceding byte
"""

from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from dense_prf.errors import CorruptIndexError, DimensionMismatchError, DuplicateIdError

log = logging.getLogger(__name__)

MAGIC = b"DPRFIDX1"
STORAGE_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class ScoredHit:
    doc_id: str
    score: float
    rank: int


@dataclass(frozen=True, eq=False)
class FlatIndex:
    """Immutable id-addressed embedding matrix. Build with build_index()."""

    doc_ids: Tuple[str, ...]
    matrix: np.ndarray
    dim: int
    _row_of: Dict[str, int] = field(default=None, repr=False, compare=False)
    _matrix64: np.ndarray = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.doc_ids)

    def row(self, doc_id: str) -> np.ndarray:
        return self.matrix[self._row_of[doc_id]]

    def has(self, doc_id: str) -> bool:
        return doc_id in self._row_of

    def rows_of(self, doc_ids: Sequence[str]) -> np.ndarray:
        """Row positions for doc_ids; raises KeyError on the first unknown id."""
        return np.fromiter((self._row_of[d] for d in doc_ids), dtype=np.int64, count=len(doc_ids))

    @property
    def matrix64(self) -> np.ndarray:
        return self._matrix64


def _freeze(doc_ids: Tuple[str, ...], matrix: np.ndarray) -> FlatIndex:
    matrix = np.ascontiguousarray(matrix, dtype=STORAGE_DTYPE)
    matrix.flags.writeable = False
    m64 = matrix.astype(np.float64)
    m64.flags.writeable = False
    row_of = {d: i for i, d in enumerate(doc_ids)}
    return FlatIndex(doc_ids=doc_ids, matrix=matrix, dim=int(matrix.shape[1]), _row_of=row_of, _matrix64=m64)


def build_index(embeddings: Iterable[Tuple[str, Union[np.ndarray, Sequence[float]]]]) -> FlatIndex:
    """
    Build a FlatIndex from (doc_id, vector) pairs, preserving input order.

    Vectors are stored as float32. Rejects an empty input, ragged dimensions,
    duplicate ids and non-finite values.
    """
    ids: List[str] = []
    rows: List[np.ndarray] = []
    seen = set()
    dim = None
    for doc_id, vec in embeddings:
        arr = np.asarray(vec)
        if arr.ndim != 1:
            raise DimensionMismatchError(f"embedding for {doc_id!r} is not a vector (shape={arr.shape})")
        if dim is None:
            dim = arr.shape[0]
        elif arr.shape[0] != dim:
            raise DimensionMismatchError(f"embedding for {doc_id!r} has dim {arr.shape[0]}, expected {dim}")
        if doc_id in seen:
            raise DuplicateIdError(f"duplicate doc id: {doc_id!r}")
        seen.add(doc_id)
        ids.append(str(doc_id))
        rows.append(arr)

    if not ids:
        raise ValueError("cannot build an index from zero embeddings")
    if dim == 0:
        raise DimensionMismatchError("embedding dimension must be positive")

    matrix = np.stack(rows).astype(STORAGE_DTYPE)
    if not np.isfinite(matrix).all():
        bad = int(np.argwhere(~np.isfinite(matrix).all(axis=1))[0, 0])
        raise ValueError(f"non-finite embedding for doc {ids[bad]!r}")
    log.debug("Built index: %d docs x %d dims", len(ids), dim)
    return _freeze(tuple(ids), matrix)


def _order(doc_ids: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # lexsort uses the last key as primary
    return np.lexsort((doc_ids, -scores))


def search(index: FlatIndex, q: Union[np.ndarray, Sequence[float]], top_k: int) -> List[ScoredHit]:
    """
    Exact top-k maximum inner product search.

    Scores are float64 dot products; ties are broken by ascending doc_id.
    Returns min(top_k, len(index)) hits ranked 1..n.
    """
    q64 = np.asarray(q, dtype=np.float64)
    if q64.ndim != 1 or q64.shape[0] != index.dim:
        raise DimensionMismatchError(f"query dim {q64.shape} does not match index dim {index.dim}")
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")

    scores = index.matrix64 @ q64
    n = scores.shape[0]
    ids = np.asarray(index.doc_ids)

    if top_k < n:
        # candidates: everything scoring at least the k-th best, so boundary ties survive
        kth = np.partition(scores, n - top_k)[n - top_k]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)

    order = cand[_order(ids[cand], scores[cand])][:top_k]
    return [ScoredHit(doc_id=str(ids[i]), score=float(scores[i]), rank=r) for r, i in enumerate(order, start=1)]


# ------------------------------
# Persistence
# ------------------------------
def _encode(index: FlatIndex) -> bytes:
    parts = [MAGIC, struct.pack("<QQ", index.dim, len(index)), index.matrix.astype(STORAGE_DTYPE).tobytes(order="C")]
    for doc_id in index.doc_ids:
        raw = doc_id.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_index(index: FlatIndex, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = _encode(index)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
    log.info("Wrote index: %s (%d docs, dim=%d, %d bytes)", path, len(index), index.dim, len(payload))
    return path


def load_index(path: Union[str, Path]) -> FlatIndex:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 16 + 4:
        raise CorruptIndexError(f"{path}: file too short ({len(data)} bytes)")
    if data[: len(MAGIC)] != MAGIC:
        raise CorruptIndexError(f"{path}: bad magic {data[:len(MAGIC)]!r}")
    body, (stored_crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CorruptIndexError(f"{path}: checksum mismatch (truncated or modified file)")

    off = len(MAGIC)
    dim, count = struct.unpack_from("<QQ", body, off)
    off += 16
    nbytes = dim * count * STORAGE_DTYPE.itemsize
    if off + nbytes > len(body):
        raise CorruptIndexError(f"{path}: matrix section truncated")
    matrix = np.frombuffer(body, dtype=STORAGE_DTYPE, count=dim * count, offset=off).reshape(count, dim).copy()
    off += nbytes

    ids: List[str] = []
    for _ in range(count):
        if off + 4 > len(body):
            raise CorruptIndexError(f"{path}: id table truncated")
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        ids.append(body[off: off + n].decode("utf-8"))
        off += n
    if off != len(body):
        raise CorruptIndexError(f"{path}: {len(body) - off} trailing bytes before checksum")
    if len(set(ids)) != len(ids):
        raise CorruptIndexError(f"{path}: duplicate ids in id table")
    log.info("Loaded index: %s (%d docs, dim=%d)", path, count, dim)
    return _freeze(tuple(ids), matrix)
