"""Vector storage, dataset file I/O, exact search oracle, and recall metrics.

File formats (little-endian throughout):
    fvecs: repeated [int32 d][d x float32]
    bvecs: repeated [int32 d][d x uint8]
    ivecs: repeated [int32 k][k x int32]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class FileFormatError(ValueError):
    """Raised for malformed, truncated, or inconsistent dataset files."""


@dataclass
class VectorSet:
    """Dense float32 vectors with stable external ids.

    Args:
        dim: Vector dimensionality (> 0).
        data: (count, dim) float32 array.
        ids: (count,) uint64 array of unique external identifiers.
    """

    dim: int
    data: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.data.ndim != 2 or self.data.shape[1] != self.dim:
            raise ValueError("data must be (count, dim)")
        if self.ids.shape != (self.data.shape[0],):
            raise ValueError("ids must have one entry per vector")
        if np.unique(self.ids).size != self.ids.size:
            raise ValueError("ids must be unique")

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_array(cls, data: np.ndarray, ids=None) -> "VectorSet":
        data = np.asarray(data, dtype=np.float32)
        if data.ndim != 2 or data.shape[0] == 0:
            raise ValueError("data must be a non-empty 2-D array")
        if ids is None:
            ids = np.arange(data.shape[0], dtype=np.uint64)
        return cls(dim=data.shape[1], data=data, ids=np.asarray(ids, dtype=np.uint64))

    def subset(self, ids) -> "VectorSet":
        """New VectorSet restricted to the given external ids (order kept)."""
        index = {int(i): pos for pos, i in enumerate(self.ids)}
        rows = np.array([index[int(i)] for i in ids], dtype=np.int64)
        return VectorSet(self.dim, self.data[rows], np.asarray(ids, dtype=np.uint64))


@dataclass
class GroundTruth:
    """True k-nearest ids and distances per query, sorted by distance."""

    ids: np.ndarray     # (nq, k) int64
    dists: np.ndarray   # (nq, k) float64, non-decreasing along axis 1

    def __post_init__(self):
        if self.ids.shape != self.dists.shape:
            raise ValueError("ids and dists must have the same shape")
        if np.any(np.diff(self.dists, axis=1) < 0):
            raise ValueError("distances must be non-decreasing per query")

    @property
    def k(self) -> int:
        return self.ids.shape[1]


@dataclass
class RecallReport:
    k: int
    per_query: np.ndarray
    mean: float = field(init=False)

    def __post_init__(self):
        self.per_query = np.asarray(self.per_query, dtype=np.float64)
        self.mean = float(self.per_query.mean()) if self.per_query.size else 0.0


def load_vectors(path, fmt: str) -> VectorSet:
    """Load an fvecs or bvecs file into a VectorSet.

    The dimension is taken from the first record and must be consistent
    across records; bvecs bytes are widened to float32. Ids are assigned
    0..count-1.
    """
    if fmt not in ("fvecs", "bvecs"):
        raise ValueError(f"unknown format {fmt!r}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        raise FileFormatError(f"{path}: empty file, dimension undefined")
    if raw.size < 4:
        raise FileFormatError(f"{path}: truncated header")
    dim = int(raw[:4].view(np.int32)[0])
    if dim <= 0:
        raise FileFormatError(f"{path}: non-positive dimension {dim}")
    stride = 4 + (4 * dim if fmt == "fvecs" else dim)
    if raw.size % stride != 0:
        raise FileFormatError(f"{path}: size {raw.size} not a multiple of record size {stride}")
    count = raw.size // stride
    rows = raw.reshape(count, stride)
    headers = rows[:, :4].copy().view(np.int32).reshape(count)
    if not np.all(headers == dim):
        bad = int(np.flatnonzero(headers != dim)[0])
        raise FileFormatError(f"{path}: record {bad} has dim {int(headers[bad])}, expected {dim}")
    if fmt == "fvecs":
        data = rows[:, 4:].copy().view(np.float32).reshape(count, dim)
    else:
        data = rows[:, 4:].astype(np.float32)
    return VectorSet(dim=dim, data=data, ids=np.arange(count, dtype=np.uint64))


def save_vectors(path, vs: VectorSet, fmt: str) -> None:
    """Write vectors as fvecs or bvecs (bvecs requires values in [0, 255])."""
    if fmt not in ("fvecs", "bvecs"):
        raise ValueError(f"unknown format {fmt!r}")
    count, dim = vs.data.shape
    if fmt == "fvecs":
        out = np.empty((count, 4 + 4 * dim), dtype=np.uint8)
        out[:, :4] = np.full(count, dim, dtype=np.int32)[:, None].view(np.uint8)
        out[:, 4:] = vs.data.view(np.uint8).reshape(count, 4 * dim)
    else:
        if np.any(vs.data < 0) or np.any(vs.data > 255):
            raise ValueError("bvecs requires values in [0, 255]")
        out = np.empty((count, 4 + dim), dtype=np.uint8)
        out[:, :4] = np.full(count, dim, dtype=np.int32)[:, None].view(np.uint8)
        out[:, 4:] = vs.data.astype(np.uint8)
    out.tofile(path)


def load_ivecs(path) -> np.ndarray:
    """Load an ivecs file as an (n, k) int32 array."""
    raw = np.fromfile(path, dtype=np.int32)
    if raw.size == 0:
        raise FileFormatError(f"{path}: empty file")
    k = int(raw[0])
    if k <= 0:
        raise FileFormatError(f"{path}: non-positive row length {k}")
    if raw.size % (k + 1) != 0:
        raise FileFormatError(f"{path}: size not a multiple of record size")
    rows = raw.reshape(-1, k + 1)
    if not np.all(rows[:, 0] == k):
        raise FileFormatError(f"{path}: inconsistent row lengths")
    return rows[:, 1:].copy()


def save_ivecs(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.int32)
    out = np.empty((arr.shape[0], arr.shape[1] + 1), dtype=np.int32)
    out[:, 0] = arr.shape[1]
    out[:, 1:] = arr
    out.tofile(path)


def l2_distance(a, b) -> float:
    """Exact Euclidean distance between two equal-dimension vectors."""
    a = np.ascontiguousarray(a, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(kernels.l2_sq(a, b)))


def brute_force_knn(vs: VectorSet, q, k: int):
    """Exact k-NN over a VectorSet: ids sorted by distance, ties by lower id.

    Independent of the graph/search code paths; used as the recall oracle.
    Returns (ids, dists) arrays of length k.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    if k > vs.count:
        raise ValueError(f"k={k} exceeds count={vs.count}")
    q = np.asarray(q, dtype=np.float64)
    diff = vs.data.astype(np.float64) - q
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((vs.ids, d2))[:k]
    return vs.ids[order].astype(np.int64), np.sqrt(d2[order])


def ground_truth(vs: VectorSet, queries: np.ndarray, k: int) -> GroundTruth:
    """Brute-force ground truth for a batch of queries."""
    ids = np.empty((len(queries), k), dtype=np.int64)
    dists = np.empty((len(queries), k), dtype=np.float64)
    for i, q in enumerate(queries):
        ids[i], dists[i] = brute_force_knn(vs, q, k)
    return GroundTruth(ids=ids, dists=dists)


def recall_at_k(result, truth_row, k: int) -> float:
    """|first-k(result) ∩ first-k(truth)| / k."""
    if k <= 0:
        raise ValueError("k must be positive")
    truth = set(int(t) for t in truth_row[:k])
    if len(truth) < k:
        raise ValueError("truth row shorter than k")
    got = set(int(r) for r in list(result)[:k])
    return len(got & truth) / k


def recall_report(results, truth: GroundTruth, k: int) -> RecallReport:
    per_query = np.array(
        [recall_at_k(res, truth.ids[i], k) for i, res in enumerate(results)]
    )
    return RecallReport(k=k, per_query=per_query)
