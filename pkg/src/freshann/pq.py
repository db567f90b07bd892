"""Product quantization: per-subspace 256-centroid codebooks, byte codes,
and asymmetric distances via per-query lookup tables.

A codebook splits a dim-dimensional space into m contiguous chunks; when dim
is not divisible by m the first (dim mod m) chunks are one dimension wider.
Asymmetric distance sums per-subspace squared distances in subspace order
0..m-1 and takes one square root at the end, so the LUT path and the direct
path are bit-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import FileFormatError, VectorSet

CODEBOOK_MAGIC = b"FPQ1"
CODES_MAGIC = b"FPC1"


def sub_dims(dim: int, m: int) -> tuple[int, ...]:
    """Partition dim into m contiguous chunk widths."""
    if m > dim:
        raise ValueError(f"m={m} exceeds dim={dim}")
    base, extra = divmod(dim, m)
    return tuple(base + 1 if i < extra else base for i in range(m))


@dataclass
class PQCodebook:
    """Per-subspace centroid tables (exactly 256 rows each).

    Attributes:
        dim: Full vector dimensionality.
        m: Number of subspaces (bytes per code).
        centroids: List of m float32 arrays of shape (256, sub_dim).
    """

    dim: int
    m: int
    centroids: list

    def __post_init__(self):
        widths = sub_dims(self.dim, self.m)
        if len(self.centroids) != self.m:
            raise ValueError("need one centroid table per subspace")
        for i, table in enumerate(self.centroids):
            if table.shape != (256, widths[i]):
                raise ValueError(f"table {i} must be (256, {widths[i]})")

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(sub_dims(self.dim, self.m)))).astype(np.int64)

    def chunks(self, x: np.ndarray) -> list:
        off = self.offsets
        return [x[off[j]: off[j + 1]] for j in range(self.m)]

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(CODEBOOK_MAGIC)
            f.write(struct.pack("<II", self.dim, self.m))
            for w in sub_dims(self.dim, self.m):
                f.write(struct.pack("<I", w))
            for table in self.centroids:
                f.write(np.ascontiguousarray(table, dtype=np.float32).tobytes())

    @classmethod
    def load(cls, path) -> "PQCodebook":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != CODEBOOK_MAGIC:
                raise FileFormatError(f"{path}: bad codebook magic {magic!r}")
            dim, m = struct.unpack("<II", f.read(8))
            widths = struct.unpack(f"<{m}I", f.read(4 * m))
            if tuple(widths) != sub_dims(dim, m):
                raise FileFormatError(f"{path}: sub-dimension table mismatch")
            tables = []
            for w in widths:
                buf = f.read(256 * w * 4)
                if len(buf) != 256 * w * 4:
                    raise FileFormatError(f"{path}: truncated centroid table")
                tables.append(np.frombuffer(buf, dtype=np.float32).reshape(256, w).copy())
        return cls(dim=dim, m=m, centroids=tables)


@dataclass
class PQCodes:
    """One m-byte code per point, aligned with an external id order."""

    codes: np.ndarray  # (count, m) uint8

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint8)
        if self.codes.ndim != 2:
            raise ValueError("codes must be 2-D")

    @property
    def count(self) -> int:
        return self.codes.shape[0]

    @property
    def m(self) -> int:
        return self.codes.shape[1]

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(CODES_MAGIC)
            f.write(struct.pack("<QI", self.count, self.m))
            f.write(self.codes.tobytes())

    @classmethod
    def load(cls, path) -> "PQCodes":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != CODES_MAGIC:
                raise FileFormatError(f"{path}: bad codes magic {magic!r}")
            count, m = struct.unpack("<QI", f.read(12))
            buf = f.read(count * m)
            if len(buf) != count * m:
                raise FileFormatError(f"{path}: truncated codes")
        return cls(codes=np.frombuffer(buf, dtype=np.uint8).reshape(count, m).copy())


def _kmeans(X: np.ndarray, k: int, iters: int, rng: np.random.Generator):
    """Seeded k-means with k-means++ init.

    If X has at most k distinct rows the centroids are exactly those rows
    (quantization is lossless). Empty clusters are re-seeded with the point
    farthest from its assigned centroid. Returns (centroids, history) where
    history holds the mean squared reconstruction error after each iteration.
    """
    X = np.ascontiguousarray(X, dtype=np.float32)
    distinct = np.unique(X, axis=0)
    if distinct.shape[0] <= k:
        pad = np.repeat(distinct[-1:], k - distinct.shape[0], axis=0)
        return np.vstack([distinct, pad]).astype(np.float32), []

    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]), dtype=np.float32)
    centroids[0] = X[rng.integers(n)]
    d2 = _sq_dists_to(X, centroids[0])
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i:] = X[rng.integers(n, size=k - i)]
            break
        probs = d2 / total
        centroids[i] = X[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, _sq_dists_to(X, centroids[i]))

    history = []
    for _ in range(iters):
        assign, dist_sq = _assign(X, centroids)
        for c in range(k):
            mask = assign == c
            if mask.any():
                centroids[c] = X[mask].mean(axis=0)
            else:
                far = int(np.argmax(dist_sq))
                centroids[c] = X[far]
                dist_sq[far] = 0.0
        _, dist_sq = _assign(X, centroids)
        history.append(float(dist_sq.mean()))
    return centroids, history


def _sq_dists_to(X, c):
    diff = X - c
    return np.einsum("ij,ij->i", diff, diff, dtype=np.float64)


def _assign(X, centroids, chunk=16384):
    """Nearest-centroid assignment, ties to the lowest index."""
    n = X.shape[0]
    assign = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    c2 = np.einsum("ij,ij->i", centroids, centroids, dtype=np.float64)[None, :]
    ct = centroids.astype(np.float64).T
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        part = X[lo:hi].astype(np.float64)
        d2 = np.maximum(
            np.einsum("ij,ij->i", part, part)[:, None] + c2 - 2.0 * (part @ ct), 0.0
        )
        assign[lo:hi] = np.argmin(d2, axis=1)
        best[lo:hi] = d2[np.arange(hi - lo), assign[lo:hi]]
    return assign, best


def train_codebook(vs, m: int, iters: int = 15, seed: int = 0) -> PQCodebook:
    """Train one 256-centroid k-means codebook per subspace.

    Deterministic for a given seed. The aggregate per-iteration objective is
    left on the returned codebook as ``train_history``.
    """
    data = vs.data if isinstance(vs, VectorSet) else np.asarray(vs, dtype=np.float32)
    if data.shape[0] < 1:
        raise ValueError("need at least one training vector")
    dim = data.shape[1]
    widths = sub_dims(dim, m)
    offsets = np.concatenate(([0], np.cumsum(widths)))
    tables = []
    histories = []
    for j in range(m):
        rng = np.random.default_rng(seed + j)
        chunk = data[:, offsets[j]: offsets[j + 1]]
        table, history = _kmeans(chunk, 256, iters, rng)
        tables.append(table)
        if history:
            histories.append(history)
    cb = PQCodebook(dim=dim, m=m, centroids=tables)
    cb.train_history = (
        [float(sum(vals)) for vals in zip(*histories)] if histories else []
    )
    return cb


def encode(cb: PQCodebook, data: np.ndarray) -> PQCodes:
    """Encode vectors: per subspace, index of the nearest centroid."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float32))
    if data.shape[1] != cb.dim:
        raise ValueError(f"dim mismatch: {data.shape[1]} vs {cb.dim}")
    offsets = cb.offsets
    codes = np.empty((data.shape[0], cb.m), dtype=np.uint8)
    for j in range(cb.m):
        chunk = data[:, offsets[j]: offsets[j + 1]]
        assign, _ = _assign(chunk, cb.centroids[j])
        codes[:, j] = assign.astype(np.uint8)
    return PQCodes(codes=codes)


def reconstruct(cb: PQCodebook, codes: np.ndarray) -> np.ndarray:
    """Decode codes back to centroid concatenations."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.uint8))
    out = np.empty((codes.shape[0], cb.dim), dtype=np.float32)
    offsets = cb.offsets
    for j in range(cb.m):
        out[:, offsets[j]: offsets[j + 1]] = cb.centroids[j][codes[:, j]]
    return out


class AdcTable:
    """Per-query lookup table of squared subspace distances (m x 256)."""

    def __init__(self, cb: PQCodebook, q: np.ndarray):
        q = np.ascontiguousarray(q, dtype=np.float32)
        if q.shape != (cb.dim,):
            raise ValueError(f"dim mismatch: {q.shape} vs ({cb.dim},)")
        self.m = cb.m
        self.lut = np.empty((cb.m, 256), dtype=np.float64)
        offsets = cb.offsets
        for j in range(cb.m):
            kernels.chunk_sq_dists(cb.centroids[j], q[offsets[j]: offsets[j + 1]],
                                   self.lut[j])

    def lookup_sq(self, codes: np.ndarray) -> np.ndarray:
        """Squared asymmetric distances for a batch of codes."""
        codes = np.atleast_2d(codes)
        out = np.empty(codes.shape[0], dtype=np.float64)
        kernels.adc_batch(self.lut, np.ascontiguousarray(codes, dtype=np.uint8), out)
        return out

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        return np.sqrt(self.lookup_sq(codes))


def asymmetric_distance(cb: PQCodebook, q: np.ndarray, code: np.ndarray) -> float:
    """LUT-free asymmetric distance; bit-identical to the AdcTable path."""
    q = np.ascontiguousarray(q, dtype=np.float32)
    if q.shape != (cb.dim,):
        raise ValueError(f"dim mismatch: {q.shape} vs ({cb.dim},)")
    code = np.asarray(code, dtype=np.uint8).reshape(cb.m)
    offsets = cb.offsets
    scratch = np.empty(256, dtype=np.float64)
    total = 0.0
    for j in range(cb.m):
        kernels.chunk_sq_dists(cb.centroids[j], q[offsets[j]: offsets[j + 1]], scratch)
        total += scratch[code[j]]
    return float(np.sqrt(total))
