"""In-memory dynamic graph index: best-first search, relaxed pruning,
incremental inserts, lazy deletes, and batch delete consolidation.

Storage is array-backed so the traversal kernels can run jitted: vectors in a
(capacity, dim) float32 block, adjacency in a (capacity, R) int32 block with a
degree array. Rows freed by consolidation are recycled through a free list.

Concurrency contract: concurrent inserts and searches are supported. Searches
take no locks (they snapshot array references; adjacency writes keep rows
valid at every instant). Inserts serialize per touched node, and consolidation
excludes inserts for its duration.
"""

from __future__ import annotations

import struct
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import FileFormatError, VectorSet

SNAPSHOT_MAGIC = b"FVG1"
_NO_START = 0xFFFFFFFFFFFFFFFF


class _RWLock:
    """Many readers (inserts) or one writer (consolidation, array growth)."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writing = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writing:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if self._readers == 0:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writing or self._readers:
                self._cond.wait()
            self._writing = True
        try:
            yield
        finally:
            with self._cond:
                self._writing = False
                self._cond.notify_all()


@dataclass
class SearchResult:
    """Outcome of one search: ids closest-first, the expanded node set, and
    the number of distance evaluations performed."""

    top_k: list
    dists: np.ndarray
    visited: set
    comparisons: int


@dataclass
class PruneStats:
    """Per-call prune instrumentation (candidate sizes, wall time)."""

    sizes: list = field(default_factory=list)
    times: list = field(default_factory=list)


class DynGraph:
    """Dynamic nearest-neighbor graph with bounded out-degree.

    Args:
        dim: Vector dimensionality.
        R: Maximum out-degree.
        alpha: Prune relaxation factor (>= 1); larger keeps denser graphs.
        L_c: Candidate list size used by insert-time searches.
    """

    def __init__(self, dim: int, R: int = 32, alpha: float = 1.2,
                 L_c: int = 50, capacity: int = 1024):
        if alpha < 1.0:
            raise ValueError("alpha must be >= 1")
        if R < 1:
            raise ValueError("R must be >= 1")
        self.dim = dim
        self.R = R
        self.alpha = float(alpha)
        self.L_c = L_c

        capacity = max(capacity, 8)
        self._vecs = np.zeros((capacity, dim), dtype=np.float32)
        self._adj = np.zeros((capacity, R), dtype=np.int32)
        self._deg = np.zeros(capacity, dtype=np.int32)
        self._ids = np.full(capacity, -1, dtype=np.int64)
        self._del_mask = np.zeros(capacity, dtype=np.uint8)

        self._row_of: dict = {}
        self._deleted: set = set()
        self._start_row = -1
        self._n_rows = 0
        self._free: list = []

        self._locks = [threading.Lock() for _ in range(capacity)]
        self._alloc_lock = threading.Lock()
        self._del_lock = threading.Lock()
        self._struct = _RWLock()
        self._scratch = threading.local()

    # -- basic views ------------------------------------------------------

    @property
    def node_count(self) -> int:
        """Nodes present in the graph, including ones on the delete list."""
        return len(self._row_of)

    @property
    def live_count(self) -> int:
        return len(self._row_of) - len(self._deleted)

    @property
    def start(self):
        return int(self._ids[self._start_row]) if self._start_row >= 0 else None

    @property
    def delete_list(self) -> set:
        return set(self._deleted)

    def __contains__(self, node_id) -> bool:
        return int(node_id) in self._row_of

    def node_ids(self) -> list:
        return list(self._row_of.keys())

    def vector(self, node_id) -> np.ndarray:
        return self._vecs[self._row_of[int(node_id)]].copy()

    def neighbors(self, node_id) -> list:
        row = self._row_of[int(node_id)]
        return [int(self._ids[r]) for r in self._adj[row, : self._deg[row]]]

    def max_degree(self) -> int:
        rows = list(self._row_of.values())
        return int(self._deg[rows].max()) if rows else 0

    def live_vectors(self) -> VectorSet:
        """Non-deleted nodes as a VectorSet (ascending id order)."""
        ids = sorted(i for i in self._row_of if i not in self._deleted)
        rows = [self._row_of[i] for i in ids]
        return VectorSet(self.dim, self._vecs[rows].copy(),
                         np.array(ids, dtype=np.uint64))

    # -- internal helpers --------------------------------------------------

    def _refs(self):
        return self._vecs, self._adj, self._deg, self._n_rows

    def _thread_scratch(self, n):
        s = self._scratch
        if getattr(s, "in_stamp", None) is None or len(s.in_stamp) < n:
            size = max(n, 1024)
            s.in_stamp = np.zeros(size, dtype=np.int64)
            s.vis_stamp = np.zeros(size, dtype=np.int64)
            s.gen = 0
        return s

    def _search_rows(self, q, L, refs=None):
        """Run the traversal kernel; returns candidate and visited row arrays."""
        vecs, adj, deg, n = refs or self._refs()
        q = np.ascontiguousarray(q, dtype=np.float32)
        s = self._thread_scratch(len(vecs))
        s.gen += 1
        cand_rows = np.empty(L, dtype=np.int32)
        cand_d = np.empty(L, dtype=np.float64)
        # sized by capacity, not row count: rows allocated by concurrent
        # inserts can become reachable while this search runs
        vis_rows = np.empty(len(vecs) + 1, dtype=np.int32)
        vis_d = np.empty(len(vecs) + 1, dtype=np.float64)
        size, nvis, comps = kernels.greedy_search(
            vecs, adj, deg, q, self._start_row, L,
            cand_rows, cand_d, vis_rows, vis_d,
            s.in_stamp, s.vis_stamp, s.gen)
        return (cand_rows[:size], cand_d[:size],
                vis_rows[:nvis], vis_d[:nvis], comps)

    def _prune_rows(self, base_vec, cand_rows, alpha, R, refs=None,
                    stats: PruneStats | None = None):
        """Prune a candidate row set against a base vector.

        cand_rows must be deduplicated and must not contain the base node's
        own row; it is sorted ascending here so distance ties resolve to the
        lower row (insertion order gives ascending ids in fresh builds).
        Returns selected rows in selection order.
        """
        if cand_rows.size == 0:
            return cand_rows.astype(np.int32)
        vecs = (refs or self._refs())[0]
        cand_rows = np.sort(cand_rows).astype(np.int64)
        cand_vecs = np.ascontiguousarray(vecs[cand_rows])
        dists = kernels.l2_sq_batch(cand_vecs, np.ascontiguousarray(base_vec, dtype=np.float32))
        sel = np.empty(min(R, cand_rows.size), dtype=np.int64)
        if stats is not None:
            t0 = time.perf_counter_ns()
            nsel = kernels.robust_prune(cand_vecs, dists, alpha * alpha, R, sel)
            stats.times.append(time.perf_counter_ns() - t0)
            stats.sizes.append(int(cand_rows.size))
        else:
            nsel = kernels.robust_prune(cand_vecs, dists, alpha * alpha, R, sel)
        return cand_rows[sel[:nsel]].astype(np.int32)

    def _write_adjacency(self, row, neighbor_rows):
        # entries first, degree last: concurrent readers see a valid prefix
        n = len(neighbor_rows)
        self._adj[row, :n] = neighbor_rows
        self._deg[row] = n

    def _alloc_row(self, node_id, x):
        with self._alloc_lock:
            if self._free:
                row = self._free.pop()
            elif self._n_rows < len(self._ids):
                row = self._n_rows
                self._n_rows += 1
            else:
                return -1
            self._ids[row] = node_id
        self._vecs[row] = x
        self._deg[row] = 0
        return row

    def _grow(self, needed):
        with self._struct.write():
            cap = len(self._ids)
            if cap >= needed:
                return
            new_cap = max(needed, cap * 2)
            for name in ("_vecs", "_adj"):
                old = getattr(self, name)
                fresh = np.zeros((new_cap, old.shape[1]), dtype=old.dtype)
                fresh[:cap] = old
                setattr(self, name, fresh)
            for name, fill in (("_deg", 0), ("_ids", -1), ("_del_mask", 0)):
                old = getattr(self, name)
                fresh = np.full(new_cap, fill, dtype=old.dtype)
                fresh[:cap] = old
                setattr(self, name, fresh)
            self._locks.extend(threading.Lock() for _ in range(new_cap - cap))

    def reserve(self, total: int) -> None:
        """Pre-size storage for an expected node count."""
        if total > len(self._ids):
            self._grow(total)

    # -- operations ---------------------------------------------------------

    def insert_point(self, x, node_id) -> None:
        """Insert a vector under a new id.

        Searches the current graph for the insertion neighborhood, prunes it
        to at most R out-neighbors, then adds the reverse edges (pruning any
        neighbor whose degree would exceed R).
        """
        node_id = int(node_id)
        x = np.ascontiguousarray(x, dtype=np.float32)
        if x.shape != (self.dim,):
            raise ValueError(f"dim mismatch: {x.shape} vs ({self.dim},)")
        if node_id in self._row_of:
            raise ValueError(f"duplicate id {node_id}")

        while True:
            if self._n_rows + 1 > len(self._ids) and not self._free:
                self._grow(self._n_rows + 1)
            with self._struct.read():
                row = self._alloc_row(node_id, x)
                if row < 0:
                    continue
                refs = self._refs()
                with self._alloc_lock:
                    if self._start_row < 0:
                        self._start_row = row
                        self._row_of[node_id] = row
                        return
                _, _, vis_rows, _, _ = self._search_rows(x, self.L_c, refs=refs)
                cand = vis_rows[vis_rows != row].astype(np.int64)
                selected = self._prune_rows(x, np.unique(cand), self.alpha, self.R, refs=refs)
                with self._locks[row]:
                    self._write_adjacency(row, selected)
                for j in selected:
                    j = int(j)
                    with self._locks[j]:
                        dj = int(self._deg[j])
                        current = self._adj[j, :dj]
                        if row in current:
                            continue
                        if dj < self.R:
                            self._adj[j, dj] = row
                            self._deg[j] = dj + 1
                        else:
                            cand_j = np.unique(np.append(current.astype(np.int64), row))
                            cand_j = cand_j[cand_j != j]
                            sel_j = self._prune_rows(self._vecs[j], cand_j,
                                                     self.alpha, self.R, refs=refs)
                            self._write_adjacency(j, sel_j)
                self._row_of[node_id] = row
                return

    def greedy_search(self, q, k: int, L: int, filter_deleted: bool = True) -> SearchResult:
        """Best-first search returning the k closest ids.

        Delete-listed nodes are used for navigation; with filter_deleted they
        are excluded from top_k (but still appear in the visited set).
        """
        if self._start_row < 0:
            raise ValueError("search on empty graph")
        if k > L:
            raise ValueError(f"k={k} exceeds L={L}")
        refs = self._refs()
        cand_rows, cand_d, vis_rows, vis_d, comps = self._search_rows(q, L, refs=refs)
        rows = np.concatenate([cand_rows, vis_rows])
        dists = np.concatenate([cand_d, vis_d])
        rows, first = np.unique(rows, return_index=True)
        dists = dists[first]
        if filter_deleted:
            keep = self._del_mask[rows] == 0
            rows, dists = rows[keep], dists[keep]
        ids = self._ids[rows]
        order = np.lexsort((ids, dists))[:k]
        return SearchResult(
            top_k=[int(i) for i in ids[order]],
            dists=np.sqrt(dists[order]),
            visited={int(self._ids[r]) for r in vis_rows},
            comparisons=int(comps),
        )

    def robust_prune(self, node_id, candidate_ids, alpha=None, R=None) -> list:
        """Replace node_id's out-neighbors with a pruned candidate subset.

        Repeatedly keeps the closest remaining candidate and discards every
        candidate it dominates under the alpha rule; stops at R neighbors.
        Returns the new neighbor ids in selection order.
        """
        node_id = int(node_id)
        alpha = self.alpha if alpha is None else float(alpha)
        R = self.R if R is None else int(R)
        if alpha < 1.0:
            raise ValueError("alpha must be >= 1")
        row = self._row_of[node_id]
        cand = np.unique(np.array(
            [self._row_of[int(c)] for c in candidate_ids], dtype=np.int64))
        cand = cand[cand != row]
        selected = self._prune_rows(self._vecs[row], cand, alpha, min(R, self.R))
        with self._locks[row]:
            self._write_adjacency(row, selected)
        return [int(self._ids[r]) for r in selected]

    def delete_point(self, node_id) -> None:
        """Mark a node deleted: O(1), the graph structure is untouched."""
        node_id = int(node_id)
        with self._del_lock:
            row = self._row_of.get(node_id)
            if row is None:
                raise KeyError(f"unknown id {node_id}")
            if node_id in self._deleted:
                raise ValueError(f"id {node_id} already deleted")
            self._deleted.add(node_id)
            self._del_mask[row] = 1

    def consolidate_deletes(self, policy: str = "fresh",
                            stats: PruneStats | None = None) -> None:
        """Remove delete-listed nodes from the graph.

        "fresh" patches every survivor that pointed at a deleted node with
        pruned second-hop candidates; "policy_a" drops the edges with no
        compensation. Excludes concurrent inserts for the duration.
        """
        if policy not in ("fresh", "policy_a"):
            raise ValueError(f"unknown policy {policy!r}")
        with self._struct.write():
            if not self._deleted:
                return
            dead_rows = np.array(sorted(self._row_of[i] for i in self._deleted),
                                 dtype=np.int64)
            live_rows = np.array(sorted(r for i, r in self._row_of.items()
                                        if i not in self._deleted), dtype=np.int64)
            dead = np.zeros(len(self._ids), dtype=bool)
            dead[dead_rows] = True

            for p in live_rows:
                p = int(p)
                nbrs = self._adj[p, : self._deg[p]]
                gone = dead[nbrs]
                if not gone.any():
                    continue
                keep = nbrs[~gone].astype(np.int64)
                if policy == "policy_a":
                    self._write_adjacency(p, keep)
                    continue
                second = [self._adj[int(v), : self._deg[int(v)]] for v in nbrs[gone]]
                cand = np.unique(np.concatenate([keep] + second).astype(np.int64))
                cand = cand[~dead[cand]]
                cand = cand[cand != p]
                selected = self._prune_rows(self._vecs[p], cand, self.alpha,
                                            self.R, stats=stats)
                self._write_adjacency(p, selected)

            start_was_deleted = self._start_row >= 0 and dead[self._start_row]
            old_start_vec = self._vecs[self._start_row].copy() if start_was_deleted else None

            for node_id in self._deleted:
                row = self._row_of.pop(node_id)
                self._deg[row] = 0
                self._ids[row] = -1
                self._del_mask[row] = 0
                self._free.append(row)
            self._deleted.clear()

            if start_was_deleted:
                if live_rows.size:
                    d = kernels.l2_sq_batch(
                        np.ascontiguousarray(self._vecs[live_rows]), old_start_vec)
                    self._start_row = int(live_rows[int(np.argmin(d))])
                else:
                    self._start_row = -1

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        """Snapshot to disk: header, per-node records, sorted delete list."""
        ids = sorted(self._row_of)
        start = self.start
        with open(path, "wb") as f:
            f.write(SNAPSHOT_MAGIC)
            f.write(struct.pack("<IIQIfQ", 1, self.dim, len(ids), self.R,
                                self.alpha, _NO_START if start is None else start))
            for node_id in ids:
                row = self._row_of[node_id]
                deg = int(self._deg[row])
                f.write(struct.pack("<Q", node_id))
                f.write(self._vecs[row].tobytes())
                f.write(struct.pack("<I", deg))
                nbr_ids = self._ids[self._adj[row, :deg]].astype(np.uint64)
                f.write(nbr_ids.tobytes())
            deleted = sorted(self._deleted)
            f.write(struct.pack("<Q", len(deleted)))
            f.write(np.array(deleted, dtype=np.uint64).tobytes())

    @classmethod
    def load(cls, path, L_c: int = 50) -> "DynGraph":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != SNAPSHOT_MAGIC:
                raise FileFormatError(f"{path}: bad snapshot magic {magic!r}")
            version, dim, count, R, alpha, start = struct.unpack("<IIQIfQ", f.read(32))
            if version != 1:
                raise FileFormatError(f"{path}: unsupported version {version}")
            g = cls(dim=dim, R=R, alpha=alpha, L_c=L_c, capacity=count + 8)
            records = []
            for _ in range(count):
                (node_id,) = struct.unpack("<Q", f.read(8))
                vec = np.frombuffer(f.read(4 * dim), dtype=np.float32).copy()
                (deg,) = struct.unpack("<I", f.read(4))
                nbrs = np.frombuffer(f.read(8 * deg), dtype=np.uint64)
                records.append((node_id, vec, nbrs))
            (ndel,) = struct.unpack("<Q", f.read(8))
            deleted = np.frombuffer(f.read(8 * ndel), dtype=np.uint64)

        for row, (node_id, vec, _) in enumerate(records):
            g._ids[row] = node_id
            g._vecs[row] = vec
            g._row_of[int(node_id)] = row
        g._n_rows = len(records)
        for row, (_, _, nbrs) in enumerate(records):
            rows = np.array([g._row_of[int(n)] for n in nbrs], dtype=np.int32)
            g._write_adjacency(row, rows)
        if start != _NO_START:
            g._start_row = g._row_of[int(start)]
        for node_id in deleted:
            g.delete_point(int(node_id))
        return g


def medoid_index(vs: VectorSet, sample_cap: int = 10000, seed: int = 0) -> int:
    """Index of the point minimizing total distance to a capped sample."""
    rng = np.random.default_rng(seed)
    n = vs.count
    sample = vs.data if n <= sample_cap else vs.data[
        rng.choice(n, sample_cap, replace=False)]
    s2 = np.einsum("ij,ij->i", sample, sample, dtype=np.float64)
    st = sample.astype(np.float64).T
    best_row, best_sum = 0, np.inf
    for lo in range(0, n, 2048):
        part = vs.data[lo: lo + 2048].astype(np.float64)
        d2 = np.maximum(
            np.einsum("ij,ij->i", part, part)[:, None] + s2[None, :] - 2.0 * (part @ st),
            0.0,
        )
        sums = np.sqrt(d2).sum(axis=1)
        i = int(np.argmin(sums))
        if sums[i] < best_sum:
            best_sum, best_row = float(sums[i]), lo + i
    return best_row


def build_static(vs: VectorSet, R: int = 32, L_c: int = 50, alpha: float = 1.2,
                 passes: int = 1, seed: int = 0) -> DynGraph:
    """Build a graph over a fixed set: medoid start, sequential inserts,
    plus an optional second refinement pass over every node."""
    if vs.count < 1:
        raise ValueError("cannot build over an empty set")
    if passes not in (1, 2):
        raise ValueError("passes must be 1 or 2")
    g = DynGraph(dim=vs.dim, R=R, alpha=alpha, L_c=L_c, capacity=vs.count + 64)
    m = medoid_index(vs, seed=seed)
    g.insert_point(vs.data[m], int(vs.ids[m]))
    for i in range(vs.count):
        if i != m:
            g.insert_point(vs.data[i], int(vs.ids[i]))
    if passes == 2:
        for i in range(vs.count):
            node_id = int(vs.ids[i])
            row = g._row_of[node_id]
            x = g._vecs[row]
            refs = g._refs()
            _, _, vis_rows, _, _ = g._search_rows(x, L_c, refs=refs)
            cand = np.unique(np.concatenate(
                [vis_rows.astype(np.int64),
                 g._adj[row, : g._deg[row]].astype(np.int64)]))
            cand = cand[cand != row]
            selected = g._prune_rows(x, cand, alpha, R, refs=refs)
            with g._locks[row]:
                g._write_adjacency(row, selected)
            for j in selected:
                j = int(j)
                with g._locks[j]:
                    dj = int(g._deg[j])
                    current = g._adj[j, :dj]
                    if row in current:
                        continue
                    if dj < R:
                        g._adj[j, dj] = row
                        g._deg[j] = dj + 1
                    else:
                        cand_j = np.unique(np.append(current.astype(np.int64), row))
                        cand_j = cand_j[cand_j != j]
                        sel_j = g._prune_rows(g._vecs[j], cand_j, alpha, R, refs=refs)
                        g._write_adjacency(j, sel_j)
    return g
