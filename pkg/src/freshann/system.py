"""Orchestration of the full engine: a mutable in-memory graph for fresh
inserts, frozen read-only graphs awaiting merge, a global delete list, the
disk index, a redo log for crash recovery, and background merges with an
atomic handle swap.

Every insert and delete is logged before it is applied; the log group-flushes
every flush_ops operations or flush_interval_ms milliseconds, and an
operation is considered durable once its bytes are flushed. Searches fan out
to the disk index and every in-memory graph, merge by distance, drop
delete-listed ids, and deduplicate by id.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import pq
from .core import VectorSet
from .disk import DiskIndex, write_index
from .graph import DynGraph, SearchResult, _RWLock, build_static
from .merge import MergeJob, MergeParams, StreamMerger
from .redolog import OP_DELETE, OP_INSERT, RedoLog, replay

MANIFEST = "manifest.json"
LOG_FILE = "redo.log"


@dataclass
class SystemConfig:
    dim: int
    R: int = 32
    alpha: float = 1.2
    L_c: int = 50
    pq_m: int = 16
    temp_cap: int = 10000               # M: merge when frozen graphs hold this many points
    snapshot_threshold: int = 0         # 0 -> temp_cap // 6
    merge_workers: int = 1
    beam_width: int = 4
    block_sectors: int = 128
    default_L_s: int = 50
    flush_ops: int = 64
    flush_interval_ms: float = 5.0

    def __post_init__(self):
        if self.snapshot_threshold <= 0:
            self.snapshot_threshold = max(1, self.temp_cap // 6)


class FreshSystem:
    """One engine instance rooted at a directory.

    Use create() for a fresh directory (optionally bootstrapping the disk
    index from an initial VectorSet) and recover() to reopen after a crash or
    clean shutdown.
    """

    def __init__(self, root, config: SystemConfig, lti, ros, deleted,
                 log: RedoLog, next_id: int, lti_gen: int, rw_offset: int):
        self.root = str(root)
        self.config = config
        self.lti: DiskIndex | None = lti
        self.rw = self._new_rw()
        self.ros: list = ros            # [(snapshot_path, DynGraph)]
        self.deleted: set = deleted
        self.log = log
        self.next_id = next_id
        self._lti_gen = lti_gen
        self._rw_offset = rw_offset     # log offset the mutable graph replays from
        self.codebook = lti.codebook if lti else None

        self._id_lock = threading.Lock()
        self._log_lock = threading.Lock()
        self._swap = _RWLock()          # readers: insert; writer: handle swaps
        self._merge_lock = threading.Lock()
        self._merge_thread = None
        self._retired: list = []
        seqs = [int(os.path.basename(p)[3:7]) for p, _ in ros]
        self._ro_seq = max(seqs) + 1 if seqs else 0
        self._ops_since_flush = 0
        self._last_flush = time.monotonic()
        self._closed = False
        self.merge_reports: list = []

    # -- construction -------------------------------------------------------

    @classmethod
    def create(cls, root, config: SystemConfig, initial: VectorSet | None = None,
               seed: int = 0) -> "FreshSystem":
        os.makedirs(root, exist_ok=True)
        if os.path.exists(os.path.join(root, MANIFEST)):
            raise FileExistsError(f"{root} already holds an engine; use recover()")
        log = RedoLog(os.path.join(root, LOG_FILE), create=True)
        lti = None
        lti_gen = 0
        next_id = 0
        if initial is not None and initial.count:
            if initial.dim != config.dim:
                raise ValueError("initial set dimension mismatch")
            codebook = pq.train_codebook(initial, m=config.pq_m, seed=seed)
            graph = build_static(initial, R=config.R, L_c=config.L_c,
                                 alpha=config.alpha, seed=seed)
            lti = write_index(graph, codebook, os.path.join(root, "lti_0000"))
            next_id = int(initial.ids.max()) + 1
        sys = cls(root, config, lti, [], set(), log, next_id, lti_gen,
                  rw_offset=log.offset)
        sys._write_manifest()
        return sys

    @classmethod
    def recover(cls, root) -> "FreshSystem":
        """Reload snapshots and replay the log suffix; a torn final record is
        dropped by the log's checksum scan."""
        with open(os.path.join(root, MANIFEST)) as f:
            m = json.load(f)
        config = SystemConfig(**m["config"])
        lti = DiskIndex.open(os.path.join(root, m["lti_path"])) if m["lti_path"] else None
        ros = []
        for name in m["ro_snapshots"]:
            path = os.path.join(root, name)
            ros.append((path, DynGraph.load(path, L_c=config.L_c)))
        deleted = {int(d) for d in m["delete_snapshot"]}
        log = RedoLog(os.path.join(root, LOG_FILE))
        sys = cls(root, config, lti, ros, deleted, log,
                  int(m["next_id"]), int(m["lti_gen"]),
                  rw_offset=int(m["rw_log_offset"]))
        max_id = sys.next_id - 1
        for rec in replay(log.path, config.dim, from_offset=int(m["rw_log_offset"])):
            if rec.opcode == OP_INSERT:
                sys.rw.insert_point(rec.vector, rec.node_id)
                max_id = max(max_id, rec.node_id)
        for rec in replay(log.path, config.dim, from_offset=int(m["delete_log_offset"])):
            if rec.opcode == OP_DELETE:
                sys.deleted.add(rec.node_id)
                max_id = max(max_id, rec.node_id)
        sys.next_id = max_id + 1
        return sys

    def _new_rw(self) -> DynGraph:
        c = self.config
        return DynGraph(dim=c.dim, R=c.R, alpha=c.alpha, L_c=c.L_c,
                        capacity=max(c.snapshot_threshold + 64, 256))

    def _write_manifest(self):
        with self._log_lock:
            self.log.flush()
            manifest = {
                "version": 1,
                "config": asdict(self.config),
                "next_id": self.next_id,
                "lti_path": os.path.basename(self.lti.path) if self.lti else None,
                "lti_gen": self._lti_gen,
                "ro_snapshots": [os.path.basename(p) for p, _ in self.ros],
                "rw_log_offset": self._rw_offset,
                "delete_snapshot": sorted(self.deleted),
                "delete_log_offset": self.log.offset,
            }
        tmp = os.path.join(self.root, MANIFEST + ".tmp")
        with open(tmp, "w") as f:
            json.dump(manifest, f)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, os.path.join(self.root, MANIFEST))

    # -- API ------------------------------------------------------------------

    def insert(self, x) -> int:
        """Log, then insert into the mutable graph; returns the new id.
        Triggers a freeze once the graph reaches the snapshot threshold and a
        background merge once frozen graphs reach the temp cap."""
        if self._closed:
            raise RuntimeError("shutdown in progress")
        x = np.ascontiguousarray(x, dtype=np.float32)
        if x.shape != (self.config.dim,):
            raise ValueError(f"dim mismatch: {x.shape} vs ({self.config.dim},)")
        self._backpressure()
        with self._id_lock:
            node_id = self.next_id
            self.next_id += 1
        with self._log_lock:
            self.log.append_insert(node_id, x)
            self._maybe_flush()
        with self._swap.read():
            self.rw.insert_point(x, node_id)
        if self.rw.node_count >= self.config.snapshot_threshold:
            self.freeze_rw()
        if self._frozen_points() >= self.config.temp_cap:
            self.run_merge(background=True)
        return node_id

    def delete(self, node_id: int) -> None:
        """Log, then add to the delete list; O(1), no graph mutation."""
        if self._closed:
            raise RuntimeError("shutdown in progress")
        node_id = int(node_id)
        if node_id in self.deleted:
            raise ValueError(f"id {node_id} already deleted")
        if not self._knows(node_id):
            raise KeyError(f"unknown id {node_id}")
        with self._log_lock:
            self.log.append_delete(node_id)
            self._maybe_flush()
        self.deleted.add(node_id)

    def search(self, q, k: int, L_s: int | None = None) -> SearchResult:
        """Fan out to the disk index and every in-memory graph, merge by
        distance, drop deleted ids, deduplicate by id, return the top k."""
        L_s = L_s or self.config.default_L_s
        if k > L_s:
            raise ValueError(f"k={k} exceeds L_s={L_s}")
        q = np.ascontiguousarray(q, dtype=np.float32)
        lti = self.lti
        graphs = [g for _, g in self.ros] + [self.rw]
        if (lti is None or lti.live_count == 0) and not any(g.node_count for g in graphs):
            raise ValueError("search on empty system")

        best: dict = {}
        visited: set = set()
        comparisons = 0
        if lti is not None and lti.live_count:
            res, _ = lti.beam_search(q, k, L_s, self.config.beam_width,
                                     filter_ids=self.deleted)
            comparisons += res.comparisons
            visited |= res.visited
            for node_id, d in zip(res.top_k, res.dists):
                if d < best.get(node_id, np.inf):
                    best[node_id] = float(d)
        for g in graphs:
            if not g.node_count:
                continue
            res = g.greedy_search(q, k, L_s, filter_deleted=True)
            comparisons += res.comparisons
            visited |= res.visited
            for node_id, d in zip(res.top_k, res.dists):
                if node_id in self.deleted:
                    continue
                if d < best.get(node_id, np.inf):
                    best[node_id] = float(d)
        ranked = sorted(best.items(), key=lambda t: (t[1], t[0]))[:k]
        return SearchResult(
            top_k=[i for i, _ in ranked],
            dists=np.array([d for _, d in ranked]),
            visited=visited,
            comparisons=comparisons,
        )

    def freeze_rw(self) -> None:
        """Convert the mutable graph into a frozen one, snapshot it, and
        install an empty mutable graph. Inserts are excluded only for the
        handle swap itself."""
        with self._swap.write():
            if self.rw.node_count == 0:
                return
            with self._log_lock:
                self.log.flush()
                self._rw_offset = self.log.offset
            frozen = self.rw
            self.rw = self._new_rw()
            path = os.path.join(self.root, f"ro_{self._ro_seq:04d}.fvg")
            self._ro_seq += 1
            self.ros.append((path, frozen))
        frozen.save(path)
        self._write_manifest()

    def run_merge(self, background: bool = False, wait: bool = False):
        """Fold frozen graphs and the delete list into the disk index, then
        swap handles atomically. One merge runs at a time; searches, inserts
        and deletes proceed throughout."""
        if background:
            if not self._merge_lock.acquire(blocking=False):
                return None
            t = threading.Thread(target=self._merge_guarded, daemon=True)
            self._merge_thread = t
            t.start()
            if wait:
                t.join()
            return t
        with self._merge_lock:
            return self._merge_once()

    def _merge_guarded(self):
        try:
            self._merge_once()
        except Exception:  # failed merge leaves the old index serving
            import traceback

            traceback.print_exc()
        finally:
            self._merge_lock.release()

    def _merge_once(self):
        with self._swap.write():
            ros = list(self.ros)
        lti = self.lti
        disk_ids = set(lti.slot_of) if lti else set()
        ro_ids = set()
        for _, g in ros:
            ro_ids |= set(g.node_ids())
        job_deletes = {d for d in self.deleted if d in disk_ids or d in ro_ids}
        if not ros and not job_deletes:
            return None

        new_points = _union_vectors(self.config.dim, [g for _, g in ros])
        self._lti_gen += 1
        out_path = os.path.join(self.root, f"lti_{self._lti_gen:04d}")
        if lti is None:
            final, report = self._bootstrap_index(new_points, job_deletes, out_path)
        else:
            job = MergeJob(
                index=lti, new_points=new_points, deletes=job_deletes,
                params=MergeParams(alpha=self.config.alpha, R=self.config.R,
                                   L_c=max(self.config.L_c, 2),
                                   beam_width=self.config.beam_width,
                                   block_sectors=self.config.block_sectors,
                                   workers=self.config.merge_workers),
                temp_graphs=[g for _, g in ros],
            )
            final, report = StreamMerger(job, out_path).run()
        self.merge_reports.append(report)

        old_paths = []
        with self._swap.write():
            old = self.lti
            self.lti = final
            self.codebook = final.codebook
            merged = {p for p, _ in ros}
            self.ros = [(p, g) for p, g in self.ros if p not in merged]
            self.deleted -= job_deletes
            if old is not None:
                self._retired.append(old)
                old_paths.append(old.path)
            old_paths.extend(p for p in merged)
        self._write_manifest()
        while len(self._retired) > 2:
            self._retired.pop(0).close()
        for p in old_paths:
            for suffix in ("", ".pq", ".pqcb", ".ids"):
                try:
                    os.remove(p + suffix)
                except OSError:
                    pass
        return report

    def _bootstrap_index(self, new_points: VectorSet, deletes, out_path):
        """First merge with no disk index yet: build the graph in memory."""
        keep = np.array([int(i) not in deletes for i in new_points.ids], dtype=bool)
        vs = VectorSet(new_points.dim, new_points.data[keep], new_points.ids[keep])
        codebook = self.codebook or pq.train_codebook(vs, m=self.config.pq_m)
        graph = build_static(vs, R=self.config.R, L_c=self.config.L_c,
                             alpha=self.config.alpha)
        final = write_index(graph, codebook, out_path)
        from .merge import MergeReport

        report = MergeReport()
        report.counts = {"input": 0, "deleted": len(deletes),
                         "inserted": int(vs.count), "output": int(final.live_count)}
        return final, report

    # -- bookkeeping -----------------------------------------------------------

    def _knows(self, node_id: int) -> bool:
        if self.lti is not None and node_id in self.lti.slot_of:
            return True
        if node_id in self.rw:
            return True
        return any(node_id in g for _, g in self.ros)

    def _frozen_points(self) -> int:
        return sum(g.node_count for _, g in self.ros)

    def temp_points(self) -> int:
        return self.rw.node_count + self._frozen_points()

    def live_ids(self) -> set:
        ids = set() if self.lti is None else set(self.lti.slot_of)
        ids |= set(self.rw.node_ids())
        for _, g in self.ros:
            ids |= set(g.node_ids())
        return ids - self.deleted

    def _backpressure(self):
        # hold inserts while temp structures are at twice the cap so the
        # background merge can drain them
        while self.temp_points() >= 2 * self.config.temp_cap:
            self.run_merge(background=True)
            time.sleep(0.005)

    def _maybe_flush(self):
        self._ops_since_flush += 1
        now = time.monotonic()
        if (self._ops_since_flush >= self.config.flush_ops
                or (now - self._last_flush) * 1000.0 >= self.config.flush_interval_ms):
            self.log.flush()
            self._ops_since_flush = 0
            self._last_flush = now

    def barrier(self) -> None:
        """Flush the log: everything acknowledged so far becomes durable."""
        with self._log_lock:
            self.log.flush()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        t = self._merge_thread
        if t is not None and t.is_alive():
            t.join()
        self._write_manifest()
        self.log.close()
        if self.lti is not None:
            self.lti.close()
        for h in self._retired:
            h.close()


def _union_vectors(dim: int, graphs) -> VectorSet:
    ids: list = []
    chunks = []
    for g in graphs:
        vs = g.live_vectors()
        if vs.count:
            ids.extend(int(i) for i in vs.ids)
            chunks.append(vs.data)
    if not chunks:
        return VectorSet(dim, np.zeros((0, dim), np.float32),
                         np.zeros(0, dtype=np.uint64))
    return VectorSet(dim, np.vstack(chunks), np.array(ids, dtype=np.uint64))
