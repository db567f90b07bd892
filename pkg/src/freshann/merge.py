"""Three-phase streaming merge folding in-memory inserts and a delete set
into the disk index, producing an index over (old ∪ new) \\ deleted.

Phase 1 (delete) streams the input body once, patching survivors that pointed
at deleted nodes with pruned second-hop candidates and tombstoning the
deleted slots; deleted neighborhoods are pre-cached with random reads so the
scan stays single-pass. Phase 2 (insert) beam-searches the intermediate for
every new point, stages its record in a spill file, and accumulates reverse
edges in the in-memory delta structure. Phase 3 (patch) streams the
intermediate once, folds the delta edges in (pruning only where the degree
bound would break), compacts tombstoned slots, and appends the staged
records.

The input body is read sequentially exactly twice and written exactly twice;
every prune during the merge measures distances on PQ-compressed candidates.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels, pq
from .core import VectorSet
from .disk import DiskIndex, DiskIndexWriter, _pack_record, _unpack_record
from .graph import PruneStats


@dataclass
class MergeParams:
    alpha: float = 1.2
    R: int = 32
    L_c: int = 75
    beam_width: int = 4
    block_sectors: int = 128
    workers: int = 1


@dataclass
class MergeJob:
    """One merge unit: the disk index, the new points, and the delete set.

    New-point ids must be disjoint from the index; every delete must target
    either the index or the new points. temp_graphs are only consulted when
    search_temp_indices is set (their visited sets then join the candidate
    pool of the insert phase).
    """

    index: DiskIndex
    new_points: VectorSet
    deletes: set
    params: MergeParams = field(default_factory=MergeParams)
    temp_graphs: list = field(default_factory=list)
    search_temp_indices: bool = False

    def validate(self):
        disk_ids = set(self.index.slot_of)
        new_ids = {int(i) for i in self.new_points.ids} if self.new_points.count else set()
        if disk_ids & new_ids:
            raise ValueError("new point ids must be disjoint from the index")
        stray = {int(d) for d in self.deletes} - disk_ids - new_ids
        if stray:
            raise ValueError(f"deletes target unknown ids: {sorted(stray)[:5]}")


class _AuxMeter:
    """Byte accounting for buffers the merge allocates, tracked by name."""

    def __init__(self):
        self._live = {}
        self.current = 0
        self.peak = 0
        self.phase_peaks = {}
        self._phase = None

    def phase(self, name):
        self._phase = name
        self.phase_peaks.setdefault(name, self.current)

    def alloc(self, name, nbytes):
        self.release(name)
        self._live[name] = int(nbytes)
        self.current += int(nbytes)
        self.peak = max(self.peak, self.current)
        if self._phase:
            self.phase_peaks[self._phase] = max(self.phase_peaks[self._phase], self.current)

    def release(self, name):
        if name in self._live:
            self.current -= self._live.pop(name)


@dataclass
class MergeReport:
    counts: dict = field(default_factory=dict)
    phase_seconds: dict = field(default_factory=dict)
    read_passes: int = 0
    write_passes: int = 0
    random_reads: int = 0
    spill_bytes: int = 0
    peak_aux_bytes: int = 0
    phase_peak_aux_bytes: dict = field(default_factory=dict)
    candidate_size_histogram: dict = field(default_factory=dict)
    delete_candidate_sizes: list = field(default_factory=list)
    delete_prune_ns: list = field(default_factory=list)

    def to_json(self, **extra) -> str:
        payload = {
            "counts": self.counts,
            "phase_seconds": self.phase_seconds,
            "read_passes": self.read_passes,
            "write_passes": self.write_passes,
            "random_reads": self.random_reads,
            "spill_bytes": self.spill_bytes,
            "peak_aux_bytes": self.peak_aux_bytes,
            "phase_peak_aux_bytes": self.phase_peak_aux_bytes,
            "candidate_size_histogram": self.candidate_size_histogram,
        }
        payload.update(extra)
        return json.dumps(payload, indent=2)


def estimate_delete_cost(n: int, R: int, beta: float):
    """Expected prune-candidate size and total delete-phase operations for a
    random delete fraction beta on a degree-R index of n points."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must be in [0, 1]")
    cand = R * (1.0 - beta) + R * R * beta * (1.0 - beta)
    ops = n * R * (1.0 - beta) ** 2 * (1.0 + R * beta)
    return cand, ops


class StreamMerger:
    """Runs the three phases for one MergeJob, with pass and memory
    instrumentation suitable for asserting the two-pass discipline."""

    def __init__(self, job: MergeJob, out_path, keep_intermediate: bool = False):
        job.validate()
        self.job = job
        self.out_path = str(out_path)
        if os.path.abspath(self.out_path) == os.path.abspath(job.index.path):
            raise ValueError("output path must differ from the input index")
        if job.params.R != job.index.R:
            raise ValueError(
                f"params.R={job.params.R} must match the index R={job.index.R}")
        self.intermediate_path = self.out_path + ".intermediate"
        self.spill_path = self.out_path + ".spill"
        self.keep_intermediate = keep_intermediate
        self.meter = _AuxMeter()
        self.report = MergeReport()
        self.delete_stats = PruneStats()
        self.patch_stats = PruneStats()
        cb = job.index.codebook
        # new ids surviving the delete set, in input order
        mask = np.array([int(i) not in job.deletes for i in job.new_points.ids],
                        dtype=bool) if job.new_points.count else np.zeros(0, bool)
        self.new_ids = job.new_points.ids[mask].astype(np.int64)
        self.new_vecs = np.ascontiguousarray(job.new_points.data[mask])
        self.new_codes = pq.encode(cb, self.new_vecs).codes if len(self.new_ids) else \
            np.zeros((0, cb.m), dtype=np.uint8)
        self.meter.alloc("staged_codes", self.new_codes.nbytes)

    # -- shared helpers -----------------------------------------------------

    def _prune_compressed(self, base_vec, cand_ids, cand_codes, stats: PruneStats):
        """Prune candidates using their PQ reconstructions for all distances.

        cand_ids only orders ties (ascending id); returns indices into the
        candidate arrays, in selection order.
        """
        order = np.argsort(cand_ids, kind="stable")
        cand_codes = cand_codes[order]
        cand_vecs = pq.reconstruct(self.job.index.codebook, cand_codes)
        base = np.ascontiguousarray(base_vec, dtype=np.float32)
        dists = kernels.l2_sq_batch(cand_vecs, base)
        sel = np.empty(min(self.job.params.R, len(cand_ids)), dtype=np.int64)
        t0 = time.perf_counter_ns()
        nsel = kernels.robust_prune(cand_vecs, dists,
                                    self.job.params.alpha ** 2,
                                    self.job.params.R, sel)
        stats.times.append(time.perf_counter_ns() - t0)
        stats.sizes.append(len(cand_ids))
        return order[sel[:nsel]]

    # -- phase 1: delete ------------------------------------------------------

    def delete_phase(self) -> DiskIndex:
        """Stream the input once, rebuilding survivors' neighborhoods around
        the deleted nodes and tombstoning the deleted slots."""
        t0 = time.time()
        self.meter.phase("delete")
        src = self.job.index
        dead_slots = {src.slot_of[int(d)] for d in self.job.deletes
                      if int(d) in src.slot_of}

        # random-read cache of deleted neighborhoods, freed after the scan
        cache = {}
        cache_bytes = 0
        for slot in dead_slots:
            _, nbrs = src.read_record(slot)
            keep = np.array([n for n in nbrs if n not in dead_slots], dtype=np.int32)
            cache[slot] = keep
            cache_bytes += keep.nbytes
        self.meter.alloc("delete_cache", cache_bytes)
        self.report.random_reads += len(dead_slots)

        old_start_vec = None
        if src.start_slot >= 0 and src.start_slot in dead_slots:
            vec, _ = src.read_record(src.start_slot)
            old_start_vec = np.ascontiguousarray(vec)
            self.report.random_reads += 1

        writer = DiskIndexWriter(self.intermediate_path, src.dim, src.R,
                                 src.sector_size, self.job.params.block_sectors)
        new_ids = src.ids.copy()
        codes = src.codes.codes

        def transform(slot, vec, nbrs):
            if src.ids[slot] < 0 or slot in dead_slots:
                new_ids[slot] = -1
                return None
            gone = [n for n in nbrs if int(n) in dead_slots]
            if not gone:
                return nbrs
            cand = {int(n) for n in nbrs if int(n) not in dead_slots}
            for v in gone:
                cand.update(int(x) for x in cache[int(v)])
            cand.discard(slot)
            cand -= dead_slots
            if not cand:
                return np.empty(0, dtype=np.int64)
            cand = np.fromiter(cand, dtype=np.int64)
            sel = self._prune_compressed(vec, src.ids[cand], codes[cand],
                                         self.delete_stats)
            return cand[sel]

        for batch in _scan_batches(src, self.job.params.block_sectors,
                                   self.job.params.workers, transform):
            for slot, vec, new_nbrs in batch:
                if new_nbrs is None:
                    writer.append_tombstone()
                else:
                    writer.append(vec, new_nbrs)

        self.meter.release("delete_cache")

        start_slot = src.start_slot
        if old_start_vec is not None:
            live = np.flatnonzero(new_ids >= 0)
            if live.size:
                lut = pq.AdcTable(src.codebook, old_start_vec)
                start_slot = int(live[int(np.argmin(lut.lookup_sq(codes[live])))])
            else:
                start_slot = -1
        intermediate = writer.finalize(start_slot, new_ids,
                                       pq.PQCodes(codes), src.codebook)
        self.report.phase_seconds["delete"] = time.time() - t0
        return intermediate

    # -- phase 2: insert -------------------------------------------------------

    def insert_phase(self, intermediate: DiskIndex):
        """Determine each new point's neighborhood by searching the
        intermediate, stage its record in the spill file, and record the
        reverse edges in the packed delta array. No writes touch the
        intermediate body."""
        t0 = time.time()
        self.meter.phase("insert")
        p = self.job.params
        live_slots = intermediate.live_slots()
        compact = np.full(intermediate.count, -1, dtype=np.int32)
        compact[live_slots] = np.arange(live_slots.size, dtype=np.int32)
        self.meter.alloc("compact_map", compact.nbytes)
        live_base = live_slots.size

        # total delta entries are bounded by |new| * R; capacity never exceeds it
        self._delta_cap = max(len(self.new_ids), 1) * p.R
        delta = np.empty(min(self._delta_cap, max(len(self.new_ids), 1) * 4),
                         dtype=np.int64)
        n_delta = 0
        self.meter.alloc("delta_edges", delta.nbytes)

        spill = open(self.spill_path, "wb")
        rec_bytes = 4 * intermediate.dim + 4 + 4 * p.R

        temp_lookup = {}
        if self.job.search_temp_indices:
            for g in self.job.temp_graphs:
                for nid in g.node_ids():
                    temp_lookup.setdefault(int(nid), g)
        new_pos = {int(i): pos for pos, i in enumerate(self.new_ids)}

        def locate(i):
            vec = self.new_vecs[i]
            if intermediate.live_count:
                res, stats = intermediate.beam_search(vec, 1, p.L_c, p.beam_width)
                visited_slots = sorted(intermediate.slot_of[v] for v in res.visited)
            else:
                visited_slots, stats = [], None
            cand_ids = [int(intermediate.ids[s]) for s in visited_slots]
            cand_refs = [("disk", s) for s in visited_slots]
            if self.job.search_temp_indices and self.job.temp_graphs:
                seen = set(cand_ids)
                for g in self.job.temp_graphs:
                    if g.node_count == 0:
                        continue
                    r = g.greedy_search(vec, 1, p.L_c, filter_deleted=False)
                    for v in r.visited:
                        v = int(v)
                        if v in seen or v == int(self.new_ids[i]) or v not in new_pos:
                            continue
                        if v in self.job.deletes:
                            continue
                        seen.add(v)
                        cand_ids.append(v)
                        cand_refs.append(("new", new_pos[v]))
            if not cand_ids:
                return i, [], stats
            cand_ids = np.array(cand_ids, dtype=np.int64)
            codes = np.empty((len(cand_refs), intermediate.codes.m), dtype=np.uint8)
            for j, (kind, ref) in enumerate(cand_refs):
                codes[j] = intermediate.codes.codes[ref] if kind == "disk" \
                    else self.new_codes[ref]
            sel = self._prune_compressed(vec, cand_ids, codes, PruneStats())
            return i, [cand_refs[s] for s in sel], stats

        chunk = max(64, p.workers * 16)
        for lo in range(0, len(self.new_ids), chunk):
            idxs = range(lo, min(lo + chunk, len(self.new_ids)))
            results = _parallel_map(locate, idxs, p.workers)
            for i, picks, stats in results:
                if stats:
                    self.report.random_reads += stats.ios
                final_nbrs = []
                for kind, ref in picks:
                    if kind == "disk":
                        final_nbrs.append(int(compact[ref]))
                        if n_delta == len(delta):
                            delta = _grow_delta(delta, self._delta_cap, self.meter)
                        delta[n_delta] = (int(ref) << 32) | i
                        n_delta += 1
                    else:
                        final_nbrs.append(live_base + ref)
                spill.write(_pack_record(intermediate.dim, p.R,
                                         self.new_vecs[i], final_nbrs).tobytes())
        spill.close()
        self.report.spill_bytes = len(self.new_ids) * rec_bytes
        self.report.phase_seconds["insert"] = time.time() - t0
        self._compact = compact
        self._live_slots = live_slots
        return delta[:n_delta]

    # -- phase 3: patch ---------------------------------------------------------

    def patch_phase(self, intermediate: DiskIndex, delta: np.ndarray) -> DiskIndex:
        """Stream the intermediate once: renumber live records into compacted
        slots, fold reverse edges in (pruning only past the degree bound),
        then append the staged records."""
        t0 = time.time()
        self.meter.phase("patch")
        p = self.job.params
        compact = self._compact
        live_slots = self._live_slots
        live_base = live_slots.size

        delta.sort()  # groups edges by target slot, then new-point index
        targets = (delta >> 32).astype(np.int64)
        payload = (delta & 0xFFFFFFFF).astype(np.int64)

        writer = DiskIndexWriter(self.out_path, intermediate.dim, p.R,
                                 intermediate.sector_size, p.block_sectors)
        codes = intermediate.codes.codes

        def transform(slot, vec, nbrs):
            if intermediate.ids[slot] < 0:
                return None
            lo = np.searchsorted(targets, slot, side="left")
            hi = np.searchsorted(targets, slot, side="right")
            incoming = payload[lo:hi]
            existing = nbrs.astype(np.int64)
            if incoming.size == 0:
                return compact[existing]
            if existing.size + incoming.size <= p.R:
                return np.concatenate([compact[existing], live_base + incoming])
            cand_ids = np.concatenate([intermediate.ids[existing],
                                       self.new_ids[incoming]])
            cand_codes = np.concatenate([codes[existing],
                                         self.new_codes[incoming]])
            cand_final = np.concatenate([compact[existing], live_base + incoming])
            sel = self._prune_compressed(vec, cand_ids, cand_codes, self.patch_stats)
            return cand_final[sel]

        for batch in _scan_batches(intermediate, p.block_sectors, p.workers, transform):
            for slot, vec, new_nbrs in batch:
                if new_nbrs is not None:
                    writer.append(vec, new_nbrs)

        rec_bytes = 4 * intermediate.dim + 4 + 4 * p.R
        with open(self.spill_path, "rb") as spill:
            for _ in range(len(self.new_ids)):
                raw = np.frombuffer(spill.read(rec_bytes), dtype=np.uint8)
                vec, nbrs = _unpack_record(raw, intermediate.dim, p.R)
                writer.append(vec, nbrs)

        final_ids = np.concatenate([intermediate.ids[live_slots], self.new_ids])
        final_codes = np.concatenate([codes[live_slots], self.new_codes])
        start = intermediate.start_slot
        start = int(compact[start]) if start >= 0 and compact[start] >= 0 else (
            0 if len(final_ids) else -1)
        final = writer.finalize(start, final_ids,
                                pq.PQCodes(final_codes), intermediate.codebook)
        self.report.phase_seconds["patch"] = time.time() - t0
        return final

    # -- orchestration -------------------------------------------------------

    def run(self):
        """Execute all three phases; returns (DiskIndex, MergeReport)."""
        src = self.job.index
        survivors = set(src.slot_of) - {int(d) for d in self.job.deletes}
        if not survivors:
            return self._rebuild_from_new()
        src_reads0 = src.io.seq_read_passes
        try:
            intermediate = self.delete_phase()
            try:
                delta = self.insert_phase(intermediate)
                final = self.patch_phase(intermediate, delta)
            finally:
                intermediate.close()
        finally:
            if not self.keep_intermediate:
                for path in (self.intermediate_path, self.spill_path):
                    for suffix in ("", ".pq", ".pqcb", ".ids"):
                        try:
                            os.remove(path + suffix)
                        except OSError:
                            pass

        self.report.read_passes = (src.io.seq_read_passes - src_reads0) + 1
        self.report.write_passes = 2  # intermediate body + final body
        self.report.peak_aux_bytes = self.meter.peak
        self.report.phase_peak_aux_bytes = dict(self.meter.phase_peaks)
        sizes = self.delete_stats.sizes + self.patch_stats.sizes
        if sizes:
            hist, edges = np.histogram(sizes, bins=10)
            self.report.candidate_size_histogram = {
                f"{edges[i]:.0f}-{edges[i+1]:.0f}": int(hist[i]) for i in range(len(hist))
            }
        self.report.delete_candidate_sizes = list(self.delete_stats.sizes)
        self.report.delete_prune_ns = list(self.delete_stats.times)
        self.report.counts = {
            "input": int(src.live_count),
            "deleted": len(self.job.deletes),
            "inserted": int(len(self.new_ids)),
            "output": int(final.live_count),
        }
        return final, self.report

    def _rebuild_from_new(self):
        """Degenerate merge where every disk point is deleted: the streaming
        insert phase has nothing to search, so the output graph over the new
        points is built in memory instead."""
        from .disk import write_index
        from .graph import build_static

        if not len(self.new_ids):
            raise ValueError("merge output would be empty")
        p = self.job.params
        vs = VectorSet(self.job.index.dim, self.new_vecs,
                       self.new_ids.astype(np.uint64))
        g = build_static(vs, R=p.R, L_c=p.L_c, alpha=p.alpha)
        final = write_index(g, self.job.index.codebook, self.out_path)
        self.report.counts = {
            "input": int(self.job.index.live_count),
            "deleted": len(self.job.deletes),
            "inserted": int(len(self.new_ids)),
            "output": int(final.live_count),
        }
        self.report.write_passes = 1
        self.report.peak_aux_bytes = self.meter.peak
        return final, self.report


def _grow_delta(delta, cap, meter):
    fresh = np.empty(min(len(delta) * 2, cap), dtype=np.int64)
    fresh[: len(delta)] = delta
    meter.alloc("delta_edges", fresh.nbytes)
    return fresh


def _scan_batches(index: DiskIndex, block_sectors: int, workers: int, transform):
    """Scan records in blocks, applying transform(slot, vec, nbrs) to each
    (in parallel when workers > 1) while preserving slot order."""
    batch = []
    batch_cap = max(256, workers * 64)
    for slot, vec, nbrs in index.scan(block_sectors):
        batch.append((slot, np.array(vec), nbrs))
        if len(batch) >= batch_cap:
            yield _apply(transform, batch, workers)
            batch = []
    if batch:
        yield _apply(transform, batch, workers)


def _apply(transform, batch, workers):
    results = _parallel_map(lambda rec: transform(*rec), batch, workers)
    return [(slot, vec, results[i]) for i, (slot, vec, _) in enumerate(batch)]


def _parallel_map(fn, items, workers):
    items = list(items)
    if workers <= 1 or len(items) < 4:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def merge(job: MergeJob, out_path, report_path=None):
    """Convenience wrapper: run a StreamMerger and optionally write the JSON
    merge report next to the output."""
    merger = StreamMerger(job, out_path)
    final, report = merger.run()
    if report_path:
        with open(report_path, "w") as f:
            f.write(report.to_json())
    return final, report
