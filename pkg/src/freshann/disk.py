"""Disk-resident index: sector-aligned node records holding the full vector
plus the neighbor list, searched by a beam traversal ordered with in-memory
PQ distances, re-ranked with the full-precision vectors already fetched.

Layout (little-endian):
    header, one 4096-byte sector:
        magic "FDA2" | version u32 | count u64 | dim u32 | R u32 |
        start u64 (slot) | record_size u32 | sector_size u32 | zero padding
    body: sectors of packed records; a record never straddles a sector.
        record: dim x f32 vector | degree u32 | R x u32 neighbor slots,
        unused entries 0xFFFFFFFF.

Sidecars: <path>.pq (codes), <path>.pqcb (codebook), <path>.ids (slot -> id
map, tombstoned slots 0xFFFFFFFFFFFFFFFF).
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from . import kernels, pq
from .core import FileFormatError
from .graph import SearchResult

MAGIC = b"FDA2"
IDS_MAGIC = b"FID1"
HEADER_SIZE = 4096
SECTOR_SIZE = 4096
NO_NEIGHBOR = 0xFFFFFFFF
TOMBSTONE_ID = 0xFFFFFFFFFFFFFFFF
NO_START = 0xFFFFFFFFFFFFFFFF


def record_size(dim: int, R: int) -> int:
    return 4 * dim + 4 + 4 * R


def records_per_sector(dim: int, R: int, sector: int = SECTOR_SIZE) -> int:
    rs = record_size(dim, R)
    if rs > sector:
        raise ValueError(f"record size {rs} exceeds sector size {sector}")
    return sector // rs


def slot_offset(slot: int, dim: int, R: int, sector: int = SECTOR_SIZE) -> int:
    """Byte offset of a slot's record: pure layout arithmetic."""
    rps = records_per_sector(dim, R, sector)
    return HEADER_SIZE + (slot // rps) * sector + (slot % rps) * record_size(dim, R)


@dataclass
class BeamSearchStats:
    ios: int = 0
    comparisons: int = 0
    hops: int = 0


@dataclass
class IoCounters:
    random_reads: int = 0
    seq_read_passes: int = 0


def _pack_record(dim, R, vec, nbr_slots):
    buf = np.empty(record_size(dim, R), dtype=np.uint8)
    buf[: 4 * dim] = np.ascontiguousarray(vec, dtype=np.float32).view(np.uint8)
    deg = len(nbr_slots)
    if deg > R:
        raise ValueError(f"degree {deg} exceeds R={R}")
    buf[4 * dim: 4 * dim + 4] = np.array([deg], dtype=np.uint32).view(np.uint8)
    nbrs = np.full(R, NO_NEIGHBOR, dtype=np.uint32)
    nbrs[:deg] = np.asarray(nbr_slots, dtype=np.uint32)
    buf[4 * dim + 4:] = nbrs.view(np.uint8)
    return buf


def _unpack_record(raw, dim, R):
    vec = raw[: 4 * dim].view(np.float32)
    deg = int(raw[4 * dim: 4 * dim + 4].view(np.uint32)[0])
    nbrs = raw[4 * dim + 4:].view(np.uint32)[:deg]
    return vec, nbrs.astype(np.int64)


class DiskIndex:
    """Read-only handle over an on-disk index plus its in-memory sidecars.

    Concurrent searches share the file descriptor through pread; no locks on
    the read path.
    """

    def __init__(self, path, header, ids, codes: pq.PQCodes, codebook: pq.PQCodebook):
        self.path = str(path)
        (self.count, self.dim, self.R, self.start_slot, self.record_size,
         self.sector_size) = header
        self.ids = ids  # (count,) int64, -1 for tombstoned slots
        self.codes = codes
        self.codebook = codebook
        self.slot_of = {int(i): s for s, i in enumerate(ids) if i >= 0}
        self.io = IoCounters()
        self._fd = os.open(self.path, os.O_RDONLY)
        self._closed = False
        self._lock = threading.Lock()

    # -- lifecycle ---------------------------------------------------------

    @classmethod
    def open(cls, path) -> "DiskIndex":
        with open(path, "rb") as f:
            head = f.read(HEADER_SIZE)
        if len(head) < HEADER_SIZE or head[:4] != MAGIC:
            raise FileFormatError(f"{path}: bad index header")
        version, count, dim, R, start, rs, sector = struct.unpack("<IQIIQII", head[4:40])
        if version != 1:
            raise FileFormatError(f"{path}: unsupported version {version}")
        if rs != record_size(dim, R):
            raise FileFormatError(f"{path}: record size {rs} does not match dim/R")
        ids = _load_ids(str(path) + ".ids", count)
        codes = pq.PQCodes.load(str(path) + ".pq")
        codebook = pq.PQCodebook.load(str(path) + ".pqcb")
        if codes.count != count:
            raise FileFormatError(f"{path}: code sidecar count mismatch")
        start_slot = -1 if start == NO_START else int(start)
        return cls(path, (count, dim, R, start_slot, rs, sector), ids, codes, codebook)

    def close(self):
        if not self._closed:
            os.close(self._fd)
            self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def live_count(self) -> int:
        return len(self.slot_of)

    def live_slots(self) -> np.ndarray:
        return np.flatnonzero(self.ids >= 0).astype(np.int64)

    # -- record access -------------------------------------------------------

    def read_record(self, slot: int):
        """Random read of one record (counted as one sector I/O)."""
        if not 0 <= slot < self.count:
            raise IndexError(f"slot {slot} out of range")
        off = slot_offset(slot, self.dim, self.R, self.sector_size)
        raw = os.pread(self._fd, self.record_size, off)
        if len(raw) != self.record_size:
            raise FileFormatError(f"{self.path}: short read at slot {slot}")
        with self._lock:
            self.io.random_reads += 1
        return _unpack_record(np.frombuffer(raw, dtype=np.uint8), self.dim, self.R)

    def scan(self, block_sectors: int = 128):
        """Yield (slot, vector, neighbor_slots) for every record in slot
        order, reading fixed-size sector blocks sequentially. Tombstoned
        slots are yielded too (ids[slot] < 0). Counts one sequential pass
        when the traversal completes."""
        if block_sectors < 1:
            raise ValueError("block_sectors must be >= 1")
        rps = records_per_sector(self.dim, self.R, self.sector_size)
        slot = 0
        offset = HEADER_SIZE
        block_bytes = block_sectors * self.sector_size
        while slot < self.count:
            raw = np.frombuffer(os.pread(self._fd, block_bytes, offset), dtype=np.uint8)
            offset += block_bytes
            for s in range(0, len(raw), self.sector_size):
                sector = raw[s: s + self.sector_size]
                for r in range(rps):
                    if slot >= self.count:
                        break
                    rec = sector[r * self.record_size: (r + 1) * self.record_size]
                    vec, nbrs = _unpack_record(rec, self.dim, self.R)
                    yield slot, vec, nbrs
                    slot += 1
        with self._lock:
            self.io.seq_read_passes += 1

    # -- search ---------------------------------------------------------------

    def beam_search(self, q, k: int, L_s: int, W: int = 4, filter_ids=frozenset()):
        """Beam traversal: frontier ordered by PQ asymmetric distance, up to W
        record reads per step, final ranking by exact distances from the
        records read. filter_ids (external) are excluded from top_k only.
        """
        if k > L_s:
            raise ValueError(f"k={k} exceeds L_s={L_s}")
        if self.start_slot < 0 or not self.slot_of:
            return SearchResult([], np.empty(0), set(), 0), BeamSearchStats()
        q = np.ascontiguousarray(q, dtype=np.float32)
        lut = pq.AdcTable(self.codebook, q)
        stats = BeamSearchStats()

        cand_slots: list = [self.start_slot]
        cand_d: list = [float(lut.lookup_sq(self.codes.codes[self.start_slot])[0])]
        stats.comparisons += 1
        in_list = {self.start_slot}
        expanded = {}

        while True:
            batch = [s for s in cand_slots if s not in expanded][:W]
            if not batch:
                break
            fresh = []
            for slot in batch:
                vec, nbrs = self.read_record(slot)
                stats.ios += 1
                stats.hops += 1
                exact = kernels.l2_sq(np.ascontiguousarray(vec), q)
                stats.comparisons += 1
                expanded[slot] = float(exact)
                for nb in nbrs:
                    nb = int(nb)
                    if nb not in in_list and nb not in expanded:
                        fresh.append(nb)
            if fresh:
                fresh = sorted(set(fresh))
                dists = lut.lookup_sq(self.codes.codes[np.array(fresh)])
                stats.comparisons += len(fresh)
                for slot, d in zip(fresh, dists):
                    cand_slots.append(slot)
                    cand_d.append(float(d))
                    in_list.add(slot)
                order = sorted(range(len(cand_slots)),
                               key=lambda i: (cand_d[i], cand_slots[i]))[:L_s]
                kept = set(order)
                for i in range(len(cand_slots)):
                    if i not in kept:
                        in_list.discard(cand_slots[i])
                cand_slots = [cand_slots[i] for i in order]
                cand_d = [cand_d[i] for i in order]

        ranked = sorted(
            ((d, int(self.ids[s]), s) for s, d in expanded.items()
             if self.ids[s] >= 0 and int(self.ids[s]) not in filter_ids),
            key=lambda t: (t[0], t[1]),
        )[:k]
        result = SearchResult(
            top_k=[node_id for _, node_id, _ in ranked],
            dists=np.sqrt(np.array([d for d, _, _ in ranked])),
            visited={int(self.ids[s]) for s in expanded if self.ids[s] >= 0},
            comparisons=stats.comparisons,
        )
        return result, stats


class DiskIndexWriter:
    """Streaming record writer: buffers block_sectors worth of sectors, pads
    the tail sector, and rewrites the header on finalize."""

    def __init__(self, path, dim: int, R: int, sector_size: int = SECTOR_SIZE,
                 block_sectors: int = 128):
        self.path = str(path)
        self.dim, self.R = dim, R
        self.sector_size = sector_size
        self.record_size = record_size(dim, R)
        self.rps = records_per_sector(dim, R, sector_size)
        self._f = open(self.path, "wb")
        self._f.write(b"\x00" * HEADER_SIZE)
        self._sector = np.zeros(sector_size, dtype=np.uint8)
        self._in_sector = 0
        self._block: list = []
        self.block_sectors = block_sectors
        self.count = 0
        self.finalized = False

    def append(self, vec, nbr_slots) -> int:
        """Append one record; returns its slot."""
        rec = _pack_record(self.dim, self.R, vec, nbr_slots)
        pos = self._in_sector * self.record_size
        self._sector[pos: pos + self.record_size] = rec
        self._in_sector += 1
        if self._in_sector == self.rps:
            self._flush_sector()
        slot = self.count
        self.count += 1
        return slot

    def append_tombstone(self) -> int:
        return self.append(np.zeros(self.dim, dtype=np.float32), [])

    def _flush_sector(self):
        self._block.append(self._sector.tobytes())
        self._sector[:] = 0
        self._in_sector = 0
        if len(self._block) >= self.block_sectors:
            self._f.write(b"".join(self._block))
            self._block = []

    def finalize(self, start_slot, ids, codes: pq.PQCodes, codebook: pq.PQCodebook):
        """Flush, write the header and sidecars. ids uses -1 for tombstones."""
        if self._in_sector:
            self._flush_sector()
        if self._block:
            self._f.write(b"".join(self._block))
            self._block = []
        start = NO_START if start_slot is None or start_slot < 0 else int(start_slot)
        self._f.seek(0)
        header = MAGIC + struct.pack("<IQIIQII", 1, self.count, self.dim, self.R,
                                     start, self.record_size, self.sector_size)
        self._f.write(header + b"\x00" * (HEADER_SIZE - len(header)))
        self._f.close()
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape != (self.count,):
            raise ValueError("ids must cover every slot")
        _save_ids(self.path + ".ids", ids)
        if codes.count != self.count:
            raise ValueError("codes must cover every slot")
        codes.save(self.path + ".pq")
        codebook.save(self.path + ".pqcb")
        self.finalized = True
        return DiskIndex.open(self.path)


def _save_ids(path, ids):
    out = ids.astype(np.int64).copy()
    out_u = out.view(np.uint64)
    out_u[out < 0] = TOMBSTONE_ID
    with open(path, "wb") as f:
        f.write(IDS_MAGIC)
        f.write(struct.pack("<Q", len(out)))
        f.write(out_u.tobytes())


def _load_ids(path, count):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != IDS_MAGIC:
            raise FileFormatError(f"{path}: bad id-map magic {magic!r}")
        (n,) = struct.unpack("<Q", f.read(8))
        if n != count:
            raise FileFormatError(f"{path}: id-map count mismatch")
        raw = np.frombuffer(f.read(8 * n), dtype=np.uint64).copy()
    ids = raw.view(np.int64)
    ids[raw == TOMBSTONE_ID] = -1
    return ids


def write_index(graph, codebook: pq.PQCodebook, path,
                sector_size: int = SECTOR_SIZE) -> DiskIndex:
    """Serialize a DynGraph to disk. Slots are assigned by ascending external
    id (the id order is the slot order); PQ codes are computed for every
    point with the given codebook."""
    node_ids = sorted(graph.node_ids())
    if not node_ids:
        raise ValueError("cannot write an empty graph")
    slot_of = {node_id: slot for slot, node_id in enumerate(node_ids)}
    writer = DiskIndexWriter(path, graph.dim, graph.R, sector_size)
    vectors = np.empty((len(node_ids), graph.dim), dtype=np.float32)
    for node_id in node_ids:
        vec = graph.vector(node_id)
        vectors[slot_of[node_id]] = vec
        writer.append(vec, [slot_of[n] for n in graph.neighbors(node_id)])
    codes = pq.encode(codebook, vectors)
    start = graph.start
    return writer.finalize(slot_of[start] if start is not None else None,
                           np.array(node_ids, dtype=np.int64), codes, codebook)


def block_scan(index: DiskIndex, block_sectors: int, visitor) -> int:
    """Apply visitor(slot, vector, neighbor_slots) to every record in slot
    order; returns the number of records visited."""
    n = 0
    for slot, vec, nbrs in index.scan(block_sectors):
        visitor(slot, vec, nbrs)
        n += 1
    return n


def validate(index: DiskIndex) -> None:
    """Full structural check: layout arithmetic, degree bounds, no dangling
    or tombstoned neighbor references, sidecar consistency."""
    expected_sectors = -(-index.count // records_per_sector(
        index.dim, index.R, index.sector_size)) if index.count else 0
    body = os.path.getsize(index.path) - HEADER_SIZE
    if body != expected_sectors * index.sector_size:
        raise FileFormatError(f"{index.path}: body size {body} does not match count")
    if index.codes.count != index.count or len(index.ids) != index.count:
        raise FileFormatError(f"{index.path}: sidecar count mismatch")
    if index.count and index.start_slot >= 0 and index.ids[index.start_slot] < 0:
        raise FileFormatError(f"{index.path}: start slot is tombstoned")
    for slot, _, nbrs in index.scan():
        if index.ids[slot] < 0:
            continue
        if len(nbrs) > index.R:
            raise FileFormatError(f"slot {slot}: degree {len(nbrs)} exceeds R")
        if len(set(int(n) for n in nbrs)) != len(nbrs):
            raise FileFormatError(f"slot {slot}: duplicate neighbors")
        for nb in nbrs:
            nb = int(nb)
            if not 0 <= nb < index.count:
                raise FileFormatError(f"slot {slot}: neighbor {nb} out of range")
            if nb == slot:
                raise FileFormatError(f"slot {slot}: self loop")
            if index.ids[nb] < 0:
                raise FileFormatError(f"slot {slot}: neighbor {nb} is tombstoned")
