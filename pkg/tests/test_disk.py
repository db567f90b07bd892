"""On-disk index: layout arithmetic, round-trips, block streaming, beam
search behavior and I/O accounting."""

import os

import numpy as np
import pytest

from freshann import pq
from freshann.core import VectorSet, brute_force_knn
from freshann.disk import (
    HEADER_SIZE,
    DiskIndex,
    DiskIndexWriter,
    block_scan,
    record_size,
    records_per_sector,
    slot_offset,
    validate,
    write_index,
)
from freshann.graph import build_static
from tests.test_graph import complete_graph


@pytest.fixture
def built(tmp_path, rng):
    from freshann.bench import synthetic

    data = synthetic(500, 16, 8, seed=3)
    vs = VectorSet.from_array(data)
    g = build_static(vs, R=16, L_c=32, alpha=1.2)
    cb = pq.train_codebook(vs, m=8, iters=5, seed=0)
    index = write_index(g, cb, tmp_path / "idx")
    yield vs, g, index
    index.close()


def lossless_codebook(data, m):
    """Codebook whose centroids cover every subspace chunk exactly."""
    return pq.train_codebook(VectorSet.from_array(data), m=m, iters=2, seed=0)


class TestLayout:
    def test_record_size_arithmetic(self):
        assert record_size(128, 64) == 4 * 128 + 4 + 256 == 772
        assert records_per_sector(128, 64) == 5

    def test_slot_offset_pure_function(self):
        # dim=128, R=64: 5 records per 4096-byte sector
        assert slot_offset(0, 128, 64) == HEADER_SIZE
        assert slot_offset(4, 128, 64) == HEADER_SIZE + 4 * 772
        assert slot_offset(5, 128, 64) == HEADER_SIZE + 4096
        assert slot_offset(7, 128, 64) == HEADER_SIZE + 4096 + 2 * 772

    def test_record_never_straddles_sector(self):
        for dim, R in ((128, 64), (17, 5), (64, 32)):
            rps = records_per_sector(dim, R)
            for slot in range(3 * rps):
                off = slot_offset(slot, dim, R) - HEADER_SIZE
                assert off // 4096 == (off + record_size(dim, R) - 1) // 4096

    def test_oversized_record_rejected(self):
        with pytest.raises(ValueError):
            records_per_sector(2000, 64)

    def test_single_node_file(self, tmp_path, rng):
        vs = VectorSet.from_array(rng.normal(size=(1, 8)).astype(np.float32))
        g = build_static(vs, R=4, L_c=8)
        index = write_index(g, lossless_codebook(vs.data, 2), tmp_path / "one")
        assert os.path.getsize(index.path) == HEADER_SIZE + 4096
        validate(index)
        index.close()


class TestRoundTrip:
    def test_adjacency_and_vectors_exact(self, built):
        vs, g, index = built
        validate(index)
        for node_id in g.node_ids():
            vec, nbrs = index.read_record(index.slot_of[node_id])
            assert np.array_equal(vec, g.vector(node_id))
            assert sorted(int(index.ids[n]) for n in nbrs) == sorted(g.neighbors(node_id))

    def test_slot_order_is_id_order(self, built):
        _, g, index = built
        assert list(index.ids) == sorted(g.node_ids())

    def test_reopen_matches(self, built, tmp_path):
        _, _, index = built
        again = DiskIndex.open(index.path)
        assert again.count == index.count
        assert again.start_slot == index.start_slot
        np.testing.assert_array_equal(again.ids, index.ids)
        np.testing.assert_array_equal(again.codes.codes, index.codes.codes)
        again.close()


class TestBlockScan:
    def test_identity_rewrite_byte_exact(self, built, tmp_path):
        _, _, index = built
        writer = DiskIndexWriter(tmp_path / "copy", index.dim, index.R)
        for slot, vec, nbrs in index.scan(block_sectors=3):
            writer.append(vec, nbrs)
        copy = writer.finalize(index.start_slot, index.ids,
                               index.codes, index.codebook)
        with open(index.path, "rb") as a, open(copy.path, "rb") as b:
            assert a.read() == b.read()
        copy.close()

    def test_visitor_counts_records(self, built):
        _, _, index = built
        seen = []
        n = block_scan(index, 2, lambda slot, vec, nbrs: seen.append(slot))
        assert n == index.count
        assert seen == list(range(index.count))

    def test_pass_accounting(self, built, tmp_path):
        _, _, index = built
        before = index.io.seq_read_passes
        writer = DiskIndexWriter(tmp_path / "c2", index.dim, index.R)
        for _, vec, nbrs in index.scan():
            writer.append(vec, nbrs)
        writer.finalize(index.start_slot, index.ids, index.codes,
                        index.codebook).close()
        assert index.io.seq_read_passes == before + 1

    def test_bad_block_size(self, built):
        _, _, index = built
        with pytest.raises(ValueError):
            next(index.scan(block_sectors=0))


class TestBeamSearch:
    def test_exact_on_complete_graph_lossless(self, tmp_path, rng):
        data = rng.normal(size=(80, 8)).astype(np.float32)
        vs = VectorSet.from_array(data)
        g = complete_graph(vs)
        index = write_index(g, lossless_codebook(data, 4), tmp_path / "full")
        for _ in range(25):
            q = rng.normal(size=8).astype(np.float32)
            res, _ = index.beam_search(q, 5, 80, W=1)
            ids, _ = brute_force_knn(vs, q, 5)
            assert res.top_k == ids.tolist()
        index.close()

    def test_self_recall(self, built):
        vs, _, index = built
        hits = sum(
            index.beam_search(vs.data[i], 1, 30, W=4)[0].top_k == [int(vs.ids[i])]
            for i in range(vs.count))
        assert hits / vs.count >= 0.99

    def test_io_accounting_against_shim(self, built, rng):
        _, _, index = built
        for W in (1, 4):
            before = index.io.random_reads
            _, stats = index.beam_search(rng.normal(size=16).astype(np.float32),
                                         3, 12, W=W)
            assert stats.ios == index.io.random_reads - before
            assert stats.ios >= stats.hops  # one sector read per expansion
            assert stats.ios <= stats.hops * W

    def test_filtered_ids_navigable_not_returned(self, built, rng):
        vs, _, index = built
        target = int(vs.ids[17])
        res, _ = index.beam_search(vs.data[17], 5, 30, W=2,
                                   filter_ids={target})
        assert target not in res.top_k
        assert target in res.visited

    def test_k_exceeds_Ls(self, built):
        _, _, index = built
        with pytest.raises(ValueError):
            index.beam_search(np.zeros(16, np.float32), 10, 5)

    def test_sentinels_never_dereferenced(self, built):
        # every neighbor entry past the stored degree is the sentinel; the
        # validator proves search only ever sees valid prefixes
        _, _, index = built
        raw_degrees = []
        for slot, _, nbrs in index.scan():
            raw_degrees.append(len(nbrs))
            assert all(0 <= int(n) < index.count for n in nbrs)
        assert max(raw_degrees) <= index.R


class TestWriterErrors:
    def test_degree_overflow_rejected(self, tmp_path):
        writer = DiskIndexWriter(tmp_path / "bad", 4, 2)
        with pytest.raises(ValueError):
            writer.append(np.zeros(4, np.float32), [0, 1, 2])

    def test_ids_must_cover_slots(self, tmp_path, rng):
        writer = DiskIndexWriter(tmp_path / "bad2", 4, 2)
        writer.append(np.zeros(4, np.float32), [])
        data = np.zeros((1, 4), np.float32)
        cb = lossless_codebook(rng.normal(size=(10, 4)).astype(np.float32), 2)
        with pytest.raises(ValueError):
            writer.finalize(0, np.array([1, 2], dtype=np.int64),
                            pq.encode(cb, data), cb)
