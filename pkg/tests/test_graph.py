"""Dynamic graph behavior: traversal, pruning, inserts, lazy deletes,
consolidation policies, static builds, snapshots, and concurrency."""

import threading

import numpy as np
import pytest

from freshann.core import VectorSet, brute_force_knn, ground_truth, recall_report
from freshann.graph import DynGraph, build_static, medoid_index


def line_graph(values, R=4, alpha=1.2, L_c=10):
    """Bidirectional chain over 1-D points, adjacency forced explicitly."""
    g = DynGraph(dim=1, R=R, alpha=alpha, L_c=L_c)
    for i, v in enumerate(values):
        g.insert_point(np.array([float(v)], dtype=np.float32), i)
    for i in range(len(values)):
        nbrs = [j for j in (i - 1, i + 1) if 0 <= j < len(values)]
        rows = np.array([g._row_of[j] for j in nbrs], dtype=np.int32)
        g._write_adjacency(g._row_of[i], rows)
    return g


def complete_graph(vs: VectorSet, alpha=1.2):
    g = DynGraph(dim=vs.dim, R=vs.count, alpha=alpha, L_c=vs.count,
                 capacity=vs.count + 1)
    for i in range(vs.count):
        g.insert_point(vs.data[i], int(vs.ids[i]))
    for i in range(vs.count):
        rows = np.array([g._row_of[int(j)] for j in vs.ids if int(j) != int(vs.ids[i])],
                        dtype=np.int32)
        g._write_adjacency(g._row_of[int(vs.ids[i])], rows)
    return g


class TestGreedySearch:
    def test_single_node(self):
        g = DynGraph(dim=2, R=4)
        g.insert_point(np.array([1.0, 1.0], dtype=np.float32), 7)
        res = g.greedy_search(np.zeros(2, np.float32), k=1, L=1)
        assert res.top_k == [7]
        assert res.visited == {7}

    def test_chain_hand_trace(self):
        g = line_graph([0, 1, 2, 3, 4])
        res = g.greedy_search(np.array([3.2], np.float32), k=1, L=2)
        assert res.top_k == [3]
        assert res.visited == {0, 1, 2, 3, 4}

    def test_complete_graph_matches_oracle(self, rng):
        vs = VectorSet.from_array(rng.normal(size=(60, 5)).astype(np.float32))
        g = complete_graph(vs)
        for _ in range(20):
            q = rng.normal(size=5).astype(np.float32)
            res = g.greedy_search(q, k=4, L=60)
            ids, _ = brute_force_knn(vs, q, 4)
            assert res.top_k == ids.tolist()

    def test_errors(self):
        g = DynGraph(dim=2)
        with pytest.raises(ValueError):
            g.greedy_search(np.zeros(2, np.float32), 1, 1)
        g.insert_point(np.zeros(2, np.float32), 0)
        with pytest.raises(ValueError):
            g.greedy_search(np.zeros(2, np.float32), k=3, L=2)

    def test_termination_visits_bounded(self, rng):
        vs = VectorSet.from_array(rng.normal(size=(100, 4)).astype(np.float32))
        g = build_static(vs, R=8, L_c=16, alpha=1.2)
        res = g.greedy_search(rng.normal(size=4).astype(np.float32), 5, 16)
        assert len(res.visited) <= 100


class TestRobustPrune:
    def test_single_candidate(self):
        g = line_graph([0, 1])
        assert g.robust_prune(0, [1], alpha=1.7) == [1]

    def test_hand_evaluated_alpha(self):
        g = line_graph([0.0, 1.0, 2.1])
        assert g.robust_prune(0, [1, 2], alpha=1.2, R=4) == [1]
        assert g.robust_prune(0, [1, 2], alpha=2.0, R=4) == [1, 2]
        assert g.neighbors(0) == [1, 2]  # result replaced the adjacency

    def test_empty_candidates(self):
        g = line_graph([0, 1])
        assert g.robust_prune(0, []) == []

    def _certificate(self, pts, p_idx, cand, alpha, R, selected):
        """Replay the selection order and verify every discard is dominated."""
        d_p = {c: np.linalg.norm(pts[p_idx] - pts[c]) for c in cand}
        remaining = sorted(cand)
        for s in selected:
            assert s in remaining
            best = min(remaining, key=lambda c: (d_p[c], c))
            assert s == best
            remaining.remove(s)
            remaining = [c for c in remaining
                         if alpha * np.linalg.norm(pts[s] - pts[c]) > d_p[c]]
        if len(selected) < R:
            assert remaining == []

    def test_property_sweep(self, rng):
        pts = rng.normal(size=(300, 6)).astype(np.float32)
        for trial in range(200):
            n_cand = int(rng.integers(1, 30))
            cand = rng.choice(299, size=n_cand, replace=False) + 1
            alpha = float(rng.choice([1.0, 1.2, 2.0]))
            R = int(rng.integers(1, 12))
            g = DynGraph(dim=6, R=max(R, 4), alpha=1.2, L_c=8,
                         capacity=len(pts) + 1)
            for i in (0, *cand.tolist()):
                g.insert_point(pts[i], i)
            selected = g.robust_prune(0, cand.tolist(), alpha=alpha, R=R)
            assert len(selected) <= R
            self._certificate(pts, 0, set(cand.tolist()), alpha, R, selected)

    def test_alpha_monotone_density(self, rng):
        pts = rng.normal(size=(40, 4)).astype(np.float32)
        g = DynGraph(dim=4, R=30, alpha=1.2, L_c=8, capacity=41)
        for i in range(40):
            g.insert_point(pts[i], i)
        cand = list(range(1, 40))
        sizes = [len(g.robust_prune(0, cand, alpha=a, R=25)) for a in (1.0, 1.2, 2.0)]
        assert sizes[0] <= sizes[1] <= sizes[2]


class TestInsert:
    def test_first_insert_becomes_start(self):
        g = DynGraph(dim=3)
        g.insert_point(np.ones(3, np.float32), 42)
        assert g.start == 42
        assert g.neighbors(42) == []

    def test_second_insert_bidirectional(self, rng):
        g = DynGraph(dim=3)
        g.insert_point(rng.normal(size=3).astype(np.float32), 0)
        g.insert_point(rng.normal(size=3).astype(np.float32), 1)
        assert g.neighbors(0) == [1]
        assert g.neighbors(1) == [0]

    def test_duplicate_id(self):
        g = DynGraph(dim=2)
        g.insert_point(np.zeros(2, np.float32), 0)
        with pytest.raises(ValueError):
            g.insert_point(np.ones(2, np.float32), 0)

    def test_dim_mismatch(self):
        g = DynGraph(dim=2)
        with pytest.raises(ValueError):
            g.insert_point(np.zeros(3, np.float32), 0)

    def test_degree_bound_random_sweep(self, rng):
        g = DynGraph(dim=6, R=8, alpha=1.2, L_c=12)
        for i in range(400):
            g.insert_point(rng.normal(size=6).astype(np.float32), i)
        assert g.max_degree() <= 8

    def test_duplicate_vectors_allowed_no_self_loop(self):
        g = DynGraph(dim=2, R=4)
        v = np.array([1.0, 2.0], dtype=np.float32)
        for i in range(4):
            g.insert_point(v, i)
        for i in range(4):
            assert i not in g.neighbors(i)


class TestDelete:
    def test_filtered_from_results(self, rng):
        vs = VectorSet.from_array(rng.normal(size=(50, 4)).astype(np.float32))
        g = build_static(vs, R=8, L_c=16)
        target = int(vs.ids[10])
        g.delete_point(target)
        res = g.greedy_search(vs.data[10], k=3, L=16)
        assert target not in res.top_k

    def test_navigation_still_uses_deleted(self):
        g = line_graph([0, 1, 2, 3, 4])
        g.delete_point(2)
        res = g.greedy_search(np.array([4.0], np.float32), k=1, L=2)
        assert res.top_k == [4]
        assert 2 in res.visited

    def test_unfiltered_may_return_deleted(self):
        g = line_graph([0, 1, 2])
        g.delete_point(1)
        res = g.greedy_search(np.array([1.0], np.float32), k=1, L=3,
                              filter_deleted=False)
        assert res.top_k == [1]

    def test_delete_all_yields_empty(self, rng):
        g = DynGraph(dim=2, R=4)
        for i in range(5):
            g.insert_point(rng.normal(size=2).astype(np.float32), i)
        for i in range(5):
            g.delete_point(i)
        res = g.greedy_search(np.zeros(2, np.float32), k=2, L=5)
        assert res.top_k == []

    def test_errors(self):
        g = DynGraph(dim=2)
        g.insert_point(np.zeros(2, np.float32), 0)
        with pytest.raises(KeyError):
            g.delete_point(3)
        g.delete_point(0)
        with pytest.raises(ValueError):
            g.delete_point(0)


class TestConsolidate:
    def test_chain_fresh_bridges_gap(self):
        g = line_graph([0, 1, 2], R=4)
        g.delete_point(1)
        g.consolidate_deletes("fresh")
        assert 1 not in g
        assert g.neighbors(0) == [2]
        assert g.neighbors(2) == [0]

    def test_chain_policy_a_disconnects(self):
        g = line_graph([0, 1, 2], R=4)
        g.delete_point(1)
        g.consolidate_deletes("policy_a")
        assert g.neighbors(0) == []
        assert g.neighbors(2) == []

    def test_noop_when_empty(self, rng):
        vs = VectorSet.from_array(rng.normal(size=(30, 3)).astype(np.float32))
        g = build_static(vs, R=6, L_c=10)
        before = {i: g.neighbors(i) for i in g.node_ids()}
        g.consolidate_deletes("fresh")
        assert before == {i: g.neighbors(i) for i in g.node_ids()}

    def test_no_edges_to_deleted_and_degree_bound(self, rng):
        vs = VectorSet.from_array(rng.normal(size=(200, 5)).astype(np.float32))
        g = build_static(vs, R=8, L_c=16)
        victims = [int(x) for x in rng.choice(200, 40, replace=False)]
        for v in victims:
            g.delete_point(v)
        g.consolidate_deletes("fresh")
        assert g.delete_list == set()
        gone = set(victims)
        for i in g.node_ids():
            nbrs = g.neighbors(i)
            assert len(nbrs) <= 8
            assert not (set(nbrs) & gone)

    def test_start_reassigned_when_deleted(self, rng):
        vs = VectorSet.from_array(rng.normal(size=(30, 3)).astype(np.float32))
        g = build_static(vs, R=6, L_c=10)
        start = g.start
        g.delete_point(start)
        g.consolidate_deletes("fresh")
        assert g.start is not None and g.start != start
        assert g.start in g


class TestBuildStatic:
    def test_singleton(self):
        vs = VectorSet.from_array(np.ones((1, 4), dtype=np.float32))
        g = build_static(vs, R=4, L_c=8)
        assert g.node_count == 1

    def test_medoid_is_exact_on_small_sets(self, rng):
        data = rng.normal(size=(40, 3)).astype(np.float32)
        vs = VectorSet.from_array(data)
        sums = [sum(np.linalg.norm(data[i] - data[j]) for j in range(40))
                for i in range(40)]
        assert medoid_index(vs) == int(np.argmin(sums))

    def test_desk_scale_recall(self, rng):
        data = rng.normal(size=(200, 2)).astype(np.float32)
        vs = VectorSet.from_array(data)
        g = build_static(vs, R=8, L_c=20, alpha=1.2)
        queries = rng.normal(size=(40, 2)).astype(np.float32)
        gt = ground_truth(vs, queries, 5)
        results = [g.greedy_search(q, 5, 20).top_k for q in queries]
        assert recall_report(results, gt, 5).mean >= 0.95

    def test_two_passes_at_least_as_good(self):
        from freshann.bench import synthetic

        diffs = []
        for seed in range(5):
            data = synthetic(400, 8, 6, seed)
            vs = VectorSet.from_array(data)
            queries = synthetic(50, 8, 6, seed, salt=1)
            gt = ground_truth(vs, queries, 5)
            r = {}
            for passes in (1, 2):
                g = build_static(vs, R=8, L_c=16, alpha=1.2, passes=passes)
                results = [g.greedy_search(q, 5, 16).top_k for q in queries]
                r[passes] = recall_report(results, gt, 5).mean
            diffs.append(r[2] - r[1])
        assert np.mean(diffs) >= 0.0

    def test_empty_set_error(self, rng):
        with pytest.raises(ValueError):
            build_static(VectorSet(2, np.zeros((0, 2), np.float32),
                                   np.zeros(0, np.uint64)), R=4)


class TestSnapshot:
    def test_roundtrip_byte_exact(self, tmp_path, rng):
        vs = VectorSet.from_array(rng.normal(size=(80, 6)).astype(np.float32))
        g = build_static(vs, R=6, L_c=12)
        g.delete_point(int(vs.ids[3]))
        p1, p2 = tmp_path / "a.fvg", tmp_path / "b.fvg"
        g.save(p1)
        g2 = DynGraph.load(p1)
        assert g2.start == g.start
        assert g2.delete_list == g.delete_list
        for i in g.node_ids():
            assert g2.neighbors(i) == g.neighbors(i)
            assert np.array_equal(g2.vector(i), g.vector(i))
        g2.save(p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestConcurrency:
    def test_concurrent_inserts_and_searches(self, rng):
        g = DynGraph(dim=8, R=8, alpha=1.2, L_c=12, capacity=64)
        data = rng.normal(size=(800, 8)).astype(np.float32)
        errors = []

        def inserter(base):
            try:
                for i in range(base, base + 200):
                    g.insert_point(data[i], i)
            except Exception as e:  # pragma: no cover
                errors.append(e)

        def searcher():
            r = np.random.default_rng(0)
            try:
                for _ in range(300):
                    if g.node_count:
                        g.greedy_search(r.normal(size=8).astype(np.float32), 3, 12)
            except Exception as e:  # pragma: no cover
                errors.append(e)

        threads = [threading.Thread(target=inserter, args=(b,))
                   for b in (0, 200, 400, 600)]
        threads += [threading.Thread(target=searcher) for _ in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert g.node_count == 800
        assert g.max_degree() <= 8
        res = g.greedy_search(data[5], 1, 20)
        assert res.top_k == [5]
