"""Equivalence of the jitted kernels and their pure-numpy fallbacks."""

import numpy as np
import pytest

from freshann import kernels

needs_numba = pytest.mark.skipif(not kernels.NUMBA_ENABLED,
                                 reason="numba disabled or unavailable")


def test_l2_sq_matches_numpy(rng):
    for _ in range(20):
        a = rng.normal(size=32).astype(np.float32)
        b = rng.normal(size=32).astype(np.float32)
        got = kernels.l2_sq(a, b)
        ref = float(((a.astype(np.float64) - b.astype(np.float64)) ** 2).sum())
        assert got == pytest.approx(ref, rel=1e-12)


@needs_numba
def test_batch_paths_agree(rng):
    X = rng.normal(size=(200, 24)).astype(np.float32)
    q = rng.normal(size=24).astype(np.float32)
    nb = kernels._nb_l2_sq_batch(X, q)
    npv = kernels._np_l2_sq_batch(X, q)
    np.testing.assert_allclose(nb, npv, rtol=1e-12)


@needs_numba
def test_prune_paths_agree(rng):
    for trial in range(30):
        m = int(rng.integers(1, 40))
        cand = rng.normal(size=(m, 8)).astype(np.float32)
        q = rng.normal(size=8).astype(np.float32)
        dists = kernels._np_l2_sq_batch(cand, q)
        R = int(rng.integers(1, 12))
        alpha_sq = float(rng.uniform(1.0, 4.0))
        sel_nb = np.empty(m, np.int64)
        sel_np = np.empty(m, np.int64)
        n_nb = kernels._nb_robust_prune(cand, dists.copy(), alpha_sq, R, sel_nb)
        n_np = kernels._np_robust_prune(cand, dists.copy(), alpha_sq, R, sel_np)
        assert n_nb == n_np
        assert list(sel_nb[:n_nb]) == list(sel_np[:n_np])


@needs_numba
def test_greedy_paths_agree(rng):
    n, dim, R, L = 150, 10, 6, 12
    vecs = rng.normal(size=(n, dim)).astype(np.float32)
    adj = rng.integers(0, n, size=(n, R)).astype(np.int32)
    deg = rng.integers(1, R + 1, size=n).astype(np.int32)

    def run(fn, q):
        cr = np.empty(L, np.int32)
        cd = np.empty(L, np.float64)
        vr = np.empty(n + 1, np.int32)
        vd = np.empty(n + 1, np.float64)
        size, nvis, comps = fn(vecs, adj, deg, q, 0, L, cr, cd, vr, vd,
                               np.zeros(n, np.int64), np.zeros(n, np.int64), 1)
        return list(cr[:size]), list(vr[:nvis]), comps

    for seed in range(10):
        q = np.random.default_rng(seed).normal(size=dim).astype(np.float32)
        assert run(kernels._nb_greedy_search, q) == run(kernels._np_greedy_search, q)


@needs_numba
def test_adc_paths_agree(rng):
    lut = (rng.normal(size=(8, 256)) ** 2).astype(np.float64)
    codes = rng.integers(0, 256, size=(64, 8)).astype(np.uint8)
    out_nb = np.empty(64, np.float64)
    out_np = np.empty(64, np.float64)
    kernels._nb_adc_batch(lut, codes, out_nb)
    kernels._np_adc_batch(lut, codes, out_np)
    np.testing.assert_array_equal(out_nb, out_np)


def test_prune_respects_bound(rng):
    cand = rng.normal(size=(30, 6)).astype(np.float32)
    dists = kernels._np_l2_sq_batch(cand, np.zeros(6, np.float32))
    sel = np.empty(30, np.int64)
    n = kernels.robust_prune(cand, dists, 1.0, 5, sel)
    assert n <= 5
    assert len(set(sel[:n].tolist())) == n
