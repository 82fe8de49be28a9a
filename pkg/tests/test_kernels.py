import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcomm import kernels

BACKENDS = kernels.backends()


@pytest.fixture(params=sorted(BACKENDS))
def k(request):
    return BACKENDS[request.param]


def brute_entropy(row, eps=1e-12):
    total = sum(abs(x) for x in row)
    h = 0.0
    for x in row:
        p = abs(x) / (total + eps)
        if p > 0:
            h -= p * math.log2(p)
    return h


def brute_cos(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def test_compiled_backend_built():
    assert "compiled" in BACKENDS, "the Cython extension was not built"


def test_entropy_uniform_and_onehot(k):
    out = k.entropy_rows(np.array([[1.0, 1.0, 1.0, 1.0], [0.0, 5.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out, [2.0, 0.0, 0.0], atol=1e-12)


def test_entropy_matches_brute_force(k):
    rng = np.random.default_rng(0)
    m = rng.normal(size=(200, 7))
    m[rng.random(m.shape) < 0.2] = 0.0
    expect = [brute_entropy(r) for r in m]
    np.testing.assert_allclose(k.entropy_rows(m), expect, rtol=0, atol=1e-12)


def test_round_stats_matches_brute_force(k):
    rng = np.random.default_rng(1)
    n, blocks = 4, 30
    m = rng.normal(size=(n * blocks, 5))
    m[rng.random(n * blocks) < 0.1] = 0.0
    active = rng.random(n * blocks) < 0.6
    h, xi = k.round_stats(m, active, n)
    for b in range(blocks):
        rows = [i for i in range(b * n, (b + 1) * n) if active[i]]
        if rows:
            assert h[b] == pytest.approx(np.mean([brute_entropy(m[i]) for i in rows]), abs=1e-12)
        else:
            assert np.isnan(h[b])
        if len(rows) >= 2:
            pairs = [brute_cos(m[i], m[j]) for i, j in itertools.combinations(rows, 2)]
            assert xi[b] == pytest.approx(np.mean(pairs), abs=1e-12)
        else:
            assert np.isnan(xi[b])


def test_count_edges_ignores_diagonal(k):
    g = np.ones((6, 3))
    assert k.count_edges(g, 3) == 12


def test_topk_mask_ties_pick_lowest_index(k):
    scores = np.zeros((4, 4))
    active = np.ones(4, dtype=bool)
    out = k.topk_mask(scores, active, 2)
    np.testing.assert_array_equal(out[0], [0, 1, 1, 0])
    np.testing.assert_array_equal(out[3], [1, 1, 0, 0])


def test_topk_mask_skips_inactive(k):
    scores = np.arange(16.0).reshape(4, 4)
    active = np.array([True, False, True, True])
    out = k.topk_mask(scores, active, 5)
    assert out[1].sum() == 0 and out[:, 1].sum() == 0
    np.testing.assert_array_equal(out[0], [0, 0, 1, 1])
    assert np.trace(out) == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 6), st.integers(0, 2**32 - 1))
def test_backends_agree(n, kk, seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(3 * n, 4))
    act = rng.random(3 * n) < 0.7
    py, *rest = [BACKENDS[name] for name in sorted(BACKENDS, reverse=True)]
    for other in rest:
        np.testing.assert_allclose(py.entropy_rows(m), other.entropy_rows(m), atol=1e-12)
        for a, b in zip(py.round_stats(m, act, n), other.round_stats(m, act, n)):
            np.testing.assert_allclose(a, b, atol=1e-12, equal_nan=True)
        scores = rng.integers(-2, 3, size=(n, n)).astype(float)
        np.testing.assert_array_equal(py.topk_mask(scores, act[:n], kk), other.topk_mask(scores, act[:n], kk))
        g = (rng.random((3 * n, n)) < 0.5).astype(float)
        assert py.count_edges(g, n) == other.count_edges(g, n)


def test_tj_observe_backends_agree():
    rng = np.random.default_rng(4)
    d = 7
    road = np.zeros((d, d))
    road[3] = road[:, 3] = 1
    for _ in range(50):
        counts = rng.integers(0, 3, size=(d, d))
        pos = rng.integers(0, d, size=(5, 2))
        route = rng.integers(0, 6, size=5)
        active = rng.random(5) < 0.6
        outs = [b.tj_observe(counts, road, pos, route, active, 1, 6) for b in BACKENDS.values()]
        for o in outs[1:]:
            np.testing.assert_array_equal(outs[0], o)
