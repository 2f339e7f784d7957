import numpy as np
import pytest

from graphkp import graphcore as gc
from graphkp import numerics as nm


def random_stochastic(rng, k):
    raw = gc.Adjacency(rng.uniform(0.0, 1.0, size=(k, k)))
    return gc.row_normalize(gc.symmetrize(raw))


def test_from_edge_list_directed_storage():
    a = gc.from_edge_list(2, [(0, 1, 1.0)])
    assert a.w.tolist() == [[0.0, 1.0], [0.0, 0.0]]


def test_from_edge_list_self_loops_only():
    a = gc.from_edge_list(3, [], self_loops=True)
    np.testing.assert_array_equal(a.w, np.eye(3))


def test_from_edge_list_duplicates_sum():
    a = gc.from_edge_list(2, [(0, 1, 1.0), (0, 1, 2.0)])
    assert a.w[0, 1] == 3.0


def test_from_edge_list_errors():
    with pytest.raises(gc.GraphError):
        gc.from_edge_list(2, [(0, 2, 1.0)])
    with pytest.raises(gc.GraphError):
        gc.from_edge_list(2, [(0, 1, -0.5)])


def test_symmetrize_halves_one_sided_edge():
    a = gc.Adjacency(np.array([[0.0, 2.0], [0.0, 0.0]]))
    assert gc.symmetrize(a).w.tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_symmetrize_idempotent():
    rng = np.random.default_rng(0)
    a = gc.Adjacency(rng.uniform(size=(5, 5)))
    once = gc.symmetrize(a)
    twice = gc.symmetrize(once)
    np.testing.assert_array_equal(once.w, twice.w)
    np.testing.assert_array_equal(once.w, once.w.T)


def test_row_normalize_hand_case():
    a = gc.Adjacency(np.array([[1.0, 1.0], [0.0, 2.0]]))
    out = gc.row_normalize(a)
    assert out.w.tolist() == [[0.5, 0.5], [0.0, 1.0]]
    assert out.kind == gc.KIND_STOCHASTIC


def test_row_normalize_identity_fixed_point():
    out = gc.row_normalize(gc.Adjacency(np.eye(4)))
    np.testing.assert_array_equal(out.w, np.eye(4))


def test_row_normalize_zero_row_fallback():
    a = gc.Adjacency(np.array([[0.0, 0.0], [1.0, 1.0]]))
    out = gc.row_normalize(a)
    assert out.w.tolist() == [[1.0, 0.0], [0.5, 0.5]]


def test_row_normalize_idempotent():
    rng = np.random.default_rng(1)
    a = gc.Adjacency(rng.uniform(size=(6, 6)))
    once = gc.row_normalize(a)
    twice = gc.row_normalize(once)
    np.testing.assert_allclose(once.w, twice.w, atol=1e-15)


def test_markov_features_identity_powers():
    mf = gc.markov_features(gc.Adjacency(np.eye(3), gc.KIND_STOCHASTIC), hops=4)
    for i in range(3):
        assert mf.p[i, i, :].tolist() == [1.0, 1.0, 1.0, 1.0]
    off = ~np.eye(3, dtype=bool)
    assert np.all(mf.p[off] == 0.0)


def test_markov_features_path_graph_two_hops():
    # 0 - 1 - 2 path, row-normalized: two hops from node 0 split evenly
    prior = gc.from_edge_list(3, [(0, 1, 1.0), (1, 2, 1.0)])
    a = gc.row_normalize(gc.symmetrize(prior))
    mf = gc.markov_features(a, hops=3)
    np.testing.assert_allclose(mf.p[0, :, 2], [0.5, 0.0, 0.5], atol=1e-15)


def test_markov_features_requires_stochastic():
    with pytest.raises(gc.GraphError):
        gc.markov_features(gc.Adjacency(np.eye(3)), hops=2)
    with pytest.raises(gc.GraphError):
        gc.markov_features(gc.Adjacency(np.eye(3), gc.KIND_STOCHASTIC), hops=0)


def test_markov_slices_stay_stochastic():
    rng = np.random.default_rng(2)
    for k in (2, 4, 6):
        mf = gc.markov_features(random_stochastic(rng, k), hops=4)
        for h in range(4):
            np.testing.assert_allclose(mf.p[:, :, h].sum(axis=1), np.ones(k), atol=1e-9)
        assert mf.p.min() >= 0.0 and mf.p.max() <= 1.0 + 1e-12


def test_markov_features_match_walk_oracle():
    rng = np.random.default_rng(3)
    for _ in range(5):
        k = int(rng.integers(2, 7))
        a = random_stochastic(rng, k)
        mf = gc.markov_features(a, hops=4)
        for h in range(4):
            for i in range(k):
                for j in range(k):
                    oracle = gc.walk_probability_oracle(a, i, j, h)
                    assert abs(mf.p[i, j, h] - oracle) < 1e-9


def test_walk_oracle_base_cases():
    rng = np.random.default_rng(4)
    a = random_stochastic(rng, 4)
    assert gc.walk_probability_oracle(a, 2, 2, 0) == 1.0
    assert gc.walk_probability_oracle(a, 2, 3, 0) == 0.0
    assert gc.walk_probability_oracle(a, 1, 2, 1) == a.w[1, 2]


def test_walk_oracle_limits():
    rng = np.random.default_rng(5)
    with pytest.raises(gc.GraphError):
        gc.walk_probability_oracle(random_stochastic(rng, 4), 0, 0, 6)


def test_spd_path_graph():
    prior = gc.symmetrize(gc.from_edge_list(3, [(0, 1, 1.0), (1, 2, 1.0)]))
    d = gc.shortest_path_distances(prior)
    assert d[0, 2] == 2
    assert d[0, 0] == 0
    assert d[0, 1] == 1


def test_spd_disconnected_sentinel():
    prior = gc.symmetrize(gc.from_edge_list(4, [(0, 1, 1.0), (2, 3, 1.0)]))
    d = gc.shortest_path_distances(prior)
    assert d[0, 2] == 5  # K + 1 sentinel
    assert d[1, 3] == 5


def floyd_warshall(adj_bool):
    k = adj_bool.shape[0]
    inf = 10 ** 6
    d = np.where(adj_bool, 1, inf).astype(np.int64)
    np.fill_diagonal(d, 0)
    for m in range(k):
        d = np.minimum(d, d[:, m:m + 1] + d[m:m + 1, :])
    return d, inf


def test_spd_matches_floyd_warshall():
    rng = np.random.default_rng(6)
    for _ in range(10):
        k = int(rng.integers(2, 7))
        w = (rng.random((k, k)) < 0.35).astype(float)
        np.fill_diagonal(w, 0.0)
        a = gc.Adjacency(w)
        d = gc.shortest_path_distances(a)
        ref, inf = floyd_warshall(w > 0)
        expect = np.where(ref >= inf, k + 1, ref)
        np.testing.assert_array_equal(d, expect)


@pytest.mark.parametrize("op", [gc.symmetrize, lambda a: gc.row_normalize(a)])
def test_permutation_commutes(op):
    rng = np.random.default_rng(7)
    for _ in range(5):
        k = int(rng.integers(3, 7))
        a = gc.Adjacency(rng.uniform(size=(k, k)))
        perm = rng.permutation(k)
        direct = op(gc.permute(a, perm)).w
        routed = gc.permute(op(a), perm).w
        np.testing.assert_allclose(direct, routed, atol=1e-12)


def test_markov_permutation_commutes():
    rng = np.random.default_rng(8)
    k = 5
    a = random_stochastic(rng, k)
    perm = rng.permutation(k)
    direct = gc.markov_features(gc.permute(a, perm), hops=4).p
    routed = gc.markov_features(a, hops=4).p[np.ix_(perm, perm)]
    np.testing.assert_allclose(direct, routed, atol=1e-12)


def test_tensor_twins_match_numpy_bitwise():
    rng = np.random.default_rng(9)
    w = rng.uniform(size=(6, 6))
    w[2, :] = 0.0  # exercise the fallback row
    a_np = gc.row_normalize(gc.symmetrize(gc.Adjacency(w)))
    a_t = gc.row_normalize_t(gc.symmetrize_t(nm.constant(w)))
    np.testing.assert_array_equal(a_np.w, a_t.values)


def test_markov_stack_t_matches_features():
    rng = np.random.default_rng(10)
    a = random_stochastic(rng, 5)
    stack = gc.markov_stack_t(nm.constant(a.w), hops=4)
    mf = gc.markov_features(a, hops=4)
    for h, s in enumerate(stack):
        np.testing.assert_array_equal(s.values, mf.p[:, :, h])


def test_row_normalize_t_gradcheck():
    rng = np.random.default_rng(11)
    w = nm.Tensor(rng.uniform(0.2, 1.0, size=(4, 4)), requires_grad=True)
    mix = rng.normal(size=(4, 4))

    def f(params):
        out = gc.row_normalize_t(gc.symmetrize_t(params["w"]))
        return nm.sum_all(nm.mul(out, nm.constant(mix)))

    assert nm.grad_check(f, {"w": w}, rng=np.random.default_rng(12)) < 1e-7
