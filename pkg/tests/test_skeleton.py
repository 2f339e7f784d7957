import numpy as np
import pytest

from graphkp import graphcore as gc
from graphkp import numerics as nm
from graphkp import skeleton as sk

from conftest import zero_fill

C = 16
HEADS = 2


def build_params(seed=0, layers=2, delta_heads=2):
    return sk.init_skeleton(np.random.default_rng(seed), C, HEADS, layers, delta_heads)


def rand_prior(rng, k):
    w = (rng.random((k, k)) < 0.4).astype(float)
    w = np.triu(w, 1)
    return w + w.T


def test_refine_features_identity_with_zero_outputs():
    rng = np.random.default_rng(0)
    params = build_params()
    for layer in params.layers:
        zero_fill(layer.self_attn.wo, layer.pull_attn.wo, layer.push_attn.wo,
                  layer.gcn.w_node)
    f_k = nm.constant(rng.normal(size=(4, C)))
    f_img = nm.constant(rng.normal(size=(9, C)))
    prior = nm.constant(np.eye(4))
    out_k, out_img = sk.refine_features(prior, f_img, f_k, params)
    np.testing.assert_array_equal(out_k.values, f_k.values)
    np.testing.assert_array_equal(out_img.values, f_img.values)


def test_refine_features_permutation_equivariance():
    rng = np.random.default_rng(1)
    params = build_params(seed=2)
    k = 5
    prior = gc.row_normalize(gc.symmetrize(gc.Adjacency(rand_prior(rng, k)))).w
    f_k = rng.normal(size=(k, C))
    f_img = rng.normal(size=(9, C))
    perm = rng.permutation(k)
    out_k, out_img = sk.refine_features(nm.constant(prior), nm.constant(f_img),
                                        nm.constant(f_k), params)
    out_k_p, out_img_p = sk.refine_features(
        nm.constant(prior[np.ix_(perm, perm)]), nm.constant(f_img),
        nm.constant(f_k[perm]), params)
    np.testing.assert_allclose(out_k_p.values, out_k.values[perm], atol=1e-9)
    np.testing.assert_allclose(out_img_p.values, out_img.values, atol=1e-9)


def test_refine_features_single_layer_gradcheck():
    rng = np.random.default_rng(3)
    params = build_params(seed=4, layers=1)
    f_k = nm.Tensor(rng.normal(size=(3, C)), requires_grad=True)
    f_img = nm.Tensor(rng.normal(size=(5, C)), requires_grad=True)
    prior = gc.row_normalize(gc.symmetrize(gc.Adjacency(rand_prior(rng, 3)))).w
    wk = rng.normal(size=(3, C))
    wi = rng.normal(size=(5, C))
    named = dict(nm.named_tensors(params, "sp"))
    named.update({"f_k": f_k, "f_img": f_img})

    def f(_):
        out_k, out_img = sk.refine_features(nm.constant(prior), f_img, f_k, params)
        return nm.add(nm.sum_all(nm.mul(out_k, nm.constant(wk))),
                      nm.sum_all(nm.mul(out_img, nm.constant(wi))))

    err = nm.grad_check(f, named, samples=5, rng=np.random.default_rng(5))
    assert err < 1e-4


def test_predict_delta_zero_features():
    params = build_params(seed=6)
    delta = sk.predict_delta(nm.constant(np.zeros((4, C))), params.delta)
    np.testing.assert_array_equal(delta.values, np.zeros((4, 4)))


def test_predict_delta_identical_rows():
    rng = np.random.default_rng(7)
    params = build_params(seed=8)
    f = rng.normal(size=(4, C))
    f[2] = f[0]
    delta = sk.predict_delta(nm.constant(f), params.delta)
    np.testing.assert_allclose(delta.values[2], delta.values[0], atol=1e-12)
    np.testing.assert_allclose(delta.values[:, 2], delta.values[:, 0], atol=1e-12)


def test_predict_delta_gradcheck():
    rng = np.random.default_rng(9)
    params = build_params(seed=10)
    f_k = nm.Tensor(rng.normal(size=(4, C)), requires_grad=True)
    mix = rng.normal(size=(4, 4))
    named = dict(nm.named_tensors(params.delta, "delta"))
    named["f_k"] = f_k

    def f(_):
        return nm.sum_all(nm.mul(sk.predict_delta(f_k, params.delta), nm.constant(mix)))

    assert nm.grad_check(f, named, samples=8, rng=np.random.default_rng(11)) < 1e-4


def test_gate_combine_zero_gate_is_prior():
    rng = np.random.default_rng(12)
    prior = nm.constant(rand_prior(rng, 5))
    delta = nm.constant(rng.normal(size=(5, 5)) * 10)
    out = sk.gate_combine(prior, delta, nm.constant(np.asarray(0.0)))
    np.testing.assert_array_equal(out.values, prior.values)


def test_gate_combine_cancellation_zeroes():
    rng = np.random.default_rng(13)
    prior_w = rand_prior(rng, 4)
    out = sk.gate_combine(nm.constant(prior_w), nm.constant(-2.0 * prior_w),
                          nm.constant(np.asarray(1.0)))
    np.testing.assert_array_equal(out.values, np.zeros((4, 4)))


def test_gate_combine_creates_new_edge():
    prior_w = np.zeros((3, 3))
    prior_w[0, 1] = prior_w[1, 0] = 1.0
    delta = np.zeros((3, 3))
    delta[1, 2] = 0.7
    out = sk.gate_combine(nm.constant(prior_w), nm.constant(delta),
                          nm.constant(np.asarray(1.0)))
    assert out.values[1, 2] == pytest.approx(0.7)


def rand_streams(rng, k, hw=9):
    return (nm.constant(rng.normal(size=(hw, C))), nm.constant(rng.normal(size=(k, C))))


def test_refine_graph_untrained_equals_normalized_prior():
    rng = np.random.default_rng(14)
    params = build_params(seed=15)
    assert float(params.gate.values) == 0.0
    k = 6
    prior_w = rand_prior(rng, k)
    f_img, f_k = rand_streams(rng, k)
    rg = sk.refine_graph(prior_w, f_img, f_k, params)
    expect = gc.row_normalize(gc.symmetrize(gc.Adjacency(prior_w))).w
    assert np.abs(rg.a_tilde.values - expect).max() < 1e-12
    np.testing.assert_array_equal(rg.a_raw.values, prior_w)


def test_refine_graph_output_always_stochastic():
    rng = np.random.default_rng(16)
    params = build_params(seed=17)
    params.gate.values[...] = 5.0  # adversarial gate: large residual influence
    for _ in range(5):
        k = int(rng.integers(3, 7))
        prior_w = rand_prior(rng, k)
        f_img, f_k = rand_streams(rng, k)
        rg = sk.refine_graph(prior_w, f_img, f_k, params)
        assert (rg.a_raw.values >= 0.0).all()
        np.testing.assert_array_equal(rg.a_sym.values, rg.a_sym.values.T)
        np.testing.assert_allclose(rg.a_tilde.values.sum(axis=1), np.ones(k), atol=1e-9)


def test_refine_graph_permutation_equivariance():
    rng = np.random.default_rng(18)
    params = build_params(seed=19)
    params.gate.values[...] = 0.8
    k = 5
    prior_w = rand_prior(rng, k)
    f_img_v = rng.normal(size=(9, C))
    f_k_v = rng.normal(size=(k, C))
    perm = rng.permutation(k)
    rg = sk.refine_graph(prior_w, nm.constant(f_img_v), nm.constant(f_k_v), params)
    rg_p = sk.refine_graph(prior_w[np.ix_(perm, perm)], nm.constant(f_img_v),
                           nm.constant(f_k_v[perm]), params)
    np.testing.assert_allclose(rg_p.a_tilde.values,
                               rg.a_tilde.values[np.ix_(perm, perm)], atol=1e-9)
    np.testing.assert_allclose(rg_p.delta.values,
                               rg.delta.values[np.ix_(perm, perm)], atol=1e-9)


def test_refine_graph_k_mismatch():
    rng = np.random.default_rng(20)
    params = build_params(seed=21)
    f_img, f_k = rand_streams(rng, 4)
    with pytest.raises(nm.ShapeError):
        sk.refine_graph(rand_prior(rng, 5), f_img, f_k, params)


def test_refine_graph_gradcheck_through_normalization():
    rng = np.random.default_rng(22)
    params = build_params(seed=23, layers=1)
    params.gate.values[...] = 0.4  # off the relu kink at construction
    k = 4
    prior_w = rand_prior(rng, k) + 0.3  # strictly positive: smooth region
    f_img = nm.Tensor(rng.normal(size=(5, C)), requires_grad=True)
    f_k = nm.Tensor(rng.normal(size=(k, C)), requires_grad=True)
    mix = rng.normal(size=(k, k))
    named = dict(nm.named_tensors(params, "sp"))
    named.update({"f_k": f_k, "f_img": f_img})

    def f(_):
        rg = sk.refine_graph(prior_w, f_img, f_k, params)
        return nm.sum_all(nm.mul(rg.a_tilde, nm.constant(mix)))

    err = nm.grad_check(f, named, samples=5, rng=np.random.default_rng(24))
    assert err < 1e-4
