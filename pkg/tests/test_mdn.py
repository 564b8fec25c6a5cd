import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtadl import tensor as T
from vtadl.config import full_scale, tiny
from vtadl.mdn import MixtureHead, MixtureParams, nll, perturb_features
from vtadl.model import EncodedPatches
from vtadl.tensor import ShapeError, Tensor

from oracles import naive_mixture_nll


def params_from(w, mu, sigma):
    return MixtureParams(Tensor(np.log(w)), Tensor(mu), Tensor(sigma))


def test_zero_logits_give_uniform_weights_and_zero_sigma_preactivation_gives_ln2():
    head = MixtureHead(tiny(mixture_components=5), 0)
    for p in head.params.values():
        p.data[:] = 0.0
    mp = head.predict_params(Tensor(np.random.default_rng(0).normal(size=(4, 8))))
    np.testing.assert_allclose(mp.weights, 0.2, atol=1e-12)
    np.testing.assert_allclose(mp.scales.data, math.log(2) + 1e-4, atol=1e-12)


def test_full_scale_component_count():
    assert full_scale().mixture_components == 150


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1e3))
def test_head_output_constraints(seed, scale):
    rng = np.random.default_rng(seed)
    head = MixtureHead(tiny(mixture_components=3), seed % 1000)
    mp = head.predict_params(Tensor(rng.normal(size=(2, 4, 8)) * scale))
    np.testing.assert_allclose(mp.weights.sum(-1), 1.0, atol=1e-6)
    assert np.all(mp.weights >= 0)
    assert np.all(mp.scales.data > 0)


def test_head_rejects_wrong_feature_dim():
    with pytest.raises(ShapeError):
        MixtureHead(tiny(), 0).predict_params(Tensor(np.zeros((4, 5))))


def test_standard_normal_closed_form():
    per, total = nll(params_from(np.ones((1, 1)), np.zeros((1, 1, 1)), np.ones((1, 1, 1))), np.zeros((1, 1)))
    assert per.data[0] == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)
    assert total.data == pytest.approx(0.9189385, abs=1e-7)


def test_identical_components_collapse():
    rng = np.random.default_rng(1)
    mu, sigma = rng.normal(size=(3, 1, 4)), rng.uniform(0.5, 2, (3, 1, 4))
    y = rng.normal(size=(3, 4))
    single, _ = nll(params_from(np.ones((3, 1)), mu, sigma), y)
    w = rng.dirichlet(np.ones(5), size=3)
    mixed, _ = nll(params_from(w, np.repeat(mu, 5, 1), np.repeat(sigma, 5, 1)), y)
    np.testing.assert_allclose(mixed.data, single.data, rtol=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_matches_naive_density(seed):
    rng = np.random.default_rng(seed)
    n, k, d = 3, 4, 2
    w = rng.dirichlet(np.ones(k), size=n)
    mu, sigma = rng.normal(size=(n, k, d)), rng.uniform(0.3, 2.0, (n, k, d))
    y = rng.normal(size=(n, d))
    per, total = nll(params_from(w, mu, sigma), y)
    ref = naive_mixture_nll(w, mu, sigma, y)
    np.testing.assert_allclose(per.data, ref, atol=1e-8)
    assert total.data == pytest.approx(ref.mean(), abs=1e-8)


def test_component_permutation_invariance():
    rng = np.random.default_rng(2)
    w = rng.dirichlet(np.ones(4), size=2)
    mu, sigma = rng.normal(size=(2, 4, 3)), rng.uniform(0.5, 1.5, (2, 4, 3))
    y = rng.normal(size=(2, 3))
    perm = [2, 0, 3, 1]
    a, _ = nll(params_from(w, mu, sigma), y)
    b, _ = nll(params_from(w[:, perm], mu[:, perm], sigma[:, perm]), y)
    np.testing.assert_allclose(a.data, b.data, rtol=1e-12)


def test_lower_bound_for_wide_components():
    rng = np.random.default_rng(3)
    d = 5
    w = rng.dirichlet(np.ones(3), size=4)
    per, _ = nll(params_from(w, rng.normal(size=(4, 3, d)), rng.uniform(1.0, 3.0, (4, 3, d))), rng.normal(size=(4, d)))
    assert np.all(per.data >= d / 2 * math.log(2 * math.pi) - 1e-12)


def test_nonpositive_sigma_rejected():
    with pytest.raises(ValueError, match="positive"):
        nll(params_from(np.ones((1, 1)), np.zeros((1, 1, 1)), np.zeros((1, 1, 1))), np.zeros((1, 1)))


def test_target_shape_checked():
    with pytest.raises(ShapeError):
        nll(params_from(np.ones((1, 1)), np.zeros((1, 1, 2)), np.ones((1, 1, 2))), np.zeros((1, 3)))


def test_head_gradient_full_check():
    cfg = tiny(mixture_components=2)
    head = MixtureHead(cfg, 4)
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    y = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    f = lambda: nll(head.predict_params(x), y)[1]
    assert T.gradcheck(f, [x, y] + list(head.params.values())) < 1e-3


def test_reduced_target_dimension():
    cfg = tiny(mdn_dim=3)
    head = MixtureHead(cfg, 0)
    feats = Tensor(np.random.default_rng(5).normal(size=(4, 8)))
    mp = head.predict_params(feats)
    assert mp.means.shape == (4, 2, 3)
    per, _ = nll(mp, head.target(feats))
    assert per.shape == (4,)


# -- noise ---------------------------------------------------------------------
def enc(x):
    return EncodedPatches(Tensor(x), 1, x.shape[0])


def test_zero_noise_and_eval_mode_are_identity():
    x = np.random.default_rng(6).normal(size=(4, 3))
    np.testing.assert_array_equal(perturb_features(enc(x), 0.0, np.random.default_rng(0)).features.data, x)
    np.testing.assert_array_equal(perturb_features(enc(x), 0.2, None, training=False).features.data, x)


def test_noise_standard_deviation():
    x = np.zeros((1000, 1000))
    out = perturb_features(enc(x), 0.2, np.random.Generator(np.random.Philox(0))).features.data
    assert abs(out.std() - 0.2) < 0.003
    assert abs(out.mean()) < 0.003


def test_noise_determinism():
    x = np.zeros((5, 4))
    draw = lambda s: perturb_features(enc(x), 0.2, np.random.Generator(np.random.Philox(s))).features.data
    np.testing.assert_array_equal(draw(1), draw(1))
    assert not np.array_equal(draw(1), draw(2))


def test_negative_noise_rejected():
    with pytest.raises(ValueError):
        perturb_features(enc(np.zeros((2, 2))), -0.1, None)
