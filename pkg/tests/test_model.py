import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtadl import tensor as T
from vtadl.config import ConfigError, ModelConfig, desk_scale, full_scale, tiny
from vtadl.model import VTADL, EncodedPatches, embed, encoder_block, msa, patchify, unpatchify
from vtadl.tensor import ShapeError, Tensor
from vtadl.trainer import Network, OptimState, adam_step


def rand_weights(rng, d, hidden=None, prefix=""):
    hidden = hidden or 4 * d
    w = {}
    for n in "qkvo":
        w[f"{prefix}{n}.W"] = Tensor(rng.normal(size=(d, d)) / np.sqrt(d), requires_grad=True)
        w[f"{prefix}{n}.b"] = Tensor(rng.normal(size=d) * 0.1, requires_grad=True)
    return w


def block_weights(rng, d):
    w = rand_weights(rng, d, prefix="msa.")
    w.update({
        "ln1.gamma": Tensor(rng.uniform(0.5, 1.5, d), requires_grad=True),
        "ln1.beta": Tensor(rng.normal(size=d) * 0.1, requires_grad=True),
        "ln2.gamma": Tensor(rng.uniform(0.5, 1.5, d), requires_grad=True),
        "ln2.beta": Tensor(rng.normal(size=d) * 0.1, requires_grad=True),
        "mlp1.W": Tensor(rng.normal(size=(d, 4 * d)) / np.sqrt(d), requires_grad=True),
        "mlp1.b": Tensor(np.zeros(4 * d), requires_grad=True),
        "mlp2.W": Tensor(rng.normal(size=(4 * d, d)) / np.sqrt(4 * d), requires_grad=True),
        "mlp2.b": Tensor(np.zeros(d), requires_grad=True),
    })
    return w


# -- patchify -----------------------------------------------------------------
def test_full_scale_patch_count():
    grid = patchify(np.zeros((512, 512, 3), np.float32), 64)
    assert grid.patches.shape == (64, 12288)
    assert full_scale().num_patches == 64


def test_single_patch_is_flattened_image():
    img = np.random.default_rng(0).normal(size=(8, 8, 2))
    grid = patchify(img, 8)
    np.testing.assert_array_equal(grid.patches[0], img.reshape(-1))


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 4, 8]), st.integers(1, 3))
def test_patchify_round_trip(seed, p, c):
    img = np.random.default_rng(seed).normal(size=(32, 32, c)).astype(np.float32)
    grid = patchify(img, p)
    assert grid.num_patches == (32 // p) ** 2
    np.testing.assert_array_equal(unpatchify(grid), img)


def test_patch_raster_order():
    img = np.arange(16, dtype=float).reshape(4, 4, 1)
    grid = patchify(img, 2)
    # patch 1 is row 0, col 1
    np.testing.assert_array_equal(grid.patches[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(grid.patches[2], [8, 9, 12, 13])


def test_patchify_rejects_indivisible():
    with pytest.raises(ShapeError, match="divisible"):
        patchify(np.zeros((10, 8, 1)), 4)


# -- embedding -----------------------------------------------------------------
def test_embed_zero():
    out = embed(np.zeros((4, 6)), Tensor(np.ones((6, 3))), Tensor(np.zeros((4, 3))))
    np.testing.assert_array_equal(out.data, 0.0)


def test_embed_one_hot_selects_row():
    rng = np.random.default_rng(1)
    E, pos = rng.normal(size=(5, 3)), rng.normal(size=(2, 3))
    patches = np.zeros((2, 5))
    patches[0, 3] = 1.0
    patches[1, 0] = 1.0
    out = embed(patches, Tensor(E), Tensor(pos)).data
    np.testing.assert_allclose(out[0], E[3] + pos[0])
    np.testing.assert_allclose(out[1], E[0] + pos[1])


def test_embed_permutation_equivariant_without_positions():
    rng = np.random.default_rng(2)
    patches, E = rng.normal(size=(6, 4)), Tensor(rng.normal(size=(4, 3)))
    perm = rng.permutation(6)
    a = embed(patches, E, Tensor(np.zeros((6, 3)))).data
    b = embed(patches[perm], E, Tensor(np.zeros((6, 3)))).data
    np.testing.assert_allclose(b, a[perm])


def test_embed_shape_error():
    with pytest.raises(ShapeError):
        embed(np.zeros((4, 6)), Tensor(np.ones((5, 3))), Tensor(np.zeros((4, 3))))


# -- attention -----------------------------------------------------------------
def test_single_token_attention():
    rng = np.random.default_rng(3)
    w = rand_weights(rng, 4)
    z = Tensor(rng.normal(size=(1, 4)))
    out, attn = msa(z, 2, w, return_attention=True)
    np.testing.assert_array_equal(attn, np.ones((2, 1, 1)))
    v = z.data @ w["v.W"].data + w["v.b"].data
    np.testing.assert_allclose(out.data, v @ w["o.W"].data + w["o.b"].data, rtol=1e-12)


def test_uniform_attention_averages_values():
    rng = np.random.default_rng(4)
    d = 4
    w = rand_weights(rng, d)
    for n in "qk":
        w[f"{n}.W"].data[:] = 0.0
        w[f"{n}.b"].data[:] = 0.0
    w["v.W"].data[:] = np.eye(d)
    w["v.b"].data[:] = 0.0
    w["o.W"].data[:] = np.eye(d)
    w["o.b"].data[:] = 0.0
    z = rng.normal(size=(5, d))
    out = msa(Tensor(z), 2, w).data
    np.testing.assert_allclose(out, np.tile(z.mean(0), (5, 1)), rtol=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.integers(1, 9), st.sampled_from([1, 2, 4]))
def test_attention_rows_sum_to_one(seed, n, heads):
    rng = np.random.default_rng(seed)
    _, attn = msa(Tensor(rng.normal(size=(2, n, 8)) * 3), heads, rand_weights(rng, 8), return_attention=True)
    np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-6)


def test_msa_head_divisibility():
    with pytest.raises(ShapeError, match="divisible"):
        msa(Tensor(np.zeros((3, 6))), 4, rand_weights(np.random.default_rng(0), 6))


def test_msa_gradient():
    rng = np.random.default_rng(5)
    w = rand_weights(rng, 4)
    z = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    proj = rng.normal(size=(3, 4))
    assert T.gradcheck(lambda: (msa(z, 2, w) * proj).sum(), [z] + list(w.values())) < 1e-4


# -- encoder block -------------------------------------------------------------
def test_block_is_identity_with_zero_output_projections():
    rng = np.random.default_rng(6)
    w = block_weights(rng, 8)
    for k in ("msa.o.W", "msa.o.b", "mlp2.W", "mlp2.b"):
        w[k].data[:] = 0.0
    z = rng.normal(size=(5, 8))
    np.testing.assert_array_equal(encoder_block(Tensor(z), 2, w).data, z)


def test_block_shape_and_gradient():
    rng = np.random.default_rng(7)
    w = block_weights(rng, 4)
    z = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    out = encoder_block(z, 2, w)
    assert out.shape == z.shape
    proj = rng.normal(size=out.shape)
    assert T.gradcheck(lambda: (encoder_block(z, 2, w) * proj).sum(), [z] + list(w.values())) < 1e-4


# -- full network ----------------------------------------------------------------
def tiny_model(seed=0, **kw):
    return VTADL(tiny(**kw), seed)


def test_positional_embedding_has_one_row_per_patch():
    m = tiny_model()
    assert m.params["embed.pos"].shape == (m.config.num_patches, m.config.embed_dim)


def test_encoder_equivariance_holds_without_positions_and_breaks_with_them():
    m = tiny_model()
    rng = np.random.default_rng(8)
    x = rng.uniform(-1, 1, (1, 8, 8, 1))
    grid = patchify(x, 4)
    perm = np.array([2, 0, 3, 1])
    shuffled = grid.patches[:, perm]
    img_perm = unpatchify(type(grid)(shuffled, grid.grid_rows, grid.grid_cols, 4, 1))

    m.params["embed.pos"].data[:] = 0.0
    a = m.encode(x).features.data
    b = m.encode(img_perm).features.data
    np.testing.assert_allclose(b[:, :], a[:, perm], atol=1e-12)

    m.params["embed.pos"].data[:] = rng.normal(size=m.params["embed.pos"].shape)
    a = m.encode(x).features.data
    b = m.encode(img_perm).features.data
    assert not np.allclose(b, a[:, perm])


def test_projection_is_linear_and_bias_free():
    m = tiny_model()
    rng = np.random.default_rng(9)
    f = Tensor(rng.normal(size=(4, 8)))
    enc = EncodedPatches(f, 2, 2)
    v = m.project_reconstruction(enc).data
    assert v.shape == (m.config.recon_dim,)
    np.testing.assert_array_equal(m.project_reconstruction(EncodedPatches(f * 0.0, 2, 2)).data, 0.0)
    np.testing.assert_allclose(m.project_reconstruction(EncodedPatches(f * 2.0, 2, 2)).data, 2 * v, rtol=1e-12)


def test_full_scale_projection_length():
    assert full_scale().recon_dim == 512
    assert full_scale().seed_shape == (2, 16, 16)


def test_decoder_output_range_and_zero_case():
    m = tiny_model()
    rng = np.random.default_rng(10)
    out = m.decode(Tensor(rng.normal(size=(3, 16)) * 10), training=True).data
    assert out.shape == (3, 8, 8, 1)
    assert np.all(np.abs(out) < 1)
    # fresh running statistics: zero seed, zero biases stay zero through every stage
    z = tiny_model().decode(Tensor(np.zeros(16)), training=False).data
    np.testing.assert_array_equal(z, 0.0)


def test_desk_scale_decoder_shape():
    cfg = desk_scale()
    m = VTADL(cfg, 0)
    v = Tensor(np.zeros((1, cfg.recon_dim), np.float32))
    assert m.decode(v, training=False).shape == (1, 64, 64, 1)


def test_full_scale_decoder_shape():
    cfg = full_scale()
    m = VTADL(cfg, 0)
    with T.no_grad():
        out = m.decode(Tensor(np.zeros(512, np.float32)), training=False)
    assert out.shape == (512, 512, 3)


def test_forward_shapes():
    m = tiny_model()
    x = np.random.default_rng(11).uniform(-1, 1, (8, 8, 1))
    recon, enc = m.forward(x)
    assert recon.shape == x.shape
    assert enc.features.shape == (4, 8)
    assert (enc.grid_rows, enc.grid_cols) == (2, 2)
    with pytest.raises(ShapeError):
        m.forward(np.zeros((8, 4, 1)))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(image_height=100)
    with pytest.raises(ConfigError):
        tiny(num_heads=3)
    with pytest.raises(ConfigError):
        tiny(noise_std=-1.0)
    with pytest.raises(ConfigError):
        tiny(mixture_components=0)
    with pytest.raises(ConfigError, match="stride-2"):
        tiny(decoder_stages=5, decoder_channels=(4, 4, 4, 4))


def test_full_tiny_model_gradient():
    cfg = tiny()
    net = Network(cfg, seed=3)
    x = np.random.default_rng(12).uniform(-1, 1, (2, 8, 8, 1))
    params = list(net.params.values())
    loss = lambda: net.loss(x, np.random.Generator(np.random.Philox(5)), training=True)[0]
    idx_rng = np.random.default_rng(13)
    # 25 randomly sampled parameter entries across the whole network
    picks = idx_rng.choice(sum(p.data.size for p in params), 25, replace=False)
    offsets = np.cumsum([0] + [p.data.size for p in params])
    indices = [[] for _ in params]
    for g in picks:
        i = np.searchsorted(offsets, g, side="right") - 1
        indices[i].append(int(g - offsets[i]))
    chosen = [(p, ix) for p, ix in zip(params, indices) if ix]
    err = T.gradcheck(loss, [p for p, _ in chosen], indices={i: ix for i, (_, ix) in enumerate(chosen)})
    assert err < 1e-3


def test_overfits_single_image():
    cfg = tiny()
    net = Network(cfg, seed=0)
    x = np.random.default_rng(14).uniform(-0.8, 0.8, (1, 8, 8, 1))
    state = OptimState(lr=1e-2, weight_decay=0.0)
    rng = np.random.Generator(np.random.Philox(0))
    for _ in range(50):
        for p in net.params.values():
            p.grad = None
        loss, parts = net.loss(x, rng, training=True)
        T.backward(loss)
        adam_step(net.params, {k: p.grad for k, p in net.params.items()}, state)
    assert parts.mse < 0.05
