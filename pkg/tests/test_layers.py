import numpy as np
import pytest

import msagcn.tensor as T
from msagcn import layers as L
from msagcn.graphs import default_pyramid

PYR = default_pyramid(16)
G16 = PYR.scales[0]


def rand(shape, seed=0):
    return T.Tensor(np.random.default_rng(seed).normal(size=shape))


def test_named_parameters_walks_nested_modules_and_lists():
    rng = np.random.default_rng(0)
    block = L.AsstGcnBlock(3, 4, G16, 2, (5, 9), rng)
    names = [n for n, _ in block.named_parameters("blk")]
    assert "blk.gcn.weight" in names
    assert "blk.temporal.tcn1.weight" in names
    assert "blk.residual.weight" in names
    assert len(names) == len(set(names))


def test_assign_parameter_names():
    rng = np.random.default_rng(0)
    m = L.GcnLayer(2, 3, G16, rng)
    m.assign_parameter_names("gcn")
    assert m.weight.name == "gcn.weight"


def test_gcn_layer_shape_and_vertex_check():
    rng = np.random.default_rng(1)
    m = L.GcnLayer(3, 8, G16, rng)
    out = m.forward(rand((2, 3, 7, 16)))
    assert out.shape == (2, 8, 7, 16)
    with pytest.raises(T.ShapeError):
        m.forward(rand((2, 3, 7, 10)))


def test_astcn_branch_weights_are_convex():
    rng = np.random.default_rng(2)
    m = L.AsTcn(6, 5, 9, 1, rng)
    x = rand((3, 6, 14, 5), seed=3)
    out, w = m.forward(x, return_weights=True)
    assert out.shape == (3, 6, 14, 5)
    assert w.shape == (3, 2, 6)
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-12)
    assert (w.data >= 0).all()


def test_astcn_equal_branches_reduce_to_identity_mix():
    rng = np.random.default_rng(4)
    m = L.AsTcn(4, 5, 9, 1, rng)
    # make both branches compute the same function
    m.tcn2.weight.data[...] = 0.0
    m.tcn2.weight.data[:, :, 2:7] = m.tcn1.weight.data
    m.tcn2.bias.data[...] = m.tcn1.bias.data
    x = rand((2, 4, 12, 5), seed=5)
    u1 = m.tcn1.forward(x)
    u2 = m.tcn2.forward(x)
    np.testing.assert_allclose(u1.data, u2.data, atol=1e-12)
    out = m.forward(x)
    np.testing.assert_allclose(out.data, u1.data, atol=1e-12)


def test_astcn_rejects_equal_kernels():
    with pytest.raises(ValueError):
        L.AsTcn(4, 5, 5, 1, np.random.default_rng(0))


def test_asst_block_output_shape_and_stride():
    rng = np.random.default_rng(6)
    m = L.AsstGcnBlock(3, 8, G16, 2, (5, 9), rng)
    out = m.forward(rand((2, 3, 12, 16)), training=True)
    assert out.shape == (2, 8, 6, 16)


def test_asst_block_identity_residual_when_shapes_match():
    rng = np.random.default_rng(7)
    m = L.AsstGcnBlock(4, 4, G16, 1, (5, 9), rng)
    assert m.residual is None
    assert m.forward(rand((2, 4, 12, 16)), training=True).shape == (2, 4, 12, 16)


def test_asst_block_single_tcn_mode():
    rng = np.random.default_rng(8)
    m = L.AsstGcnBlock(3, 4, G16, 1, (5, 9), rng, temporal_mode="single_tcn")
    assert isinstance(m.temporal, L.TemporalConv)
    assert m.temporal.kernel == 5
    with pytest.raises(ValueError):
        L.AsstGcnBlock(3, 4, G16, 1, (5, 9), rng, temporal_mode="bogus")


def test_spatial_attention_gates_between_zero_and_one():
    rng = np.random.default_rng(9)
    m = L.SpatialAttention(rng)
    x = rand((2, 6, 5, 10), seed=10)
    out = m.forward(x)
    assert out.shape == x.shape
    gate = out.data / np.where(np.abs(x.data) < 1e-12, 1.0, x.data)
    mask = np.abs(x.data) >= 1e-12
    assert (gate[mask] > 0).all() and (gate[mask] < 1).all()


def test_csfm_attention_is_row_stochastic():
    rng = np.random.default_rng(11)
    m = L.CsfmBlock(6, rng)
    xa = rand((3, 6, 5, 16), seed=12)
    xb = rand((3, 6, 5, 10), seed=13)
    a = m.attention(xa, xb)
    assert a.shape == (3, 16, 10)
    np.testing.assert_allclose(a.data.sum(axis=2), 1.0, atol=1e-12)
    assert (a.data >= 0).all() and (a.data <= 1).all()


def test_csfm_forward_is_residual_plus_messages():
    rng = np.random.default_rng(14)
    m = L.CsfmBlock(4, rng)
    xa = rand((2, 4, 3, 16), seed=15)
    xb = rand((2, 4, 3, 10), seed=16)
    out, a = m.forward(xa, xb, return_attention=True)
    msg = np.einsum("bpq,bctq->bctp", a.data, xb.data)
    mapped = np.einsum("bctv,co->botv", msg, m.out_w.data) \
        + m.out_b.data[None, :, None, None]
    np.testing.assert_allclose(out.data, xa.data + mapped, atol=1e-12)


def test_csfm_requires_matching_bct():
    rng = np.random.default_rng(17)
    m = L.CsfmBlock(4, rng)
    with pytest.raises(T.ShapeError):
        m.forward(rand((2, 4, 3, 16)), rand((2, 4, 5, 10)))


def test_scale_fusion_weights_convex_and_shapes_checked():
    rng = np.random.default_rng(18)
    m = L.ScaleAttentionFusion(5, 3, rng)
    xs = [rand((2, 5, 4, 16), seed=20 + i) for i in range(3)]
    out, w = m.forward(xs, return_weights=True)
    assert out.shape == (2, 5, 4, 16)
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-12)
    # convex combination: output within per-element min/max envelope
    stackd = np.stack([x.data for x in xs])
    assert (out.data <= stackd.max(axis=0) + 1e-12).all()
    assert (out.data >= stackd.min(axis=0) - 1e-12).all()
    with pytest.raises(T.ShapeError):
        m.forward(xs[:2])
    with pytest.raises(T.ShapeError):
        m.forward([xs[0], xs[1], rand((2, 5, 4, 10))])


def test_classifier_head_outputs_distribution():
    rng = np.random.default_rng(21)
    m = L.ClassifierHead(6, 4, rng)
    p = m.forward(rand((3, 6, 5, 16), seed=22))
    assert p.shape == (3, 4)
    np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-12)
    assert (p.data > 0).all()


def test_uniform_init_bound():
    rng = np.random.default_rng(23)
    w = L.uniform_init(rng, (1000,), fan_in=24)
    bound = np.sqrt(6.0 / 24)
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.8 * bound
