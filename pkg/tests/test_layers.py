import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfekit.autograd import ShapeError, Tensor
from cfekit.layers import (
    CFEConfig,
    Conv2d,
    FFBConfig,
    InceptionBlock,
    RField,
    Sequential,
    build_cfe,
    build_ffb,
)


def rand(shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape).astype(np.float32))


@pytest.mark.parametrize("c", [16, 32, 64])
def test_cfe_is_drop_in(c):
    block = build_cfe(CFEConfig(c), np.random.default_rng(0))
    assert block(rand((2, c, 16, 16))).shape == (2, c, 16, 16)
    assert block(rand((1, c, 7, 5))).shape == (1, c, 7, 5)


def test_cfe_config_validation():
    with pytest.raises(ValueError):
        CFEConfig(31)
    with pytest.raises(ValueError):
        CFEConfig(32, k=6)
    with pytest.raises(ValueError):
        CFEConfig(32, bottleneck_ratio=0.0)
    with pytest.raises(ShapeError):
        build_cfe(CFEConfig(16))(rand((1, 8, 4, 4)))
    with pytest.raises(ValueError):
        CFEConfig(16, branch_scale=0.0)


def test_cfe_branch_scale_sets_only_the_expand_gamma():
    block = build_cfe(CFEConfig(8, branch_scale=0.1), np.random.default_rng(0))
    plain = build_cfe(CFEConfig(8), np.random.default_rng(0))
    for side in ("left", "right"):
        a, b = getattr(block, side), getattr(plain, side)
        np.testing.assert_allclose(a.expand.bn.params.gamma.data, 0.1)
        np.testing.assert_array_equal(a.reduce.bn.params.gamma.data, b.reduce.bn.params.gamma.data)
        np.testing.assert_array_equal(a.expand.conv.weight.data, b.expand.conv.weight.data)


def test_cfe_branch_layout():
    block = build_cfe(CFEConfig(32, k=7))
    left = [c.weight.shape for c in block.left.convs()]
    right = [c.weight.shape for c in block.right.convs()]
    assert left == [(16, 32, 1, 1), (16, 16, 1, 7), (16, 16, 7, 1), (16, 16, 1, 1)]
    assert right == [(16, 32, 1, 1), (16, 16, 7, 1), (16, 16, 1, 7), (16, 16, 1, 1)]


def _impulse_footprint(module, c, size, at):
    module.eval()
    base = np.zeros((1, c, size, size), np.float64)
    module.astype(np.float64)
    ref = module(Tensor(base)).data
    bumped = base.copy()
    bumped[0, :, at[0], at[1]] = 1.0
    diff = np.abs(module(Tensor(bumped)).data - ref).sum(axis=(0, 1)) > 0
    rows, cols = np.nonzero(diff)
    return rows.min(), rows.max(), cols.min(), cols.max()


def _positive_branch(branch):
    # positive weights keep every ReLU open, so the footprint is the full support
    for conv in branch.convs():
        conv.weight.data[:] = np.abs(conv.weight.data) + 0.01
    return branch


@pytest.mark.parametrize("side", ["left", "right"])
def test_cfe_branch_impulse_footprint_is_k_by_k(side):
    block = build_cfe(CFEConfig(4, k=7), np.random.default_rng(1))
    branch = _positive_branch(getattr(block, side))
    r0, r1, c0, c1 = _impulse_footprint(branch, 4, 21, (10, 10))
    assert (r1 - r0 + 1, c1 - c0 + 1) == (7, 7)
    assert branch.receptive(RField()).size == 7


def test_cfe_zero_branch_collapses_to_relu_identity():
    block = build_cfe(CFEConfig(8))
    for branch in (block.left, block.right):
        for conv in branch.convs():
            conv.weight.data[:] = 0.0
    x = rand((2, 8, 6, 6))
    for training in (True, False):
        block.train(training)
        np.testing.assert_array_equal(block(x).data, np.maximum(x.data, 0))


def _transpose_conv_weights(src, dst):
    dst.weight.data[:] = src.weight.data.transpose(0, 1, 3, 2)


def test_cfe_branch_symmetry_under_transpose():
    block = build_cfe(CFEConfig(8, k=5), np.random.default_rng(2))
    mirrored = build_cfe(CFEConfig(8, k=5), np.random.default_rng(3))
    # mirrored.left (row first) takes the transposed right branch and vice versa
    for src, dst in ((block.right, mirrored.left), (block.left, mirrored.right)):
        for a, b in zip(src.convs(), dst.convs()):
            _transpose_conv_weights(a, b)
    block.eval()
    mirrored.eval()
    x = rand((1, 8, 9, 9), seed=4)
    xt = Tensor(x.data.transpose(0, 1, 3, 2).copy())
    np.testing.assert_allclose(mirrored.left(xt).data, block.right(x).data.transpose(0, 1, 3, 2), atol=1e-5)
    np.testing.assert_allclose(mirrored.right(xt).data, block.left(x).data.transpose(0, 1, 3, 2), atol=1e-5)
    # with the branches swapped the block output is the transposed output, channel halves swapped
    out = block(x).data
    swapped = np.concatenate([block.right(x).data, block.left(x).data], axis=1)
    out_t = mirrored(xt).data
    np.testing.assert_allclose(out_t, np.maximum(swapped.transpose(0, 1, 3, 2) + xt.data, 0), atol=1e-5)
    assert out_t.shape == out.shape


def test_ffb_shapes_and_errors():
    ffb = build_ffb(FFBConfig(64, 128, 64))
    out = ffb(rand((1, 64, 16, 16)), rand((1, 128, 8, 8), 1))
    assert out.shape == (1, 64, 16, 16)
    with pytest.raises(ShapeError):
        ffb(rand((1, 64, 16, 16)), rand((1, 128, 6, 6)))


def test_ffb_zero_sources_are_finite():
    ffb = build_ffb(FFBConfig(8, 16, 8))
    ffb.eval()
    out = ffb(Tensor(np.zeros((1, 8, 8, 8), np.float32)), Tensor(np.zeros((1, 16, 4, 4), np.float32)))
    assert np.isfinite(out.data).all()
    beta = ffb.fuse.bn.params.beta.data
    np.testing.assert_allclose(out.data, np.maximum(beta, 0).reshape(1, -1, 1, 1) * np.ones_like(out.data))


def test_ffb_output_mixes_both_sources():
    ffb = build_ffb(FFBConfig(8, 8, 8), np.random.default_rng(0))
    a = rand((4, 8, 8, 8), 1)
    b = rand((4, 8, 4, 4), 2)
    out = ffb(a, b).data.mean(axis=1).ravel()
    up = np.repeat(np.repeat(b.data, 2, axis=2), 2, axis=3)
    for src in (a.data, up):
        r = abs(np.corrcoef(out, src.mean(axis=1).ravel())[0, 1])
        assert 0 < r < 1


def test_inception_block_shape_and_widths():
    blk = InceptionBlock(16, np.random.default_rng(0))
    assert blk(rand((1, 16, 8, 8))).shape == (1, 16, 8, 8)
    assert blk.p1.conv.weight.shape[0] == 4 and blk.p3.conv.weight.shape[0] == 4
    with pytest.raises(ValueError):
        InceptionBlock(18, np.random.default_rng(0))


def test_receptive_field_composition():
    rng = np.random.default_rng(0)
    assert Conv2d(1, 1, 3, rng).receptive(RField()).size == 3
    pair = Sequential(Conv2d(1, 1, (1, 7), rng), Conv2d(1, 1, (7, 1), rng))
    assert pair.receptive(RField()).size == 7
    strided = Sequential(Conv2d(1, 1, 3, rng, stride=2), Conv2d(1, 1, 3, rng))
    assert strided.receptive(RField()).size == 7


def test_state_dict_roundtrip():
    a = build_cfe(CFEConfig(8), np.random.default_rng(0))
    b = build_cfe(CFEConfig(8), np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    x = rand((1, 8, 5, 5))
    a.eval()
    b.eval()
    np.testing.assert_array_equal(a(x).data, b(x).data)
    with pytest.raises(KeyError):
        b.load_state_dict({"nonsense": np.zeros(1)})


@given(st.sampled_from([3, 5, 7]), st.integers(1, 4).map(lambda v: 2 * v), st.integers(5, 12))
@settings(max_examples=15, deadline=None)
def test_cfe_shape_property(k, c, size):
    block = build_cfe(CFEConfig(c, k=k), np.random.default_rng(0))
    assert block(rand((1, c, size, size))).shape == (1, c, size, size)
