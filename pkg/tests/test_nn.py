import numpy as np
import pytest

from actloc.nn import (
    Conv3d,
    ForwardRecordError,
    FrozenBatchNorm,
    GlobalAvgPool,
    Linear,
    MaxPool3d,
    ReLU,
    Sigmoid,
    checkpoint,
)
from actloc.nn import functional as F
from oracles import max_rel_error, numeric_grad

GRAD_TOL = 1e-4


def check_layer(layer, x, rng):
    """Compare analytic input and parameter gradients with central differences."""
    proj = rng.standard_normal(layer.forward(x, train=False).shape)

    def loss():
        return float((layer.forward(x, train=False) * proj).sum())

    layer.zero_grad()
    layer.forward(x)
    dx = layer.backward(proj)
    errors = {"input": max_rel_error(dx, numeric_grad(loss, x))}
    for name, value in layer.params.items():
        errors[name] = max_rel_error(layer.grads[name], numeric_grad(loss, value))
    return errors


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 3, 4, 5, 1))
    conv = Conv3d(1, 1, 1)
    conv.params["weight"][...] = 1.0
    np.testing.assert_array_equal(conv(x), x)


def test_conv_all_ones_valid():
    out, _ = F.conv3d_forward(np.ones((1, 3, 3, 3, 1)), np.ones((3, 3, 3, 1, 1)), None,
                              1, "valid")
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.item() == 27.0


def test_conv_same_stride_shape():
    rng = np.random.default_rng(0)
    conv = Conv3d(3, 8, 3, stride=(1, 2, 2), rng=rng)
    assert conv(np.zeros((1, 16, 64, 64, 3)), train=False).shape == (1, 16, 32, 32, 8)


def test_conv_matches_direct_summation():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 4, 5, 6, 2))
    w = rng.standard_normal((2, 3, 2, 2, 3))
    b = rng.standard_normal(3)
    out, _ = F.conv3d_forward(x, w, b, (1, 2, 1), "valid")
    ref = np.zeros(out.shape)
    for n in range(2):
        for t in range(out.shape[1]):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    patch = x[n, t : t + 2, 2 * i : 2 * i + 3, j : j + 2]
                    ref[n, t, i, j] = np.einsum("thwc,thwco->o", patch, w) + b
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_same_padding_puts_extra_on_trailing_side():
    assert F.same_pads(4, 2, 1) == (0, 1)
    assert F.same_pads(5, 3, 2) == (1, 1)
    assert F.same_pads(64, 3, 2) == (0, 1)


def test_conv_channel_mismatch_names_axis():
    with pytest.raises(ValueError, match="channel"):
        F.conv3d_forward(np.zeros((1, 2, 2, 2, 3)), np.zeros((1, 1, 1, 2, 1)), None)


def test_conv_linearity():
    rng = np.random.default_rng(2)
    conv = Conv3d(2, 3, (3, 3, 3), stride=(2, 1, 2), rng=rng)
    conv.params["bias"][...] = 0.0
    x, y = rng.standard_normal((2, 1, 5, 6, 7, 2))
    lhs = conv(2.5 * x - 0.75 * y, train=False)
    rhs = 2.5 * conv(x, train=False) - 0.75 * conv(y, train=False)
    assert np.abs(lhs - rhs).max() < 1e-9


def test_conv_deterministic():
    rng = np.random.default_rng(3)
    conv = Conv3d(2, 4, 3, rng=rng)
    x = rng.standard_normal((1, 4, 6, 6, 2))
    assert conv(x, train=False).tobytes() == conv(x, train=False).tobytes()


def test_maxpool_identity_and_constant():
    x = np.random.default_rng(0).standard_normal((1, 2, 3, 4, 2))
    np.testing.assert_array_equal(MaxPool3d(1)(x), x)
    const = np.full((1, 4, 4, 4, 2), 3.5)
    np.testing.assert_array_equal(MaxPool3d(2)(const), np.full((1, 2, 2, 2, 2), 3.5))


def test_maxpool_matches_window_max():
    x = np.random.default_rng(4).standard_normal((1, 4, 4, 4, 2))
    out = MaxPool3d(2, 2)(x, train=False)
    for t in range(2):
        for i in range(2):
            for j in range(2):
                ref = x[0, 2 * t : 2 * t + 2, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max(axis=(0, 1, 2))
                np.testing.assert_array_equal(out[0, t, i, j], ref)


def test_maxpool_tie_routes_to_first_element():
    pool = MaxPool3d(2)
    x = np.ones((1, 2, 2, 2, 1))
    pool(x)
    dx = pool.backward(np.ones((1, 1, 1, 1, 1)))
    assert dx[0, 0, 0, 0, 0] == 1.0
    assert dx.sum() == 1.0


def test_maxpool_rejects_zero_window():
    with pytest.raises(ValueError):
        MaxPool3d((0, 1, 1))(np.zeros((1, 2, 2, 2, 1)))


def test_batchnorm_identity_zero_scale_and_formula():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 4, 4, 3))
    bn = FrozenBatchNorm(3)
    out = bn(x, train=False)
    assert np.max(np.abs(out - x) / np.maximum(np.abs(x), 1e-12)) < 1e-5
    bn.params["scale"][...] = 0.0
    bn.params["offset"][...] = [0.5, -1.0, 2.0]
    np.testing.assert_array_equal(bn(x, train=False), np.broadcast_to([0.5, -1.0, 2.0], x.shape))
    bn = FrozenBatchNorm(3)
    bn.params["scale"][...] = rng.uniform(0.5, 2, 3)
    bn.params["offset"][...] = rng.standard_normal(3)
    bn.buffers["mean"][...] = rng.standard_normal(3)
    bn.buffers["var"][...] = rng.uniform(0.1, 3, 3)
    out = bn(x, train=False)
    idx = (1, 2, 3, 0)
    for c in range(3):
        ref = (bn.params["scale"][c] * (x[idx + (c,)] - bn.buffers["mean"][c])
               / np.sqrt(bn.buffers["var"][c] + 1e-5) + bn.params["offset"][c])
        assert out[idx + (c,)] == pytest.approx(ref, abs=1e-12)


def test_batchnorm_rejects_nonpositive_variance():
    bn = FrozenBatchNorm(1)
    bn.buffers["var"][...] = -1.0
    with pytest.raises(ValueError):
        bn(np.zeros((1, 1, 1, 1, 1)))


def test_elementwise_definitions():
    assert F.sigmoid(np.array([0.0]))[0] == 0.5
    x = np.array([-2.0, -0.5, 0.0, 0.5, 3.0])
    np.testing.assert_array_equal(ReLU()(x, train=False), [0, 0, 0, 0.5, 3.0])
    lin = Linear(3, 3)
    lin.params["weight"][...] = np.eye(3)
    v = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(lin(v, train=False), v)
    assert np.all(np.isfinite(F.sigmoid(np.array([-1e4, 1e4]))))


def test_linear_shape_mismatch():
    with pytest.raises(ValueError, match="inner extent"):
        Linear(3, 2)(np.zeros((1, 4)))


def test_sigmoid_backward_at_zero():
    s = Sigmoid()
    s(np.zeros(1))
    assert s.backward(np.ones(1))[0] == 0.25


def test_backward_without_forward_raises():
    with pytest.raises(ForwardRecordError):
        ReLU().backward(np.ones(3))
    conv = Conv3d(1, 1, 1)
    conv(np.ones((1, 1, 1, 1, 1)), train=False)
    with pytest.raises(ForwardRecordError):
        conv.backward(np.ones((1, 1, 1, 1, 1)))


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(6)
    conv = Conv3d(2, 3, 3, rng=rng)
    x = rng.standard_normal((1, 3, 4, 4, 2))
    conv.zero_grad()
    out = conv(x)
    dx = conv.backward(np.zeros_like(out))
    assert not dx.any() and not conv.grads["weight"].any() and not conv.grads["bias"].any()


@pytest.mark.parametrize(
    "make, shape",
    [
        (lambda r: Conv3d(2, 3, 3, stride=1, rng=r), (1, 3, 4, 4, 2)),
        (lambda r: Conv3d(2, 2, (3, 2, 3), stride=(2, 2, 1), rng=r), (2, 4, 5, 2, 2)),
        (lambda r: Conv3d(3, 2, (1, 3, 3), stride=(1, 2, 2), padding="valid", rng=r),
         (1, 2, 5, 5, 3)),
        (lambda r: MaxPool3d(2, 2), (1, 4, 4, 4, 2)),
        (lambda r: MaxPool3d((1, 2, 2), (1, 1, 1)), (2, 2, 3, 3, 2)),
        (lambda r: FrozenBatchNorm(3), (2, 2, 3, 3, 3)),
        (lambda r: ReLU(), (2, 3, 4, 4, 2)),
        (lambda r: Sigmoid(), (2, 3, 4, 4, 2)),
        (lambda r: Linear(6, 4, rng=r), (5, 6)),
        (lambda r: GlobalAvgPool(), (2, 3, 2, 4, 3)),
    ],
    ids=["conv", "conv-strided", "conv-valid", "maxpool", "maxpool-overlap", "batchnorm",
         "relu", "sigmoid", "linear", "gap"],
)
def test_layer_gradients_match_finite_differences(make, shape):
    rng = np.random.default_rng(11)
    layer = make(rng)
    if isinstance(layer, FrozenBatchNorm):
        layer.params["scale"][...] = rng.uniform(0.5, 2.0, 3)
        layer.params["offset"][...] = rng.standard_normal(3)
        layer.buffers["mean"][...] = rng.standard_normal(3)
        layer.buffers["var"][...] = rng.uniform(0.2, 2.0, 3)
    x = rng.standard_normal(shape)
    assert x.size <= 200
    errors = check_layer(layer, x, rng)
    assert max(errors.values()) <= GRAD_TOL, errors


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "trunk.stage0.conv.weight": rng.standard_normal((3, 3, 3, 3, 8)),
        "scalar": np.array(np.pi),
        "ünïcode": np.array([np.inf, -0.0, 1e-300]),
        "empty": np.zeros((0, 4)),
    }
    path = tmp_path / "params.stlc"
    checkpoint.save(path, arrays)
    blob = path.read_bytes()
    assert blob[:4] == b"STLC"
    assert int.from_bytes(blob[4:8], "little") == checkpoint.VERSION
    back = checkpoint.load(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()
    assert checkpoint.dumps(back) == blob


def test_checkpoint_rejects_bad_input():
    with pytest.raises(checkpoint.CheckpointFormatError):
        checkpoint.loads(b"NOPE\x01\x00\x00\x00")
    blob = checkpoint.dumps({"a": np.ones(4)})
    with pytest.raises(checkpoint.CheckpointFormatError):
        checkpoint.loads(blob[:-3])
