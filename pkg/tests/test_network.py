import math

import numpy as np
import pytest

from certlip.network import (
    ConventionalResidualBlock,
    DenseHead,
    LinearResidualBlock,
    MinMax,
    Neck,
    NetworkSpec,
    SpecError,
    Stem,
    build_network,
    delta_kernel,
    equivalent_kernel,
    forward,
    liresnet_spec,
)
from certlip.tensor_core import ShapeError, conv2d


def block_net(channels=4, size=6, kernel=3, depth_scale=1.0):
    spec = NetworkSpec("liresnet", (channels, size, size), (
        LinearResidualBlock(channels, kernel, depth_scale), Neck(2, 1, 1, 3), DenseHead(2),
    ))
    return build_network(spec, 0)


def test_depth_scale_two_blocks():
    spec = liresnet_spec((1, 1, 8), 3, width=4, depth=2)
    blocks = [l for l in spec.layers if isinstance(l, LinearResidualBlock)]
    assert len(blocks) == 2 and spec.num_blocks == 2
    assert all(b.depth_scale == 1 / math.sqrt(2) for b in blocks)


def test_beta_init():
    net = build_network(liresnet_spec((1, 1, 8), 3, width=4, depth=2, family="resnet"), 0)
    betas = [v for k, v in net.params.items() if k.endswith(".beta")]
    assert betas and all(not b.any() for b in betas)
    net = build_network(liresnet_spec((1, 1, 8), 3, width=4, depth=2), 0)
    assert all((v == 1.0).all() for k, v in net.params.items() if k.endswith(".beta"))


def test_kaiming_std():
    net = build_network(liresnet_spec((3, 16, 16), 10, width=64, depth=1), 0)
    W = net.params["2.W"]
    assert abs(W.std() / math.sqrt(2 / (64 * 9)) - 1) < 0.05


def test_build_is_deterministic():
    spec = liresnet_spec((1, 1, 8), 4)
    a, b = build_network(spec, 7), build_network(spec, 7)
    assert a.param_hash() == b.param_hash()
    assert build_network(spec, 8).param_hash() != a.param_hash()


def test_zero_residual_is_identity(rng):
    net = block_net()
    net.params["0.W"][:] = 0.0
    x = rng.standard_normal((3, 4, 6, 6))
    np.testing.assert_array_equal(forward(net, x, stop=1), x)


def test_conventional_block_identity_at_init(rng):
    spec = NetworkSpec("resnet", (4, 5, 5), (ConventionalResidualBlock(4, 3), Neck(2, 1, 1, 3), DenseHead(2)))
    net = build_network(spec, 0)
    x = rng.standard_normal((2, 4, 5, 5))
    np.testing.assert_array_equal(forward(net, x, stop=1), x)


def test_delta_entries():
    d = delta_kernel(2, 3)
    assert d[0, 0, 1, 1] == 1.0 and d[1, 1, 1, 1] == 1.0
    assert d.sum() == 2.0


def test_equivalent_kernel_pure_delta():
    blk = LinearResidualBlock(3, 3, 1.0)
    np.testing.assert_array_equal(equivalent_kernel(blk, np.zeros((3, 3, 3, 3)), np.ones(3)), delta_kernel(3, 3))


@pytest.mark.parametrize("kernel,scale", [(3, 1.0), (3, 0.5), (5, 1 / math.sqrt(3))])
def test_equivalent_kernel_forward(rng, kernel, scale):
    net = block_net(kernel=kernel, depth_scale=scale)
    net.params["0.beta"] = rng.standard_normal(4)
    blk = net.spec.layers[0]
    x = rng.standard_normal((4, 4, 6, 6))
    keq = equivalent_kernel(blk, net.params["0.W"], net.params["0.beta"])
    np.testing.assert_allclose(forward(net, x, stop=1), conv2d(x, keq, 1, kernel // 2), rtol=0, atol=1e-12)


def test_equivalent_kernel_rejects_channel_mismatch():
    with pytest.raises(SpecError):
        equivalent_kernel(LinearResidualBlock(2, 3, 1.0), np.zeros((2, 3, 3, 3)), np.ones(2))


def test_whole_network_equivalent_kernel_swap(rng):
    # a LiResNet with each block replaced by its equivalent conv computes the same logits
    spec = liresnet_spec((2, 6, 6), 3, width=4, depth=3)
    net = build_network(spec, 1)
    x = rng.standard_normal((5, 2, 6, 6))
    ref = forward(net, x)
    h = x
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, LinearResidualBlock):
            keq = equivalent_kernel(layer, net.params[f"{i}.W"], net.params[f"{i}.beta"])
            h = conv2d(h, keq, 1, 1)
        else:
            h = forward(net, x, stop=i + 1) if i == 0 else _one(net, i, h)
    np.testing.assert_allclose(h, ref, atol=1e-10)


def _one(net, i, h):
    from certlip.network import _apply_layer

    return _apply_layer(i, net.spec.layers[i], net.params, h, None)


@pytest.mark.parametrize("family", ["liresnet", "resnet", "convnet"])
@pytest.mark.parametrize("shape,kw", [
    ((1, 1, 8), {}),
    ((3, 32, 32), dict(stem_kernel=5, stem_stride=2, stem_padding=2, neck_kernel=4, neck_stride=4)),
    ((1, 28, 28), dict(stem_kernel=5, stem_stride=2, stem_padding=2, neck_kernel=2, neck_stride=2)),
])
def test_declared_shapes_match_runtime(family, shape, kw):
    spec = liresnet_spec(shape, 5, width=8, depth=2, family=family, **kw)
    net = build_network(spec, 0)
    x = np.random.default_rng(0).standard_normal((2, *shape))
    for i in range(len(spec.layers) + 1):
        assert forward(net, x, stop=i).shape[1:] == net.shapes[i]


def test_inconsistent_specs_rejected():
    with pytest.raises(SpecError):
        build_network(NetworkSpec("x", (3, 8, 8), (Stem(3, 3, 1, 1), MinMax(), Neck(2, 1, 1, 2), DenseHead(2))), 0)
    with pytest.raises(SpecError):
        build_network(NetworkSpec("x", (1, 8, 8), (Stem(3, 3, 1, 1), MinMax(), DenseHead(2))), 0)
    with pytest.raises(SpecError):
        build_network(NetworkSpec("x", (1, 8, 8), (Stem(4, 3, 1, 1), LinearResidualBlock(6, 3, 1.0), DenseHead(2))), 0)
    with pytest.raises(SpecError):
        build_network(NetworkSpec("x", (1, 8, 8), (Stem(4, 3, 1, 1),)), 0)


def test_forward_shape_mismatch():
    net = build_network(liresnet_spec((1, 1, 8), 3, width=4, depth=1), 0)
    with pytest.raises(ShapeError):
        forward(net, np.zeros((2, 1, 1, 7)))


def test_spec_text_round_trip():
    spec = liresnet_spec((3, 32, 32), 10, width=16, depth=3, stem_kernel=5, stem_stride=2, stem_padding=2)
    assert NetworkSpec.from_text(spec.to_text()) == spec
    with pytest.raises(SpecError):
        NetworkSpec.from_text("[network]\nfamily = x\n")


def test_head_rows_are_class_vectors(rng):
    net = build_network(liresnet_spec((1, 1, 8), 3, width=4, depth=1), 0)
    x = rng.standard_normal((4, 1, 1, 8))
    feats = forward(net, x, stop=net.head_index)
    np.testing.assert_allclose(forward(net, x), feats @ net.head_weight.T + net.params[f"{net.head_index}.b"])


def test_forward_bit_reproducible(rng):
    net = build_network(liresnet_spec((1, 1, 8), 4), 3)
    x = rng.standard_normal((16, 1, 1, 8))
    assert forward(net, x).tobytes() == forward(net, x.copy()).tobytes()
