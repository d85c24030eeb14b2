import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from certlip.lipschitz import (
    NonConvergenceError,
    PowerState,
    block_power_iteration,
    compose_sublipschitz,
    layer_lipschitz,
    lipschitz_report,
    margin_lipschitz,
    power_iteration,
    spectral_norm_conv,
    spectral_norm_dense,
)
from certlip.network import (
    ConventionalResidualBlock,
    DenseHead,
    LinearResidualBlock,
    MinMax,
    Neck,
    NetworkSpec,
    build_network,
    delta_kernel,
    equivalent_kernel,
    liresnet_spec,
    scaled_residual_kernel,
)
from certlip.oracle import empirical_lipschitz_lower_bound
from oracles import conv_matrix, pairwise_distances, spectral_norm_svd


def test_dense_examples():
    assert spectral_norm_dense(np.diag([3.0, 2.0]), safety=0) == pytest.approx(3.0, rel=1e-12)
    assert spectral_norm_dense(np.array([[1.0, 1.0]]), safety=0) == pytest.approx(math.sqrt(2), rel=1e-12)
    assert spectral_norm_dense(np.zeros((3, 4))) == 0.0


def test_dense_matches_svd(rng):
    for _ in range(5):
        W = rng.standard_normal((32, 16))
        assert spectral_norm_dense(W, safety=0) == pytest.approx(spectral_norm_svd(W), rel=1e-6)


def test_safety_factor_applied(rng):
    W = rng.standard_normal((6, 5))
    base = spectral_norm_dense(W, safety=0)
    assert spectral_norm_dense(W) == base * (1 + 1e-6)
    assert spectral_norm_dense(W, safety=1e-3) == base * (1 + 1e-3)


def test_conv_examples():
    assert spectral_norm_conv(np.full((1, 1, 1, 1), -2.5), (1, 5, 5), safety=0) == pytest.approx(2.5, rel=1e-12)
    assert spectral_norm_conv(delta_kernel(4, 3), (4, 6, 6), 1, 1, safety=0) == pytest.approx(1.0, rel=1e-12)
    assert spectral_norm_conv(np.zeros((2, 2, 3, 3)), (2, 4, 4), 1, 1) == 0.0


def test_conv_matches_materialized_operator(rng):
    k = rng.standard_normal((4, 4, 3, 3))
    exact = spectral_norm_svd(conv_matrix(k, (4, 8, 8), 1, 1))
    assert spectral_norm_conv(k, (4, 8, 8), 1, 1, safety=0) == pytest.approx(exact, rel=1e-6)


def test_conv_bound_depends_on_spatial_size(rng):
    k = rng.standard_normal((2, 2, 3, 3))
    assert spectral_norm_conv(k, (2, 3, 3), 1, 1) != spectral_norm_conv(k, (2, 9, 9), 1, 1)


def test_certify_bound_dominates_truth_after_safety(rng):
    for _ in range(10):
        k = rng.standard_normal((3, 2, 3, 3))
        exact = spectral_norm_svd(conv_matrix(k, (2, 6, 6), 2, 1))
        assert spectral_norm_conv(k, (2, 6, 6), 2, 1) >= exact


def test_train_mode_warm_start_updates_state(rng):
    W = rng.standard_normal((8, 6))
    state = PowerState(np.zeros(0))
    first = spectral_norm_dense(W, "train", state)
    assert state.v.shape == (6,) and abs(np.linalg.norm(state.v) - 1) < 1e-12
    assert state.residual >= 0 and state.iterations == 5
    vals = [first] + [spectral_norm_dense(W, "train", state) for _ in range(20)]
    assert vals[-1] == pytest.approx(spectral_norm_svd(W), rel=1e-6)


def test_monotone_convergence(rng):
    W = rng.standard_normal((10, 7))
    apply_, adj = (lambda V: V @ W.T), (lambda U: U @ W)
    v0 = rng.standard_normal(7)
    sig = [power_iteration(apply_, adj, v0, "train", it, 0, 0).sigma for it in range(1, 30)]
    assert all(b >= a - 1e-12 for a, b in zip(sig, sig[1:]))


def test_non_convergence_error():
    # nearly tied top singular values need many iterations; a cap of 3 cannot reach 1e-15
    W = np.diag([1.0, 0.999999, 0.5])
    apply_, adj = (lambda V: V @ W.T), (lambda U: U @ W)
    with pytest.raises(NonConvergenceError):
        block_power_iteration(apply_, adj, np.random.default_rng(0).standard_normal((1, 3)), 1e-15, 3)


def test_minmax_and_zero_block_factors():
    spec = NetworkSpec("liresnet", (4, 5, 5), (
        LinearResidualBlock(4, 3, 1.0), MinMax(), Neck(2, 1, 1, 3), DenseHead(2),
    ))
    net = build_network(spec, 0)
    assert layer_lipschitz(net, 1) == (1.0, "activation-1")
    net.params["0.W"][:] = 0.0
    val, method = layer_lipschitz(net, 0, safety=0)
    assert val == pytest.approx(1.0, rel=1e-12) and method == "power-iteration"


def test_conventional_residual_loose_bound():
    spec = NetworkSpec("resnet", (1, 4, 4), (ConventionalResidualBlock(1, 1), Neck(2, 1, 1, 2), DenseHead(2)))
    net = build_network(spec, 0)
    net.params["0.W1"] = np.full((1, 1, 1, 1), 0.5)
    net.params["0.W2"] = np.full((1, 1, 1, 1), 0.5)
    net.params["0.beta"] = np.ones(1)
    val, method = layer_lipschitz(net, 0, safety=0)
    assert val == pytest.approx(1.25, rel=1e-12) and method == "loose-residual-sum"


def test_composition_is_product(rng):
    net = build_network(liresnet_spec((1, 1, 8), 4, width=8, depth=4), 0)
    k, factors = compose_sublipschitz(net, "certify")
    prod = 1.0
    for f in factors:
        prod *= f.bound.value
    assert abs(k - prod) <= 1e-15 * prod
    rep = lipschitz_report(net, "certify")
    assert rep.k_sub == k


def test_composition_two_factor_product():
    spec = NetworkSpec("x", (1, 1, 1), (
        LinearResidualBlock(1, 1, 1.0), Neck(2, 1, 1, 1), DenseHead(2),
    ))
    net = build_network(spec, 0)
    net.params["0.W"] = np.full((1, 1, 1, 1), 1.0)  # 1 + 1 = 2
    net.params["1.conv"] = np.array([[[[3.0]]], [[[0.0]]]])  # sigma 3
    net.params["1.dense"] = np.array([[1.0, 0.0]])  # sigma 1
    k, _ = compose_sublipschitz(net, "certify", safety=0)
    assert k == pytest.approx(6.0, rel=1e-12)


def test_margin_lipschitz_examples(rng):
    K = margin_lipschitz(np.array([[1.0, 0.0], [0.0, 1.0]]), 2.0)
    assert K[0, 1] == pytest.approx(2 * math.sqrt(2), rel=1e-15)
    assert margin_lipschitz(np.ones((2, 3)), 5.0)[0, 1] == 0.0
    W = rng.standard_normal((5, 8))
    K = margin_lipschitz(W, 1.0)
    np.testing.assert_allclose(K, pairwise_distances(W.tolist()), atol=1e-12)
    assert np.array_equal(K, K.T) and not np.diag(K).any() and (K >= 0).all()


def test_report_csv_columns():
    net = build_network(liresnet_spec((1, 1, 8), 3, width=4, depth=1), 0)
    lines = lipschitz_report(net).to_csv().splitlines()
    assert lines[0] == "layer,name,method,K,residual,iterations"
    assert len(lines) == 1 + len(lipschitz_report(net).layers)


def test_tightness_gap(rng):
    strict = 0
    for _ in range(30):
        blk = LinearResidualBlock(4, 3, 0.5)
        W = rng.standard_normal((4, 4, 3, 3)) * 0.3
        beta = rng.standard_normal(4)
        a = spectral_norm_conv(equivalent_kernel(blk, W, beta), (4, 6, 6), 1, 1, safety=0)
        b = 1 + spectral_norm_conv(scaled_residual_kernel(blk, W, beta), (4, 6, 6), 1, 1, safety=0)
        assert a <= b * (1 + 1e-9)
        strict += a < b * (1 - 1e-9)
    assert strict >= 27


@settings(max_examples=15, deadline=None)
@given(st.floats(0.1, 10.0), st.integers(0, 2**31 - 1))
def test_scale_equivariance(c, seed):
    net = build_network(liresnet_spec((1, 1, 6), 3, width=4, depth=2), seed)
    base = lipschitz_report(net, "certify", safety=0)
    scaled = net.copy()
    scaled.params["0.W"] = scaled.params["0.W"] * c
    rep = lipschitz_report(scaled, "certify", safety=0)
    assert rep.layers[0].value == pytest.approx(c * base.layers[0].value, rel=1e-8)
    assert rep.k_sub == pytest.approx(c * base.k_sub, rel=1e-8)


def test_empirical_lower_bound_below_certified_bound():
    for seed in range(3):
        net = build_network(liresnet_spec((1, 1, 8), 4, width=8, depth=3), seed)
        lb = empirical_lipschitz_lower_bound(net, num_pairs=100, seed=seed, refine=3, refine_steps=40)
        assert 0 < lb <= lipschitz_report(net).k_sub


def test_certify_mode_is_pure():
    net = build_network(liresnet_spec((1, 1, 8), 4, width=8, depth=2), 0)
    a, b = lipschitz_report(net), lipschitz_report(net)
    assert a.k_sub == b.k_sub and a.param_hash == net.param_hash()
