import numpy as np
import pytest

from src.lipschitz.bounds import (
    DataSampler,
    GaussianSampler,
    PairSampler,
    UnsupportedActivationError,
    clean_bound,
    empirical_lipschitz,
    jacobian_variation,
    lipschitz_report,
    margin_consistency,
    noisy_bound_check,
    required_lipschitz,
)
from src.lipschitz.spectral import layer_norm, spectral_norm
from src.nn import layers as L
from src.nn.network import init_network, materialize_matrix


def _mlp(act="softplus", seed=0):
    layers = [L.dense(5, 8), L.activation(8, act), L.dense(8, 8), L.activation(8, act), L.dense(8, 3)]
    return init_network(layers, "xavier", seed=seed, name=f"mlp-{act}")


def test_spectral_norm_matches_svd(rng):
    for shape in [(6, 4), (3, 9), (12, 12)]:
        W = rng.standard_normal(shape)
        assert spectral_norm(W) == pytest.approx(np.linalg.svd(W, compute_uv=False)[0], rel=1e-6)
    assert spectral_norm(np.zeros((3, 3))) == 0.0


def test_spectral_norm_small_matrices():
    assert spectral_norm(np.diag([2.0, 1.0])) == pytest.approx(2.0, rel=1e-6)
    assert spectral_norm(np.array([[0.0, 1.0], [0.0, 0.0]])) == pytest.approx(1.0, rel=1e-6)


def test_scalar_softplus_variation_below_curvature_peak():
    net = init_network([L.dense(1, 1), L.activation(1, "softplus")], "xavier", seed=0)
    net.params[0]["W"][:] = 1.0
    # sup |softplus''| = 1/4, reached at 0
    estimate = jacobian_variation(net, np.zeros(1), radius=1.0)
    assert 0.2 < estimate <= 0.25 * 1.02


def test_conv_operator_norm_matches_materialized_matrix(rng):
    spec = L.conv2d((2, 6, 6), 3, 3, stride=2, padding="same", bias=False)
    p = {"W": rng.standard_normal(spec.param_shapes()["W"])}
    expected = np.linalg.svd(materialize_matrix(spec, p), compute_uv=False)[0]
    assert layer_norm(spec, p) == pytest.approx(expected, rel=1e-6)


def test_clean_bound_on_identity_stack_is_one():
    net = init_network([L.dense(4, 4), L.activation(4, "relu"), L.dense(4, 4)], "identity")
    assert clean_bound(net) == pytest.approx(1.0, rel=1e-9)


@pytest.mark.parametrize("act", ["relu", "tanh", "softplus"])
def test_empirical_estimate_never_exceeds_clean_bound(act):
    for seed in range(3):
        net = _mlp(act, seed)
        emp = empirical_lipschitz(net, GaussianSampler((5,)), pairs=500, seed=seed)
        assert 0.0 < emp <= clean_bound(net) * (1.0 + 1e-9)


def test_empirical_estimate_is_deterministic():
    net = _mlp("tanh", 4)
    a = empirical_lipschitz(net, GaussianSampler((5,)), pairs=300, seed=9)
    b = empirical_lipschitz(net, GaussianSampler((5,)), pairs=300, seed=9)
    assert a == b


def test_sampler_guards():
    net = _mlp()
    with pytest.raises(ValueError):
        empirical_lipschitz(net, GaussianSampler((5,)), pairs=50)
    with pytest.raises(ValueError, match="degenerate"):
        empirical_lipschitz(net, DataSampler(np.ones((10, 5))), pairs=200, tight_fraction=0.0)
    pts = np.zeros((4, 5))
    with pytest.raises(ValueError, match="degenerate"):
        empirical_lipschitz(net, PairSampler(pts, pts), pairs=200, tight_fraction=0.0)


def test_pair_sampler_on_linear_map_recovers_gain():
    net = init_network([L.dense(2, 2, bias=False)], "xavier")
    net.params[0]["W"][:] = np.diag([3.0, 1.0])
    xs = np.zeros((5, 2))
    ys = np.column_stack([np.arange(1.0, 6.0), np.zeros(5)])
    assert empirical_lipschitz(net, PairSampler(xs, ys), pairs=100, tight_fraction=0.0) == pytest.approx(3.0)


def test_noisy_bound_holds_on_smooth_nets(rng):
    for seed in range(3):
        net = _mlp("softplus", seed)
        x = rng.standard_normal(5)
        for scale in (1e-3, 0.1, 1.0):
            delta = scale * rng.standard_normal(5)
            lhs, rhs, holds = noisy_bound_check(net, x, delta, seed=seed)
            assert holds and lhs <= rhs * (1.0 + 1e-6)


def test_noisy_bound_zero_delta():
    assert noisy_bound_check(_mlp(), np.zeros(5), np.zeros(5)) == (0.0, 0.0, True)


def test_jacobian_variation_rejects_relu():
    with pytest.raises(UnsupportedActivationError):
        jacobian_variation(_mlp("relu"), np.zeros(5), 0.1)
    with pytest.raises(ValueError):
        jacobian_variation(_mlp(), np.zeros(5), 0.0)


def test_jacobian_variation_is_zero_for_linear_nets(rng):
    net = init_network([L.dense(5, 4), L.dense(4, 2)], "xavier", seed=1)
    assert jacobian_variation(net, rng.standard_normal(5), 0.5) == 0.0


def test_jacobian_variation_monotone_in_radius(rng):
    net = _mlp("tanh", 2)
    x = rng.standard_normal(5)
    small = jacobian_variation(net, x, 0.01, samples=8, seed=3)
    large = jacobian_variation(net, x, 1.0, samples=8, seed=3)
    assert 0.0 < small <= large


def test_required_lipschitz_and_margin_consistency():
    assert required_lipschitz(0.5, 0.25) == 2.0
    with pytest.raises(ValueError):
        required_lipschitz(0.0, 1.0)
    z_clean = np.zeros((4, 2))
    z_fault = np.array([[1.0, 0.0], [0.1, 0.0], [0.0, 2.0], [0.0, 0.0]])
    out = margin_consistency(z_clean, z_fault, np.array([0.5, 0.5, 1.0, 0.5]), m=1.0)
    assert out["pairs"] == 4
    assert out["above_margin"] == 2
    assert out["above_margin_fraction"] == 0.5
    assert out["violations"] == 0
    assert out["min_slack"] == pytest.approx(0.0)


def test_lipschitz_report_fields():
    rep = lipschitz_report(_mlp("softplus", 1), noise_norm=0.1, pairs=200, samples=4, seed=0)
    d = rep.to_dict()
    assert d["noise_norm"] == pytest.approx(0.1)
    assert d["smooth"] is True
    assert d["empirical_clean"] <= d["clean_bound"] * (1.0 + 1e-9)
    assert d["noisy_effective"] <= d["clean_bound"] * (1.0 + 1e-9)
    assert d["L_J_estimate"] is not None and d["L_J_frobenius"] >= d["L_J_estimate"] * (1 - 1e-9)

    relu = lipschitz_report(_mlp("relu", 1), pairs=200, seed=0)
    assert relu.smooth is False and relu.L_J_estimate is None
