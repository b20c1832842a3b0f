import numpy as np
import pytest

from src.nn import layers as L
from src.nn.network import init_network
from src.nn.rng import make_rng
from src.pipeline.losses import (
    LossWeights,
    contrastive_loss,
    cross_entropy,
    jacobian_frobenius,
    jacobian_variation_frobenius,
    mse,
    reg_loss,
    similarity_loss,
)


def test_contrastive_examples():
    zc = np.array([[0.0, 0.0]])
    v, _, _ = contrastive_loss(zc, np.array([[0.3, 0.0]]), m=0.5)
    assert v == pytest.approx(0.2)
    v, gc, gf = contrastive_loss(zc, np.array([[0.0, 0.7]]), m=0.5)
    assert v == 0.0 and not np.any(gc) and not np.any(gf)
    v, gc, _ = contrastive_loss(zc, zc.copy(), m=0.5)
    assert v == pytest.approx(0.5)
    assert not np.any(gc)


def test_contrastive_rejects_bad_margin():
    with pytest.raises(ValueError):
        contrastive_loss(np.zeros((1, 2)), np.ones((1, 2)), m=0.0)


def test_contrastive_gradient(fd, err, rng):
    zc = rng.standard_normal((5, 3)) * 0.3
    zf = rng.standard_normal((5, 3)) * 0.3
    _, gc, gf = contrastive_loss(zc, zf, m=1.5)
    assert err(gc, fd(lambda: contrastive_loss(zc, zf, 1.5)[0], zc)) < 1e-6
    assert err(gf, fd(lambda: contrastive_loss(zc, zf, 1.5)[0], zf)) < 1e-6


def test_similarity_example_and_scaling():
    a = np.array([[0.1, -0.2]])
    v, ga, gb = similarity_loss(a, np.zeros((1, 2)))
    assert v == pytest.approx(0.05)
    np.testing.assert_allclose(ga, [[0.2, -0.4]])
    np.testing.assert_array_equal(gb, -ga)
    v2, _, _ = similarity_loss(2 * a, np.zeros((1, 2)))
    assert v2 == pytest.approx(4 * v)
    with pytest.raises(ValueError):
        similarity_loss(np.zeros((2, 3)), np.zeros((2, 2)))


def test_mse_and_cross_entropy_gradients(fd, err, rng):
    pred, target = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    v, g = mse(pred, target)
    assert v == pytest.approx(np.mean((pred - target) ** 2))
    assert err(g, fd(lambda: mse(pred, target)[0], pred)) < 1e-7

    logits = rng.standard_normal((6, 3))
    labels = np.array([0, 1, 2, 2, 1, 0])
    _, g = cross_entropy(logits, labels)
    assert err(g, fd(lambda: cross_entropy(logits, labels)[0], logits)) < 1e-7


def test_cross_entropy_uniform_logits():
    v, _ = cross_entropy(np.zeros((4, 3)), np.array([0, 1, 2, 0]))
    assert v == pytest.approx(np.log(3.0))


def test_identity_compute_has_unit_jacobian(rng):
    net = init_network([L.dense(2, 2)], "identity")
    v, _ = jacobian_frobenius(net, rng.standard_normal((7, 2)))
    assert v == pytest.approx(2.0)


def test_doubling_linear_weights_quadruples_the_penalty(rng):
    net = init_network([L.dense(4, 3)], "xavier", seed=2)
    z = rng.standard_normal((5, 4))
    v1, _ = jacobian_frobenius(net, z)
    net.params[0]["W"] *= 2.0
    v2, _ = jacobian_frobenius(net, z)
    assert v2 == pytest.approx(4.0 * v1, rel=1e-12)
    assert v1 == pytest.approx(np.sum(net.params[0]["W"] ** 2) / 4.0, rel=1e-12)


def test_random_probes_are_unbiased_for_wide_inputs():
    net = init_network([L.dense(20, 5)], "xavier", seed=3)
    z = np.zeros((1, 20))
    v, _ = jacobian_frobenius(net, z, probes=4000, rng=make_rng(1))
    assert v == pytest.approx(np.sum(net.params[0]["W"] ** 2), rel=0.1)


def test_jacobian_penalty_gradient(fd, err, rng):
    net = init_network([L.dense(3, 5), L.activation(5, "tanh"), L.dense(5, 2)], "xavier", seed=5)
    z = rng.standard_normal((4, 3))
    _, grads = jacobian_frobenius(net, z, grad=True)
    for i, p in enumerate(net.params):
        for k, a in p.items():
            assert err(grads[i][k], fd(lambda: jacobian_frobenius(net, z)[0], a)) < 1e-5


def test_linear_encoder_has_no_jacobian_variation(rng):
    enc = init_network([L.dense(6, 3)], "xavier", seed=1)
    x = rng.standard_normal((4, 6))
    v, _ = jacobian_variation_frobenius(enc, x, rng.standard_normal((4, 6)))
    assert v == 0.0


def test_reg_loss_combines_weighted_terms(rng):
    enc_lin = init_network([L.dense(6, 3)], "xavier", seed=1)
    enc_smooth = init_network([L.dense(4, 3), L.activation(3, "softplus")], "xavier", seed=2)
    compute = init_network([L.dense(2, 2)], "identity")
    inputs = {"a": rng.standard_normal((3, 6)), "b": rng.standard_normal((3, 4))}
    deltas = {"a": rng.standard_normal((3, 6)), "b": np.zeros((3, 4))}
    w = LossWeights(lambda_reg_encoder=0.5, lambda_reg_compute=0.25)
    terms = reg_loss({"a": enc_lin, "b": enc_smooth}, compute, inputs, deltas,
                     rng.standard_normal((3, 2)), w)
    assert terms.encoder == 0.0
    assert terms.compute == pytest.approx(2.0)
    assert terms.total == pytest.approx(0.25 * 2.0)
    np.testing.assert_allclose(terms.compute_grads[0]["W"], 0.25 * 2.0 * np.eye(2), rtol=1e-12, atol=1e-15)


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(m=0.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_sim=-1.0)
    assert LossWeights(lambda_con=0.3).lambda1 == 0.3
