"""Stage-2 objective terms. Each returns (value, gradients) so the training
loop can chain them through the networks by hand."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import log_softmax, softmax

from ..nn.network import Network, forward, jvp, jvp_backward
from ..nn.rng import make_rng

# at or below this input dimension Jacobian probes are the exact unit basis
EXACT_PROBE_DIM = 8


@dataclass
class LossWeights:
    m: float = 0.5
    lambda_con: float = 0.1
    lambda_sim: float = 1.0
    lambda_rec: float = 1.0
    lambda_reg_encoder: float = 1e-3
    lambda_reg_compute: float = 1e-3

    def __post_init__(self):
        if self.m <= 0:
            raise ValueError("margin m must be > 0")
        for k in ("lambda_con", "lambda_sim", "lambda_rec", "lambda_reg_encoder", "lambda_reg_compute"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")

    # objective-level aliases
    @property
    def lambda1(self) -> float:
        return self.lambda_con

    @property
    def lambda2(self) -> float:
        return self.lambda_sim


@dataclass
class RegTerms:
    encoder: float
    compute: float
    total: float
    compute_grads: Optional[list] = None
    encoder_grads: Optional[dict] = None


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over every element, with its gradient wrt pred."""
    _check_pair(pred, target)
    r = pred - target
    return float(np.mean(r * r)), 2.0 * r / r.size


def contrastive_loss(z_c: np.ndarray, z_f: np.ndarray, m: float):
    """mean max(0, m - ||z_c - z_f||); returns (value, grad_c, grad_f).

    Pairs at distance exactly 0 take the zero subgradient.
    """
    if m <= 0:
        raise ValueError("margin m must be > 0")
    z_c, z_f = np.atleast_2d(z_c), np.atleast_2d(z_f)
    _check_pair(z_c, z_f)
    diff = z_c - z_f
    dist = np.linalg.norm(diff, axis=1)
    active = dist < m
    value = float(np.mean(np.where(active, m - dist, 0.0)))
    safe = np.where(dist > 0, dist, 1.0)
    coef = np.where(active & (dist > 0), -1.0 / (safe * len(dist)), 0.0)
    grad_c = coef[:, None] * diff
    return value, grad_c, -grad_c


def similarity_loss(a: np.ndarray, b: np.ndarray):
    """mean ||a - b||^2 over the batch; returns (value, grad_a, grad_b)."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    _check_pair(a, b)
    d = a - b
    value = float(np.mean(np.sum(d * d, axis=1)))
    grad = 2.0 * d / len(d)
    return value, grad, -grad


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy; returns (value, grad wrt logits)."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=1)
    value = float(-np.mean(logp[np.arange(len(labels)), labels]))
    grad = softmax(logits, axis=1)
    grad[np.arange(len(labels)), labels] -= 1.0
    return value, grad / len(labels)


def _probes(dims: tuple, batch: int, probes: int, rng: np.random.Generator):
    """(list of probe batches, weight per probe)."""
    n = int(np.prod(dims))
    if n <= EXACT_PROBE_DIM:
        basis = np.eye(n).reshape((n,) + tuple(dims))
        return [np.broadcast_to(e, (batch,) + tuple(dims)).copy() for e in basis], 1.0
    return [rng.standard_normal((batch,) + tuple(dims)) for _ in range(probes)], 1.0 / probes


def jacobian_frobenius(net: Network, x: np.ndarray, probes: int = 4,
                       rng: Optional[np.random.Generator] = None, grad: bool = False):
    """Batch mean of ||J(x)||_F^2 by probe products; returns (value, grads or None)."""
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = rng or make_rng(0)
    _, tape = forward(net, x)
    batch = x.shape[0]
    vs, w = _probes(net.in_dims, batch, probes, rng)
    value, grads = 0.0, None
    for v in vs:
        jv, tc = jvp(net, tape, v)
        value += w * float(np.sum(jv * jv)) / batch
        if grad:
            g = jvp_backward(net, tape, tc, 2.0 * w * jv / batch).grads
            grads = g if grads is None else [{k: a[k] + g[i][k] for k in a} for i, a in enumerate(grads)]
    return value, grads


def jacobian_variation_frobenius(net: Network, x: np.ndarray, delta: np.ndarray, probes: int = 4,
                                 rng: Optional[np.random.Generator] = None, grad: bool = False):
    """Batch mean of ||J(x+delta) - J(x)||_F^2 by shared probes; returns (value, grads or None)."""
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = rng or make_rng(0)
    _, tape0 = forward(net, x)
    _, tape1 = forward(net, x + delta)
    batch = x.shape[0]
    vs, w = _probes(net.in_dims, batch, probes, rng)
    value, grads = 0.0, None
    for v in vs:
        j0, tc0 = jvp(net, tape0, v)
        j1, tc1 = jvp(net, tape1, v)
        d = j1 - j0
        value += w * float(np.sum(d * d)) / batch
        if grad:
            up = 2.0 * w * d / batch
            g1 = jvp_backward(net, tape1, tc1, up).grads
            g0 = jvp_backward(net, tape0, tc0, up).grads
            g = [{k: g1[i][k] - g0[i][k] for k in g1[i]} for i in range(len(g1))]
            grads = g if grads is None else [{k: a[k] + g[i][k] for k in a} for i, a in enumerate(grads)]
    return value, grads


def reg_loss(encoders: dict, compute: Network, inputs: dict, deltas: dict, z: np.ndarray,
             weights: LossWeights, probes: int = 4, rng: Optional[np.random.Generator] = None,
             grad: bool = True, encoder_grads: bool = False) -> RegTerms:
    """Layer-specific Jacobian regulariser.

    encoder term: sum over modalities of mean ||J_E(x+delta) - J_E(x)||_F^2
    compute term: mean ||J_C(z)||_F^2
    ``total`` is weighted; ``encoder`` and ``compute`` are unweighted.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = rng or make_rng(0)
    enc_value, enc_grads = 0.0, {}
    for name, net in encoders.items():
        if not np.any(deltas[name]):
            continue
        v, g = jacobian_variation_frobenius(net, inputs[name], deltas[name], probes, rng,
                                            grad=encoder_grads)
        enc_value += v
        if g is not None:
            enc_grads[name] = [{k: weights.lambda_reg_encoder * a for k, a in p.items()} for p in g]
    comp_value, comp_grads = jacobian_frobenius(compute, z, probes, rng, grad=grad)
    if comp_grads is not None:
        comp_grads = [{k: weights.lambda_reg_compute * a for k, a in p.items()} for p in comp_grads]
    total = weights.lambda_reg_encoder * enc_value + weights.lambda_reg_compute * comp_value
    return RegTerms(enc_value, comp_value, total, comp_grads, enc_grads or None)
