"""Sensitivity bounds and estimates for a Network.

clean_bound           K_phi^L * prod ||W_l||_2 (global upper bound)
empirical_lipschitz   max ||f(x)-f(y)|| / ||x-y|| over sampled pairs (a lower bound)
jacobian_variation    max ||J(x+d) - J(x)||_2 / ||d|| over a ball (a lower bound on L_J)
noisy_bound_check     ||f(x+d)-f(x)|| against clean_bound ||d|| + L_J ||d||^2 / 2
"""

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..nn.layers import ACTIVATION_LIPSCHITZ, SMOOTH_ACTIVATIONS
from ..nn.network import Network, backward, forward, predict
from ..nn.rng import make_rng, unit_vectors
from .spectral import POWER_ITERS, POWER_TOL, layer_norm, spectral_norm

TIGHT_EPS = 1e-4
MIN_PAIRS = 100
# absolute radius ladder 2^j, j >= LADDER_MIN_EXP, shared by every radius
LADDER_MIN_EXP = -12


class UnsupportedActivationError(ValueError):
    pass


@dataclass
class LipschitzReport:
    clean_bound: float
    empirical_clean: float
    L_J_estimate: Optional[float]
    noisy_effective: float
    noise_norm: float
    L_J_frobenius: Optional[float] = None
    smooth: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


# ── samplers ───────────────────────────────────────────────────────────

class GaussianSampler:
    def __init__(self, dims, scale: float = 1.0, mean: Optional[np.ndarray] = None):
        self.dims = tuple(dims)
        self.scale = scale
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        x = rng.normal(0.0, self.scale, size=(n,) + self.dims)
        return x if self.mean is None else x + self.mean


class DataSampler:
    """Rows drawn (with replacement) from a fixed point set."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.points[rng.integers(0, len(self.points), size=n)]


class PairSampler(DataSampler):
    """Explicit (x, y) pairs, e.g. clean and corrupted latents of the same sample."""

    def __init__(self, xs: np.ndarray, ys: np.ndarray):
        super().__init__(xs)
        self.others = np.asarray(ys, dtype=np.float64)
        if self.points.shape != self.others.shape:
            raise ValueError("pair sides differ in shape")

    def sample_pairs(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, len(self.points), size=n)
        return self.points[idx], self.others[idx]


# ── helpers ────────────────────────────────────────────────────────────

def _require_known_activations(net: Network):
    for spec in net.layers:
        if spec.kind == "activation" and spec.activation_kind not in ACTIVATION_LIPSCHITZ:
            raise UnsupportedActivationError(f"no K_phi for activation '{spec.activation_kind}'")


def is_smooth(net: Network) -> bool:
    return all(s.kind != "activation" or s.activation_kind in SMOOTH_ACTIVATIONS for s in net.layers)


def _require_smooth(net: Network):
    bad = [s.activation_kind for s in net.layers
           if s.kind == "activation" and s.activation_kind not in SMOOTH_ACTIVATIONS]
    if bad:
        raise UnsupportedActivationError(
            f"Jacobian variation needs smooth activations; found {sorted(set(bad))}")


def _pair_ratios(net: Network, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    n = xs.shape[0]
    dx = np.linalg.norm((xs - ys).reshape(n, -1), axis=1)
    keep = dx > 0.0
    if not np.any(keep):
        return np.zeros(0)
    fx = predict(net, xs[keep]).reshape(int(keep.sum()), -1)
    fy = predict(net, ys[keep]).reshape(int(keep.sum()), -1)
    return np.linalg.norm(fx - fy, axis=1) / dx[keep]


def jacobians(net: Network, xs: np.ndarray) -> np.ndarray:
    """Batched input Jacobians, shape (P, out_size, in_size)."""
    P = xs.shape[0]
    m = net.layers[-1].out_size
    rep = np.repeat(xs, m, axis=0)
    _, tape = forward(net, rep)
    seeds = np.tile(np.eye(m), (P, 1)).reshape((P * m,) + tuple(net.out_dims))
    return backward(net, tape, seeds).input_grad.reshape(P, m, -1)


# ── public API ─────────────────────────────────────────────────────────

def clean_bound(net: Network, iters: int = POWER_ITERS, tol: float = POWER_TOL) -> float:
    _require_known_activations(net)
    bound = 1.0
    for spec, p in zip(net.layers, net.params):
        if spec.is_linear:
            bound *= layer_norm(spec, p, iters, tol)
        else:
            bound *= ACTIVATION_LIPSCHITZ[spec.activation_kind]
    return float(bound)


def empirical_lipschitz(net: Network, sampler, pairs: int = 10000, seed: int = 0,
                        tight_fraction: float = 0.5, tight_eps: float = TIGHT_EPS) -> float:
    """Max output/input change ratio over global and tight sampled pairs (a lower bound)."""
    if pairs < MIN_PAIRS:
        raise ValueError(f"pairs must be >= {MIN_PAIRS}, got {pairs}")
    rng = make_rng(seed, 17)
    n_tight = int(round(pairs * tight_fraction))
    n_global = pairs - n_tight

    if hasattr(sampler, "sample_pairs"):
        if np.all(sampler.points == sampler.others):
            raise ValueError("degenerate pair sampler: every pair is identical")
        xs, ys = sampler.sample_pairs(rng, n_global)
    else:
        xs, ys = sampler.sample(rng, n_global), sampler.sample(rng, n_global)
        probe = np.concatenate([xs, ys]) if n_global else sampler.sample(rng, 2 * MIN_PAIRS)
        if np.all(probe == probe[0]):
            raise ValueError("degenerate sampler: all sampled points are identical")

    ratios = [_pair_ratios(net, xs, ys)] if n_global else []
    if n_tight:
        base = sampler.sample(rng, n_tight)
        dirs = unit_vectors(rng, n_tight, int(np.prod(base.shape[1:]))).reshape(base.shape)
        ratios.append(_pair_ratios(net, base, base + tight_eps * dirs))
    ratios = np.concatenate(ratios) if ratios else np.zeros(0)
    return float(ratios.max()) if ratios.size else 0.0


def _ladder(radius: float) -> np.ndarray:
    top = int(np.floor(np.log2(radius)))
    if top < LADDER_MIN_EXP:
        return np.array([radius])
    return 2.0 ** np.arange(LADDER_MIN_EXP, top + 1)


def _variation(net: Network, x: np.ndarray, deltas: np.ndarray) -> tuple[float, float]:
    J0 = jacobians(net, x[None])[0]
    Js = jacobians(net, x[None] + deltas)
    norms = np.linalg.norm(deltas.reshape(len(deltas), -1), axis=1)
    spec_best, frob_best = 0.0, 0.0
    for J, dn in zip(Js, norms):
        D = J - J0
        if dn == 0.0 or not np.any(D):
            continue
        spec_best = max(spec_best, spectral_norm(D) / dn)
        frob_best = max(frob_best, float(np.linalg.norm(D)) / dn)
    return spec_best, frob_best


def _ball_offsets(net: Network, radius: float, samples: int, seed: int) -> np.ndarray:
    dims = tuple(net.in_dims)
    dirs = unit_vectors(make_rng(seed, 23), samples, int(np.prod(dims)))
    levels = _ladder(radius)
    return (levels[:, None, None] * dirs[None]).reshape((-1,) + dims)


def jacobian_variation(net: Network, x: np.ndarray, radius: float, samples: int = 16,
                       seed: int = 0, frobenius: bool = False):
    """L_J lower bound around x.

    Offsets are a fixed direction set placed on the absolute radii 2^j <= radius,
    so the offsets for a smaller radius are a subset of those for a larger one.
    With ``frobenius=True`` returns (spectral, frobenius).
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    _require_smooth(net)
    x = np.asarray(x, dtype=np.float64)
    spec_best, frob_best = _variation(net, x, _ball_offsets(net, radius, samples, seed))
    return (spec_best, frob_best) if frobenius else spec_best


def noisy_bound_check(net: Network, x: np.ndarray, delta: np.ndarray, samples: int = 8,
                      seed: int = 0, bound: Optional[float] = None) -> tuple[float, float, bool]:
    """(lhs, rhs, holds) for ||f(x+d) - f(x)|| <= L_clean ||d|| + L_J ||d||^2 / 2."""
    _require_smooth(net)
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64).reshape(x.shape)
    dn = float(np.linalg.norm(delta))
    if dn == 0.0:
        return 0.0, 0.0, True
    lhs = float(np.linalg.norm(predict(net, x + delta) - predict(net, x)))
    offsets = np.concatenate([
        _ball_offsets(net, dn, samples, seed),
        np.array([t * delta for t in (0.25, 0.5, 0.75, 1.0)]),
    ])
    L_J, _ = _variation(net, x, offsets)
    L = clean_bound(net) if bound is None else bound
    rhs = L * dn + 0.5 * L_J * dn * dn
    return lhs, rhs, lhs <= rhs * (1.0 + 1e-6)


def required_lipschitz(m: float, n_norm: float) -> float:
    """Smallest Lipschitz constant that can move a point by m over an input change n_norm."""
    if m <= 0 or n_norm <= 0:
        raise ValueError("need m > 0 and ||n|| > 0")
    return m / n_norm


def margin_consistency(z_clean: np.ndarray, z_fault: np.ndarray, n_norms: np.ndarray,
                       m: float, tol: float = 1e-9) -> dict:
    """For pairs separated by at least m, the local ratio must reach m/||n||."""
    dz = np.linalg.norm(np.asarray(z_clean) - np.asarray(z_fault), axis=1)
    n_norms = np.asarray(n_norms, dtype=np.float64)
    above = (dz >= m) & (n_norms > 0)
    violations, slack = 0, []
    for d, n in zip(dz[above], n_norms[above]):
        gap = d / n - required_lipschitz(m, n)
        slack.append(gap)
        violations += int(gap < -tol)
    return {
        "pairs": int(dz.size),
        "above_margin": int(above.sum()),
        "above_margin_fraction": float(above.mean()) if dz.size else 0.0,
        "violations": violations,
        "min_slack": float(min(slack)) if slack else None,
    }


def lipschitz_report(net: Network, x: Optional[np.ndarray] = None,
                     delta: Optional[np.ndarray] = None, noise_norm: float = 0.1,
                     pairs: int = 10000, samples: int = 16, seed: int = 0,
                     sampler=None) -> LipschitzReport:
    rng = make_rng(seed, 29)
    dims = tuple(net.in_dims)
    if x is None:
        x = rng.standard_normal(dims)
    if delta is None:
        delta = noise_norm * unit_vectors(rng, 1, int(np.prod(dims)))[0].reshape(dims)
    dn = float(np.linalg.norm(delta))
    bound = clean_bound(net)
    empirical = empirical_lipschitz(net, sampler or GaussianSampler(dims), pairs, seed)
    effective = (float(np.linalg.norm(predict(net, x + delta) - predict(net, x))) / dn
                 if dn > 0 else 0.0)
    smooth = is_smooth(net)
    L_J = L_J_frob = None
    if smooth and dn > 0:
        L_J, L_J_frob = jacobian_variation(net, x, dn, samples, seed, frobenius=True)
    return LipschitzReport(bound, empirical, L_J, effective, dn, L_J_frob, smooth)
