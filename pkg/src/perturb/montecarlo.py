"""Monte Carlo counterparts of the closed-form energies.

Each trial t draws fresh weights from the stream keyed (seed, t); trials are
split into contiguous chunks for the worker pool and recombined in index
order, so results do not depend on the thread count.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from ..nn.layers import LayerSpec
from ..nn.network import Network, conv_support_mask, forward, materialize_matrix
from ..nn.rng import make_rng
from .energy import ConvSupportProfile
from .spec import PerturbationSpec

MIN_TRIALS = 100


class DenseGaussianBuilder:
    """M x N matrices with i.i.d. N(0, sigma2) entries."""

    def __init__(self, M: int, N: int, sigma2: float):
        self.M, self.N, self.sigma2 = M, N, sigma2

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(0.0, np.sqrt(self.sigma2), size=(self.M, self.N))

    def draw_columns(self, rng: np.random.Generator, support: tuple) -> np.ndarray:
        return rng.normal(0.0, np.sqrt(self.sigma2), size=(self.M, len(support)))

    def __call__(self, seed: int) -> np.ndarray:
        return self.draw(make_rng(seed))


class ConvLemmaBuilder:
    """Conv sparsity pattern with an independent N(0, sigma2) entry per (row, column)."""

    def __init__(self, layer: LayerSpec, sigma2: float):
        self.layer, self.sigma2 = layer, sigma2
        self.mask = conv_support_mask(layer)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        A = np.zeros(self.mask.shape)
        A[self.mask] = rng.normal(0.0, np.sqrt(self.sigma2), size=int(self.mask.sum()))
        return A

    def draw_columns(self, rng: np.random.Generator, support: tuple) -> np.ndarray:
        cols = self.mask[:, list(support)]
        A = np.zeros(cols.shape)
        A[cols] = rng.normal(0.0, np.sqrt(self.sigma2), size=int(cols.sum()))
        return A

    def profile(self, support=()) -> ConvSupportProfile:
        return ConvSupportProfile.from_layer(self.layer, support)

    def __call__(self, seed: int) -> np.ndarray:
        return self.draw(make_rng(seed))


class ConvSharedBuilder(ConvLemmaBuilder):
    """True weight-shared convolution: one N(0, sigma2) kernel per trial."""

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        shape = self.layer.param_shapes()["W"]
        W = rng.normal(0.0, np.sqrt(self.sigma2), size=shape)
        return materialize_matrix(self.layer, {"W": W})

    def draw_columns(self, rng: np.random.Generator, support: tuple) -> np.ndarray:
        return self.draw(rng)[:, list(support)]


Builder = Union[DenseGaussianBuilder, ConvLemmaBuilder, Callable[[int], object]]


@dataclass
class TrialBatch:
    energies: np.ndarray
    cross_terms: np.ndarray


def _trial_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t]).generate_state(1, dtype=np.uint64)[0])


def _columns(builder, seed: int, t: int, support: tuple) -> np.ndarray:
    if hasattr(builder, "draw_columns"):
        return builder.draw_columns(make_rng(seed, t), support)
    layer = builder(_trial_seed(seed, t))
    if isinstance(layer, Network):
        n = int(np.prod(layer.in_dims))
        basis = np.zeros((len(support), n))
        basis[np.arange(len(support)), list(support)] = 1.0
        y0, _ = forward(layer, np.zeros((1,) + tuple(layer.in_dims)))
        y, _ = forward(layer, basis.reshape((len(support),) + tuple(layer.in_dims)))
        return (y - y0).reshape(len(support), -1).T
    return np.asarray(layer, dtype=np.float64)[:, list(support)]


def _run_chunk(builder, p: PerturbationSpec, seed: int, start: int, stop: int) -> TrialBatch:
    d = p.support_delta()
    energies = np.empty(stop - start)
    cross = np.empty(stop - start)
    for k, t in enumerate(range(start, stop)):
        cols = _columns(builder, seed, t, p.support)
        out = cols @ d
        energies[k] = out @ out
        diag = np.sum((cols * cols) @ (d * d))
        cross[k] = energies[k] - diag
    return TrialBatch(energies, cross)


def run_trials(builder, p: PerturbationSpec, trials: int, seed: int = 0,
               threads: int = 1, chunk: int = 2000) -> TrialBatch:
    if trials < MIN_TRIALS:
        raise ValueError(f"trials must be >= {MIN_TRIALS}, got {trials}")
    if p.r == 0:
        z = np.zeros(trials)
        return TrialBatch(z, z.copy())
    bounds = [(a, min(a + chunk, trials)) for a in range(0, trials, chunk)]
    if threads <= 1:
        parts = [_run_chunk(builder, p, seed, a, b) for a, b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            parts = list(executor.map(lambda ab: _run_chunk(builder, p, seed, *ab), bounds))
    return TrialBatch(np.concatenate([q.energies for q in parts]),
                      np.concatenate([q.cross_terms for q in parts]))


def _mean_stderr(values: np.ndarray) -> tuple[float, float]:
    mean = float(np.mean(values))
    if np.all(values == values[0]):
        return mean, 0.0
    return mean, float(np.std(values, ddof=1) / np.sqrt(values.size))


def monte_carlo_energy(layer_builder, p: PerturbationSpec, trials: int, seed: int = 0,
                       threads: int = 1) -> tuple[float, float]:
    """(mean, stderr) of ||A delta_eff||^2 over fresh random layers."""
    return _mean_stderr(run_trials(layer_builder, p, trials, seed, threads).energies)


def overlap_stress(builder: ConvLemmaBuilder, p: PerturbationSpec, trials: int,
                   seed: int = 0, threads: int = 1) -> dict:
    """Report how far cross terms between overlapping receptive sets move the energy.

    Informational only: no pass/fail verdict.
    """
    profile = builder.profile(p.support)
    d = p.support_delta()
    closed = float(builder.sigma2 * np.dot(profile.sizes(), d * d))
    batch = run_trials(builder, p, trials, seed, threads)
    mean, stderr = _mean_stderr(batch.energies)
    cross_mean, cross_stderr = _mean_stderr(batch.cross_terms) if p.r > 1 else (0.0, 0.0)

    mask = builder.mask[:, list(p.support)]
    overlapping = 0
    for a in range(p.r):
        for b in range(a + 1, p.r):
            overlapping += int(np.any(mask[:, a] & mask[:, b]))
    return {
        "model": "shared" if isinstance(builder, ConvSharedBuilder) else "lemma",
        "support": list(p.support),
        "overlapping_pairs": overlapping,
        "closed_form": closed,
        "mc_mean": mean,
        "stderr": stderr,
        "deviation": abs(mean - closed),
        "deviation_stderr_units": abs(mean - closed) / stderr if stderr > 0 else 0.0,
        "cross_term_mean": cross_mean,
        "cross_term_stderr": cross_stderr,
        "cross_term_stderr_units": abs(cross_mean) / cross_stderr if cross_stderr > 0 else 0.0,
    }
