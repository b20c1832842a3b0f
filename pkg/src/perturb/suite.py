"""The lemma verification suite behind ``verify-lemmas``."""

import time

import numpy as np

from ..nn.layers import conv1d, conv2d
from ..nn.rng import make_rng
from .energy import (
    ConvConfig,
    ConvSupportProfile,
    DenseConfig,
    compare_per_output,
    expected_energy_conv,
    expected_energy_dense,
)
from .montecarlo import (
    MIN_TRIALS,
    ConvLemmaBuilder,
    ConvSharedBuilder,
    DenseGaussianBuilder,
    monte_carlo_energy,
    overlap_stress,
)
from .spec import PerturbationSpec, random_spec

# dyadic values keep the theorem comparison free of rounding
_DYADIC = (0.25, 0.5, 1.0)


def _dense_checks(n_configs: int, trials: int, seed: int, threads: int, level: float) -> list:
    rng = make_rng(seed, 1)
    checks = []
    for c in range(n_configs):
        M = int(rng.integers(16, 257))
        N = int(rng.integers(8, 65))
        r = int(rng.integers(1, 5))
        sigma2 = float(rng.choice([0.5, 1.0, 2.0]))
        kind = "additive" if c % 2 == 0 else "multiplicative"
        p = random_spec(rng, N, r, kind)
        closed = expected_energy_dense(M, sigma2, p)
        mean, stderr = monte_carlo_energy(DenseGaussianBuilder(M, N, sigma2), p, trials,
                                          seed=seed * 1000 + c, threads=threads)
        checks.append({
            "name": f"dense_{c}",
            "lemma": "dense-additive" if kind == "additive" else "dense-multiplicative",
            "config": {"M": M, "N": N, "r": r, "sigma2": sigma2, "kind": kind},
            "closed_form": closed,
            "mc_mean": mean,
            "stderr": stderr,
            "pass": abs(mean - closed) <= level * stderr + 1e-12,
        })
    return checks


def _random_conv_layer(rng: np.random.Generator, c: int):
    K = int(rng.choice([3, 5]))
    padding = "valid" if c % 2 == 0 else "same"
    if c % 5 == 4:
        side = int(rng.integers(6, 11))
        return conv2d((1, side, side), 1, K, padding=padding, bias=False)
    N = int(rng.integers(16, 65))
    return conv1d((1, N), 1, K, padding=padding, bias=False)


def _conv_checks(n_configs: int, trials: int, seed: int, threads: int, level: float) -> list:
    rng = make_rng(seed, 2)
    checks = []
    for c in range(n_configs):
        layer = _random_conv_layer(rng, c)
        sigma2 = float(rng.choice([0.5, 1.0, 2.0]))
        kind = "additive" if c % 2 == 0 else "multiplicative"
        p = random_spec(rng, layer.in_size, int(rng.integers(1, 5)), kind)
        builder = ConvLemmaBuilder(layer, sigma2)
        exact, bound = expected_energy_conv(builder.profile(p.support), sigma2, p)
        mean, stderr = monte_carlo_energy(builder, p, trials, seed=seed * 1000 + 100 + c,
                                          threads=threads)
        checks.append({
            "name": f"conv_{c}",
            "lemma": "conv-additive" if kind == "additive" else "conv-multiplicative",
            "config": {"kind": layer.kind, "in_dims": list(layer.in_dims), "K": layer.kernel_size,
                       "padding": layer.padding, "r": p.r, "sigma2": sigma2, "perturbation": kind},
            "closed_form": exact,
            "upper_bound": bound,
            "mc_mean": mean,
            "stderr": stderr,
            "pass": abs(mean - exact) <= level * stderr + 1e-12 and mean <= bound + level * stderr,
        })
    return checks


def _theorem_checks(n_cases: int, sigma_w2: float, sigma_k2: float, seed: int) -> list:
    rng = make_rng(seed, 3)
    checks = []
    for c in range(n_cases):
        N = int(rng.integers(8, 65))
        K = int(rng.choice([3, 5]))
        layer = conv1d((1, N), 1, K, padding="valid" if c % 2 == 0 else "same", bias=False)
        profile = ConvSupportProfile.from_layer(layer)
        idx = int(rng.integers(0, N))
        mag = float(rng.choice(_DYADIC)) * float(rng.choice([-1.0, 1.0]))
        p = PerturbationSpec.additive([idx], [mag], size=N)
        s = profile.column_sizes[idx]
        M = int(rng.integers(max(4 * s, 16), 257))
        cmp_ = compare_per_output(DenseConfig(M, sigma_w2), ConvConfig(profile, sigma_k2), p)

        # multi-index support with equal delta_i^2: ratio is exactly 1/r
        r = int(rng.integers(2, 5))
        pm = random_spec(rng, N, r, "additive", equal_magnitudes=True)
        multi = compare_per_output(DenseConfig(max(4 * ConvSupportProfile.from_layer(
            layer, pm.support).s, 16), sigma_w2), ConvConfig(profile, sigma_k2), pm)
        ratio = multi.conv_per_output / multi.dense_per_output
        checks.append({
            "name": f"theorem_{c}",
            "lemma": "per-output-concentration",
            "config": {"N": N, "K": K, "M": M, "index": idx, "s": s},
            "comparison": cmp_.to_dict(),
            "multi_index": {"r": r, "conv_over_dense": ratio,
                            "equals_one_over_r": bool(abs(ratio - 1.0 / r) <= 1e-12)},
            "pass": cmp_.holds,
        })
    return checks


def _overlap_reports(trials: int, seed: int, threads: int) -> list:
    layer = conv1d((1, 32), 1, 3, padding="valid", bias=False)
    cases = [
        ("adjacent-shared", ConvSharedBuilder(layer, 1.0), [10, 11]),
        ("adjacent-lemma", ConvLemmaBuilder(layer, 1.0), [10, 11]),
        ("disjoint-shared", ConvSharedBuilder(layer, 1.0), [5, 20]),
        ("single-shared", ConvSharedBuilder(layer, 1.0), [12]),
    ]
    reports = []
    for k, (name, builder, support) in enumerate(cases):
        p = PerturbationSpec.additive(support, np.ones(len(support)), size=32)
        rep = overlap_stress(builder, p, trials, seed=seed * 1000 + 500 + k, threads=threads)
        rep["name"] = name
        reports.append(rep)
    return reports


def verify_lemmas(trials: int = 20000, seed: int = 0, threads: int = 1, sigma_level: float = 4.0,
                  dense_configs: int = 10, conv_configs: int = 10, theorem_cases: int = 10,
                  sigma_w2: float = 1.0, sigma_k2: float = 1.0, theorem: bool = True,
                  overlap: bool = True, verbose: bool = True) -> dict:
    """Run every closed-form vs Monte Carlo check; ``report["pass"]`` is the verdict."""
    if trials < MIN_TRIALS:
        raise ValueError(f"trials must be >= {MIN_TRIALS}, got {trials}")
    if theorem and sigma_w2 != sigma_k2:
        raise ValueError("the per-output comparison needs sigma_w2 == sigma_k2")

    started = time.time()
    checks = []
    if verbose:
        print(f"\n[Lemmas] dense: {dense_configs} configs x {trials} trials")
    checks += _dense_checks(dense_configs, trials, seed, threads, sigma_level)
    if verbose:
        print(f"[Lemmas] conv: {conv_configs} configs x {trials} trials")
    checks += _conv_checks(conv_configs, trials, seed, threads, sigma_level)
    if theorem:
        checks += _theorem_checks(theorem_cases, sigma_w2, sigma_k2, seed)
    overlap_reports = _overlap_reports(trials, seed, threads) if overlap else []

    failed = [c["name"] for c in checks if not c["pass"]]
    if verbose:
        for c in checks:
            if "mc_mean" in c:
                print(f"  - {c['name']}: closed={c['closed_form']:.6g} mc={c['mc_mean']:.6g} "
                      f"+/- {c['stderr']:.3g} {'ok' if c['pass'] else 'FAIL'}")
        print(f"  - {len(checks) - len(failed)}/{len(checks)} checks passed "
              f"in {time.time() - started:.1f}s")
    return {
        "trials": trials,
        "seed": seed,
        "sigma_level": sigma_level,
        "checks": checks,
        "overlap_stress": overlap_reports,
        "failed": failed,
        "pass": not failed,
    }
