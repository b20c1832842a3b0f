import numpy as np
import pytest

from src.nn import layers as L
from src.perturb.energy import (
    ConvConfig,
    ConvSupportProfile,
    DenseConfig,
    compare_per_output,
    expected_energy_conv,
    expected_energy_dense,
)
from src.perturb.montecarlo import (
    ConvLemmaBuilder,
    ConvSharedBuilder,
    DenseGaussianBuilder,
    monte_carlo_energy,
    overlap_stress,
)
from src.perturb.spec import PerturbationSpec
from src.perturb.suite import verify_lemmas


def test_additive_spec_sorts_support_and_applies():
    p = PerturbationSpec.additive([4, 1], [0.5, -2.0], size=6)
    assert p.support == (1, 4)
    np.testing.assert_array_equal(p.effective_delta(), [0, -2.0, 0, 0, 0.5, 0])
    np.testing.assert_array_equal(p.apply(np.ones(6)), [1, -1.0, 1, 1, 1.5, 1])


def test_multiplicative_spec_uses_diag_x_eps():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    p = PerturbationSpec.multiplicative(x, [3], [0.2])
    np.testing.assert_array_equal(p.support_delta(), [4.0 * 0.2])
    np.testing.assert_array_equal(p.apply(x), x + np.array([0, 0, 0, 0.8]))


def test_spec_validation():
    with pytest.raises(ValueError):
        PerturbationSpec.additive([1, 1], [0.1, 0.2], size=4)
    with pytest.raises(ValueError):
        PerturbationSpec.additive([5], [0.1], size=4)
    with pytest.raises(ValueError):
        PerturbationSpec("multiplicative", (0,), np.ones(1)).support_delta()


def test_dense_closed_form_examples():
    p = PerturbationSpec.additive([2], [0.5], size=8)
    assert expected_energy_dense(10, 2.0, p) == pytest.approx(10 * 2.0 * 0.25)
    assert expected_energy_dense(16, 1.0, PerturbationSpec.empty(8)) == 0.0


def test_conv_closed_form_single_interior_index():
    layer = L.conv1d((1, 16), 1, 3, padding="valid", bias=False)
    profile = ConvSupportProfile.from_layer(layer)
    assert profile.column_sizes[8] == 3
    assert profile.column_sizes[0] == 1
    p = PerturbationSpec.additive([8], [1.0], size=16)
    exact, bound = expected_energy_conv(profile, 1.0, p)
    assert exact == pytest.approx(3.0)
    assert bound == pytest.approx(3.0)


def test_valid_conv_column_sizes_ramp_up_and_down():
    profile = ConvSupportProfile.from_layer(L.conv1d((1, 5), 1, 3, padding="valid"))
    assert [profile.column_sizes[i] for i in range(5)] == [1, 2, 3, 2, 1]
    assert profile.K == 3


def test_conv_closed_form_two_indices():
    profile = ConvSupportProfile({0: 2, 1: 3}, K=3)
    p = PerturbationSpec.additive([0, 1], [1.0, 1.0], size=2)
    exact, bound = expected_energy_conv(profile, 1.0, p)
    assert exact == pytest.approx(5.0)
    assert bound == pytest.approx(12.0)


def test_dense_monte_carlo_agrees_with_closed_form():
    rng = np.random.default_rng(0)
    p = PerturbationSpec.additive([1, 5, 9], rng.uniform(-1, 1, 3), size=12)
    closed = expected_energy_dense(32, 0.5, p)
    mean, stderr = monte_carlo_energy(DenseGaussianBuilder(32, 12, 0.5), p, 4000, seed=3)
    assert abs(mean - closed) <= 4.0 * stderr


def test_conv_monte_carlo_agrees_with_closed_form():
    layer = L.conv2d((1, 6, 6), 1, 3, padding="same", bias=False)
    builder = ConvLemmaBuilder(layer, 1.0)
    p = PerturbationSpec.additive([0, 14], [0.7, -0.4], size=36)
    exact, bound = expected_energy_conv(builder.profile(p.support), 1.0, p)
    mean, stderr = monte_carlo_energy(builder, p, 4000, seed=5)
    assert abs(mean - exact) <= 4.0 * stderr
    assert exact <= bound


def test_monte_carlo_is_thread_count_invariant():
    builder = DenseGaussianBuilder(16, 8, 1.0)
    p = PerturbationSpec.additive([2, 3], [0.3, 0.9], size=8)
    one = monte_carlo_energy(builder, p, 4500, seed=11, threads=1)
    four = monte_carlo_energy(builder, p, 4500, seed=11, threads=4)
    assert one == four


def test_too_few_trials_rejected():
    p = PerturbationSpec.additive([0], [1.0], size=4)
    with pytest.raises(ValueError):
        monte_carlo_energy(DenseGaussianBuilder(4, 4, 1.0), p, 10)


def test_per_output_comparison_single_index_holds_with_equality():
    layer = L.conv1d((1, 32), 1, 3, bias=False)
    profile = ConvSupportProfile.from_layer(layer)
    p = PerturbationSpec.additive([10], [0.5], size=32)
    cmp_ = compare_per_output(DenseConfig(64, 1.0), ConvConfig(profile, 1.0), p)
    assert cmp_.holds
    assert cmp_.conv_per_output == cmp_.dense_per_output


def test_per_output_comparison_equal_magnitudes_ratio_is_one_over_r():
    layer = L.conv1d((1, 32), 1, 3, bias=False)
    profile = ConvSupportProfile.from_layer(layer)
    p = PerturbationSpec.additive([5, 12, 20], [0.5, -0.5, 0.5], size=32)
    cmp_ = compare_per_output(DenseConfig(64, 1.0), ConvConfig(profile, 1.0), p)
    assert cmp_.conv_per_output / cmp_.dense_per_output == pytest.approx(1.0 / 3.0, rel=1e-12)


def test_per_output_comparison_guards():
    layer = L.conv1d((1, 32), 1, 3, bias=False)
    profile = ConvSupportProfile.from_layer(layer)
    p = PerturbationSpec.additive([10], [0.5], size=32)
    with pytest.raises(ValueError):
        compare_per_output(DenseConfig(64, 1.0), ConvConfig(profile, 2.0), p)
    with pytest.raises(ValueError):
        compare_per_output(DenseConfig(8, 1.0), ConvConfig(profile, 1.0), p)


def test_overlap_stress_reports_cross_terms():
    layer = L.conv1d((1, 32), 1, 3, bias=False)
    p = PerturbationSpec.additive([10, 11], [1.0, 1.0], size=32)
    shared = overlap_stress(ConvSharedBuilder(layer, 1.0), p, 2000, seed=1)
    lemma = overlap_stress(ConvLemmaBuilder(layer, 1.0), p, 2000, seed=1)
    assert shared["overlapping_pairs"] == 1
    assert shared["model"] == "shared" and lemma["model"] == "lemma"
    assert "pass" not in shared


def test_verify_lemmas_small_run_passes():
    report = verify_lemmas(trials=2000, seed=0, dense_configs=3, conv_configs=3, theorem_cases=4,
                           overlap=False, verbose=False)
    assert report["pass"], report["failed"]
    theorem = [c for c in report["checks"] if c["lemma"] == "per-output-concentration"]
    assert len(theorem) == 4
    assert all(c["multi_index"]["equals_one_over_r"] for c in theorem)


def test_verify_lemmas_config_guards():
    with pytest.raises(ValueError):
        verify_lemmas(trials=10, verbose=False)
    with pytest.raises(ValueError):
        verify_lemmas(trials=200, sigma_w2=1.0, sigma_k2=2.0, verbose=False)
