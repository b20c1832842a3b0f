import math

import numpy as np
import pytest

from src.faults.injector import (
    FaultConfig,
    FaultLabel,
    apply_fault,
    fault_stream,
    inject,
    make_fault,
    modality_stats,
)
from src.nn.rng import make_rng
from src.synthdata.scene import MultimodalSample, generate

LOCAL_KINDS = {
    "image": ("block_occlusion", "gain_error", "bias_drift"),
    "sensor": ("gain_error", "channel_dropout", "bias_drift"),
}


@pytest.fixture(scope="module")
def dataset():
    return generate(20, seed=0, image_size=8)


def test_clean_only_probability_leaves_samples_untouched(dataset):
    cfg = FaultConfig(fault_probability={"clean": 1.0, "sensor_fault": 0.0, "camera_fault": 0.0})
    for clean, bad, label in fault_stream(dataset, cfg):
        assert label == FaultLabel.CLEAN
        np.testing.assert_array_equal(bad.image, clean.image)
        np.testing.assert_array_equal(bad.sensor, clean.sensor)


def test_block_occlusion_zeroes_the_block_and_round_trips(rng):
    image = rng.uniform(0.1, 1.0, size=(1, 8, 8))
    sensor = rng.standard_normal(8)
    (bad_image, bad_sensor), spec = apply_fault((image, sensor), "image", "block_occlusion",
                                                top=2, left=2, height=3, width=3)
    assert spec.r == 9
    np.testing.assert_array_equal(spec.support_delta(), -image.ravel()[list(spec.support)])
    assert np.all(bad_image[0, 2:5, 2:5] == 0.0)
    mask = np.ones((1, 8, 8), dtype=bool)
    mask[0, 2:5, 2:5] = False
    np.testing.assert_array_equal(bad_image[mask], image[mask])
    np.testing.assert_array_equal(image + spec.effective_delta().reshape(image.shape), bad_image)
    np.testing.assert_array_equal(bad_sensor, sensor)
    assert spec.meta["fault"] == "block_occlusion"


def test_sensor_gain_on_one_channel(rng):
    image = rng.uniform(size=(1, 8, 8))
    sensor = rng.standard_normal(8)
    (_, bad), spec = apply_fault((image, sensor), "sensor", "gain_error", channels=[3], epsilon=0.2)
    assert spec.kind == "multiplicative" and spec.support == (3,)
    assert bad[3] == sensor[3] + sensor[3] * 0.2
    np.testing.assert_array_equal(np.delete(bad, 3), np.delete(sensor, 3))


def test_apply_fault_keeps_sample_state(dataset):
    sample = dataset[0]
    bad, _ = apply_fault(sample, "sensor", "channel_dropout", channels=[0, 1])
    assert isinstance(bad, MultimodalSample)
    assert bad.state == sample.state
    assert bad.sensor[0] == 0.0 and bad.sensor[1] == 0.0
    np.testing.assert_array_equal(bad.image, sample.image)


def test_full_intensity_block_covers_the_max_fraction(rng):
    cfg = FaultConfig(intensity=1.0, min_block_fraction=0.5, max_block_fraction=0.5)
    x = rng.uniform(0.1, 1.0, size=(1, 8, 8))
    for k in range(10):
        spec = make_fault(x, "image", "block_occlusion", cfg, make_rng(k))
        assert spec.r == 16
        assert spec.meta["height"] == 4 and spec.meta["width"] == 4


def test_image_channel_dropout_is_global(rng):
    x = rng.uniform(size=(1, 4, 4))
    spec = make_fault(x, "image", "channel_dropout")
    assert spec.r == 16
    np.testing.assert_array_equal(spec.apply(x), np.zeros_like(x))


def test_class_mix_matches_probabilities(dataset):
    cfg = FaultConfig(rng_seed=7)
    counts = np.zeros(3)
    for _, _, label in fault_stream(dataset, cfg, limit=10_000):
        counts[int(label)] += 1
    freq = counts / counts.sum()
    np.testing.assert_allclose(freq, [0.4, 0.3, 0.3], atol=0.02)


def test_stream_is_deterministic_and_epoch_keyed(dataset):
    cfg = FaultConfig(rng_seed=3)
    a = list(fault_stream(dataset, cfg, epoch=1))
    b = list(fault_stream(dataset, cfg, epoch=1))
    c = list(fault_stream(dataset, cfg, epoch=2))
    for (_, x, lx), (_, y, ly) in zip(a, b):
        assert lx == ly
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.sensor, y.sensor)
    assert any(not np.array_equal(x.image, z.image) or not np.array_equal(x.sensor, z.sensor)
               for (_, x, _), (_, z, _) in zip(a, c))


def test_at_most_one_modality_is_corrupted(dataset):
    cfg = FaultConfig(rng_seed=11, intensity=1.0)
    for clean, bad, label in fault_stream(dataset, cfg, limit=400):
        image_changed = not np.array_equal(clean.image, bad.image)
        sensor_changed = not np.array_equal(clean.sensor, bad.sensor)
        assert not (image_changed and sensor_changed)
        if image_changed:
            assert label == FaultLabel.CAMERA_FAULT
        if sensor_changed:
            assert label == FaultLabel.SENSOR_FAULT


@pytest.mark.parametrize("intensity", [0.25, 0.5, 1.0])
def test_local_support_respects_intensity_cap(dataset, intensity):
    cfg = FaultConfig(intensity=intensity)
    stats = modality_stats(dataset)
    sample = dataset[0]
    for modality, kinds in LOCAL_KINDS.items():
        x = sample.image if modality == "image" else sample.sensor
        cap = math.floor(intensity * (x.size if modality == "sensor" else x.shape[1] * x.shape[2]))
        for kind in kinds:
            for k in range(25):
                spec = make_fault(x, modality, kind, cfg, make_rng(k), stats)
                assert 1 <= spec.r <= cap


def test_specs_reproduce_corrupted_samples(dataset):
    cfg = FaultConfig(rng_seed=5)
    for clean, bad, label, specs in fault_stream(dataset, cfg, limit=60, with_specs=True):
        np.testing.assert_array_equal(specs["image"].apply(clean.image), bad.image)
        np.testing.assert_array_equal(specs["sensor"].apply(clean.sensor), bad.sensor)
        if label == FaultLabel.CLEAN:
            assert specs["image"].r == 0 and specs["sensor"].r == 0


def test_inject_with_explicit_rng_is_reproducible(dataset):
    cfg = FaultConfig()
    a, la, _ = inject(dataset[3], cfg, make_rng(42))
    b, lb, _ = inject(dataset[3], cfg, make_rng(42))
    assert la == lb
    np.testing.assert_array_equal(a.image, b.image)


def test_config_validation():
    with pytest.raises(ValueError, match="empty"):
        FaultConfig(kinds=())
    with pytest.raises(ValueError, match="unknown"):
        FaultConfig(kinds=("lens_flare",))
    with pytest.raises(ValueError):
        FaultConfig(fault_probability={"clean": 0.5, "sensor_fault": 0.2, "camera_fault": 0.2})
    with pytest.raises(ValueError):
        FaultConfig(intensity=0.0)
    with pytest.raises(ValueError, match="sensor"):
        FaultConfig(kinds=("block_occlusion",))
    only_camera = FaultConfig(kinds=("block_occlusion",),
                              fault_probability={"clean": 0.5, "sensor_fault": 0.0, "camera_fault": 0.5})
    assert only_camera.kinds_for("sensor") == ()
    assert FaultConfig.from_dict(only_camera.to_dict()).to_dict() == only_camera.to_dict()


def test_fault_kind_must_match_modality_and_intensity(rng):
    with pytest.raises(ValueError):
        make_fault(rng.standard_normal(8), "sensor", "block_occlusion")
    with pytest.raises(ValueError, match="too small"):
        make_fault(rng.standard_normal(8), "sensor", "bias_drift", FaultConfig(intensity=0.1))


def test_empty_dataset_stream_raises():
    with pytest.raises(ValueError):
        list(fault_stream([], FaultConfig()))
