import numpy as np
import pytest

from src.synthdata import container
from src.synthdata.container import ContainerError
from src.synthdata.probe import linear_probe_r2
from src.synthdata.scene import IMAGE_SIZE, SENSOR_DIMS, generate, positions, stack


@pytest.fixture(scope="module")
def samples():
    return generate(120, seed=4)


def test_shapes(samples):
    images, sensors = stack(samples)
    assert images.shape == (120, 1, IMAGE_SIZE, IMAGE_SIZE)
    assert sensors.shape == (120, SENSOR_DIMS)
    assert positions(samples).shape == (120, 2)


def test_image_peak_tracks_position(samples):
    for s in samples:
        row, col = np.unravel_index(np.argmax(s.image[0]), s.image.shape[1:])
        u, v = s.state.position
        assert abs(row + 0.5 - u * IMAGE_SIZE) <= 1.0
        assert abs(col + 0.5 - v * IMAGE_SIZE) <= 1.0


def test_sensor_reads_position_with_small_noise(samples):
    _, sensors = stack(samples)
    pos = positions(samples)
    assert np.max(np.abs(sensors[:, :2] - pos)) <= 5 * 0.01
    assert abs(np.std(sensors[:, :2] - pos) - 0.01) < 0.003


def test_generation_is_deterministic_and_thread_independent():
    a = generate(130, seed=2, chunk=25)
    b = generate(130, seed=2, chunk=25, threads=4)
    c = generate(130, seed=3, chunk=25)
    assert len(a) == len(b) == 130
    np.testing.assert_array_equal(stack(a)[0], stack(b)[0])
    np.testing.assert_array_equal(stack(a)[1], stack(b)[1])
    assert not np.array_equal(stack(a)[1], stack(c)[1])


def test_generate_rejects_empty():
    with pytest.raises(ValueError):
        generate(0, seed=0)


def test_container_round_trip(tmp_path, samples):
    path = container.save(samples[:10], str(tmp_path / "d.mmds"), seed=4, meta={"note": "x"})
    back = container.load(path)
    assert len(back) == 10
    for s, t in zip(samples[:10], back):
        np.testing.assert_array_equal(s.image, t.image)
        np.testing.assert_array_equal(s.sensor, t.sensor)
        assert s.state == t.state
    header = container.read_header(path)
    assert header["count"] == 10 and header["seed"] == 4 and header["meta"] == {"note": "x"}


def test_container_empty_dataset(tmp_path):
    path = container.save([], str(tmp_path / "empty.mmds"))
    assert container.load(path) == []


def test_truncated_container_names_the_record(tmp_path, samples):
    path = tmp_path / "t.mmds"
    container.save(samples[:5], str(path))
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(ContainerError) as info:
        container.load(str(path))
    assert info.value.record_index == 4


def test_bad_magic_is_a_header_error(tmp_path):
    path = tmp_path / "bad.mmds"
    path.write_bytes(b"NOTMMDS" + b"\0" * 32)
    with pytest.raises(ContainerError) as info:
        container.load(str(path))
    assert info.value.record_index is None


def test_linear_probe_recovers_linear_targets(rng):
    z = rng.standard_normal((200, 6))
    targets = z[:, :2] @ np.array([[1.0, 0.5], [-2.0, 1.0]]) + 0.3
    assert linear_probe_r2(z, targets) == pytest.approx(1.0)
    noise = rng.standard_normal((200, 6))
    assert linear_probe_r2(noise[:100], targets[:100], noise[100:], targets[100:]) < 0.5
