"""Paired image / sensor samples rendered from a moving blob.

The image is a Gaussian bump at (u, v) with the scene radius; the sensor
channel vector is [u, v, radius, du, dv, u^2, v^2, u*v] plus N(0, 0.01^2)
noise. States follow smooth random trajectories, one trajectory per chunk of
consecutive samples, each chunk keyed (seed, chunk index).
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..nn.rng import make_rng

IMAGE_SIZE = 16
SENSOR_DIMS = 8
SENSOR_NOISE = 0.01
CHUNK = 50
RADIUS_RANGE = (0.05, 0.3)
MAX_SPEED = 0.05


@dataclass
class SceneState:
    position: tuple
    radius: float
    velocity: tuple

    def to_array(self) -> np.ndarray:
        return np.array([*self.position, self.radius, *self.velocity], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "SceneState":
        a = [float(v) for v in a]
        return cls((a[0], a[1]), a[2], (a[3], a[4]))


@dataclass
class MultimodalSample:
    image: np.ndarray
    sensor: np.ndarray
    state: SceneState = None


def render_image(state: SceneState, size: int = IMAGE_SIZE) -> np.ndarray:
    centers = (np.arange(size) + 0.5) / size
    u, v = state.position
    d2 = (centers[:, None] - u) ** 2 + (centers[None, :] - v) ** 2
    return np.exp(-d2 / (2.0 * state.radius ** 2))[None]


def sensor_readout(state: SceneState) -> np.ndarray:
    u, v = state.position
    du, dv = state.velocity
    return np.array([u, v, state.radius, du, dv, u * u, v * v, u * v], dtype=np.float64)


def _reflect(x: float, lo: float, hi: float, vel: float) -> tuple[float, float]:
    if x < lo:
        return 2 * lo - x, -vel
    if x > hi:
        return 2 * hi - x, -vel
    return x, vel


def _trajectory(seed: int, chunk: int, length: int) -> list:
    rng = make_rng(seed, chunk)
    u, v = rng.uniform(0.15, 0.85, size=2)
    du, dv = rng.normal(0.0, 0.02, size=2)
    radius = rng.uniform(*RADIUS_RANGE)
    states = []
    for _ in range(length):
        states.append(SceneState((float(u), float(v)), float(radius), (float(du), float(dv))))
        du = float(np.clip(du + rng.normal(0.0, 0.005), -MAX_SPEED, MAX_SPEED))
        dv = float(np.clip(dv + rng.normal(0.0, 0.005), -MAX_SPEED, MAX_SPEED))
        u, du = _reflect(u + du, 0.0, 1.0, du)
        v, dv = _reflect(v + dv, 0.0, 1.0, dv)
        radius, _ = _reflect(radius + rng.normal(0.0, 0.005), *RADIUS_RANGE, 0.0)
    return states


def _render_chunk(seed: int, chunk: int, length: int, image_size: int, sensor_noise: float) -> list:
    noise_rng = make_rng(seed, chunk, 1)
    samples = []
    for state in _trajectory(seed, chunk, length):
        sensor = sensor_readout(state) + noise_rng.normal(0.0, sensor_noise, size=SENSOR_DIMS)
        samples.append(MultimodalSample(render_image(state, image_size), sensor, state))
    return samples


def generate(n: int, seed: int, image_size: int = IMAGE_SIZE, sensor_noise: float = SENSOR_NOISE,
             chunk: int = CHUNK, threads: int = 1) -> list:
    """n samples, deterministic in (seed, chunk) regardless of ``threads``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    jobs = [(c, min(chunk, n - c * chunk)) for c in range(-(-n // chunk))]
    if threads <= 1:
        parts = [_render_chunk(seed, c, k, image_size, sensor_noise) for c, k in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            parts = list(executor.map(
                lambda job: _render_chunk(seed, job[0], job[1], image_size, sensor_noise), jobs))
    return [s for part in parts for s in part]


def stack(dataset: list) -> tuple[np.ndarray, np.ndarray]:
    """(images (n,1,H,W), sensors (n,d)) arrays."""
    if not dataset:
        return np.zeros((0, 1, IMAGE_SIZE, IMAGE_SIZE)), np.zeros((0, SENSOR_DIMS))
    return (np.stack([s.image for s in dataset]), np.stack([s.sensor for s in dataset]))


def positions(dataset: list) -> np.ndarray:
    return np.array([s.state.position for s in dataset], dtype=np.float64)
