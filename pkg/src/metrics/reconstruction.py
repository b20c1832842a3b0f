from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class ReconstructionErrors:
    camera_mse: float
    sensor_mse: float
    combined: float

    def to_dict(self) -> dict:
        return asdict(self)


def _mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2)) if a.size else 0.0


def reconstruction_errors(truth: tuple, corrected: tuple) -> ReconstructionErrors:
    """(images, sensors) against (images, sensors); combined = camera + sensor."""
    camera = _mse(truth[0], corrected[0])
    sensor = _mse(truth[1], corrected[1])
    return ReconstructionErrors(camera, sensor, camera + sensor)


def per_sample_mse(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return np.mean(((a - b) ** 2).reshape(len(a), -1), axis=1)
