"""Reproducible modality-level fault injection.

At most one modality is corrupted per sample. Every fault is expressed as a
PerturbationSpec on the flattened modality and the corrupted tensor is
produced by applying that spec, so ``x + effective_delta`` reproduces it
bit for bit.
"""

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterator, Optional

import numpy as np

from ..nn.rng import make_rng
from ..perturb.spec import PerturbationSpec
from ..synthdata.scene import MultimodalSample

FAULT_KINDS = ("block_occlusion", "gaussian_noise", "gain_error", "channel_dropout", "bias_drift")
MODALITY_KINDS = {
    "image": FAULT_KINDS,
    "sensor": ("gaussian_noise", "gain_error", "channel_dropout", "bias_drift"),
}


class FaultLabel(IntEnum):
    CLEAN = 0
    SENSOR_FAULT = 1
    CAMERA_FAULT = 2

    @property
    def key(self) -> str:
        return ("clean", "sensor_fault", "camera_fault")[self.value]

    @property
    def modality(self) -> Optional[str]:
        return {1: "sensor", 2: "image"}.get(self.value)


@dataclass
class FaultConfig:
    kinds: tuple = FAULT_KINDS
    intensity: float = 0.5
    rng_seed: int = 0
    fault_probability: dict = field(default_factory=lambda: {
        "clean": 0.4, "sensor_fault": 0.3, "camera_fault": 0.3})
    min_block_fraction: float = 0.1
    max_block_fraction: float = 1.0

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        if not self.kinds:
            raise ValueError("fault kinds must not be empty")
        unknown = set(self.kinds) - set(FAULT_KINDS)
        if unknown:
            raise ValueError(f"unknown fault kinds {sorted(unknown)}")
        if not 0.0 < self.intensity <= 1.0:
            raise ValueError(f"intensity must be in (0, 1], got {self.intensity}")
        probs = {k: float(self.fault_probability.get(k, 0.0)) for k in
                 ("clean", "sensor_fault", "camera_fault")}
        extra = set(self.fault_probability) - set(probs)
        if extra or any(p < 0 for p in probs.values()) or abs(sum(probs.values()) - 1.0) > 1e-9:
            raise ValueError(f"fault_probability must be a distribution over clean/sensor_fault/"
                             f"camera_fault, got {self.fault_probability}")
        self.fault_probability = probs
        for label in (FaultLabel.SENSOR_FAULT, FaultLabel.CAMERA_FAULT):
            if probs[label.key] > 0 and not self.kinds_for(label.modality):
                raise ValueError(f"no configured fault kind applies to the {label.modality} modality")

    def kinds_for(self, modality: str) -> tuple:
        return tuple(k for k in self.kinds if k in MODALITY_KINDS[modality])

    @classmethod
    def from_dict(cls, d: dict) -> "FaultConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "kinds": list(self.kinds),
            "intensity": self.intensity,
            "rng_seed": self.rng_seed,
            "fault_probability": dict(self.fault_probability),
            "min_block_fraction": self.min_block_fraction,
            "max_block_fraction": self.max_block_fraction,
        }


def modality_stats(dataset: list) -> dict:
    """Per-channel std and range of each modality over a dataset."""
    images = np.stack([s.image for s in dataset])
    sensors = np.stack([s.sensor for s in dataset])
    img = images.reshape(len(dataset), images.shape[1], -1).transpose(1, 0, 2).reshape(images.shape[1], -1)
    return {
        "image": {"std": img.std(axis=1), "range": np.ptp(img, axis=1)},
        "sensor": {"std": sensors.std(axis=0), "range": np.ptp(sensors, axis=0)},
    }


def _channel_values(x: np.ndarray, modality: str, stats: Optional[dict], key: str) -> np.ndarray:
    """Per-element std/range broadcast over the modality tensor."""
    if stats is not None:
        per_channel = np.asarray(stats[modality][key], dtype=np.float64)
    else:
        v = float(np.std(x) if key == "std" else np.ptp(x))
        per_channel = np.full(x.shape[0] if modality == "image" else x.size, v)
    per_channel = np.where(per_channel > 0, per_channel, 1.0)
    if modality == "image":
        return np.broadcast_to(per_channel[:, None, None], x.shape).ravel()
    return per_channel.ravel()


def _local_cap(intensity: float, size: int) -> int:
    cap = int(math.floor(intensity * size))
    if cap < 1:
        raise ValueError(f"intensity {intensity} too small for a local fault on {size} elements")
    return cap


def _block_indices(shape: tuple, top: int, left: int, height: int, width: int) -> np.ndarray:
    grid = np.zeros(shape, dtype=bool)
    grid[:, top:top + height, left:left + width] = True
    return np.flatnonzero(grid)


def _random_block(rng: np.random.Generator, shape: tuple, cfg: FaultConfig) -> dict:
    _, H, W = shape
    cap = _local_cap(cfg.intensity, H * W)
    sides = []
    for d in (H, W):
        hi = max(1, math.ceil(cfg.intensity * cfg.max_block_fraction * d))
        lo = min(hi, max(1, math.ceil(cfg.min_block_fraction * d)))
        sides.append(int(rng.integers(lo, hi + 1)))
    h, w = sides
    if h * w > cap:
        w = max(1, cap // h)
        h = min(h, cap // w)
    return {"top": int(rng.integers(0, H - h + 1)), "left": int(rng.integers(0, W - w + 1)),
            "height": h, "width": w}


def _random_run(rng: np.random.Generator, d: int, intensity: float) -> list:
    cap = _local_cap(intensity, d)
    length = int(rng.integers(1, cap + 1))
    start = int(rng.integers(0, d - length + 1))
    return list(range(start, start + length))


def make_fault(x: np.ndarray, modality: str, kind: str, cfg: Optional[FaultConfig] = None,
               rng: Optional[np.random.Generator] = None, stats: Optional[dict] = None,
               **params) -> PerturbationSpec:
    """PerturbationSpec for one fault on one modality tensor.

    Explicit ``params`` override the random draw: block geometry (top, left,
    height, width) for image-local kinds, ``channels`` for sensor-local kinds,
    ``epsilon`` (gain), ``offset`` (drift) and ``std`` (noise).
    """
    if kind not in MODALITY_KINDS[modality]:
        raise ValueError(f"fault '{kind}' does not apply to the {modality} modality")
    cfg = cfg or FaultConfig()
    rng = rng or make_rng(cfg.rng_seed)
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    meta = {"modality": modality, "fault": kind}

    if kind == "gaussian_noise":
        std = params.get("std")
        scale = (np.full(flat.size, float(std)) if std is not None
                 else cfg.intensity * _channel_values(x, modality, stats, "std"))
        delta = rng.normal(0.0, 1.0, size=flat.size) * scale
        return PerturbationSpec.additive(np.arange(flat.size), delta, size=flat.size, **meta)

    if modality == "image" and kind == "channel_dropout":
        support = np.arange(flat.size)
    elif modality == "image":
        block = {k: params[k] for k in ("top", "left", "height", "width") if k in params}
        if len(block) < 4:
            block = _random_block(rng, x.shape, cfg)
        meta.update(block)
        support = _block_indices(x.shape, **block)
    else:
        channels = params.get("channels")
        if channels is None:
            channels = _random_run(rng, flat.size, cfg.intensity)
        meta["channels"] = [int(c) for c in channels]
        support = np.asarray(channels, dtype=np.int64)

    if kind == "block_occlusion":
        return PerturbationSpec.additive(support, -flat[support], size=flat.size, **meta)
    if kind == "channel_dropout":
        return PerturbationSpec.multiplicative(flat, support, -np.ones(len(support)), **meta)
    if kind == "gain_error":
        eps = params.get("epsilon")
        if eps is None:
            eps = float(rng.choice([-1.0, 1.0]) * cfg.intensity * rng.uniform(0.5, 1.0))
        meta["epsilon"] = float(eps)
        return PerturbationSpec.multiplicative(flat, support, np.full(len(support), eps), **meta)
    # bias_drift
    offset = params.get("offset")
    if offset is None:
        ranges = _channel_values(x, modality, stats, "range")[support]
        offset = float(rng.choice([-1.0, 1.0])) * cfg.intensity * ranges
    meta["offset"] = np.atleast_1d(offset).tolist()
    return PerturbationSpec.additive(support, np.broadcast_to(offset, (len(support),)),
                                     size=flat.size, **meta)


def _split(sample):
    if isinstance(sample, MultimodalSample):
        return sample.image, sample.sensor
    return sample[0], sample[1]


def _rebuild(sample, image, sensor):
    if isinstance(sample, MultimodalSample):
        return replace(sample, image=image, sensor=sensor)
    return image, sensor


def apply_fault(sample, modality: str, kind: str, cfg: Optional[FaultConfig] = None,
                rng: Optional[np.random.Generator] = None, stats: Optional[dict] = None, **params):
    """One explicit fault on one modality; returns (corrupted sample, spec)."""
    image, sensor = _split(sample)
    x = image if modality == "image" else sensor
    spec = make_fault(x, modality, kind, cfg, rng, stats, **params)
    bad = spec.apply(x)
    if modality == "image":
        return _rebuild(sample, bad, sensor.copy()), spec
    return _rebuild(sample, image.copy(), bad), spec


def inject(sample, cfg: FaultConfig, rng: Optional[np.random.Generator] = None,
           stats: Optional[dict] = None):
    """Returns (corrupted sample, FaultLabel, {"image": spec, "sensor": spec})."""
    rng = rng or make_rng(cfg.rng_seed)
    image, sensor = _split(sample)
    probs = cfg.fault_probability
    draw = rng.random()
    if draw < probs["clean"]:
        label = FaultLabel.CLEAN
    elif draw < probs["clean"] + probs["sensor_fault"]:
        label = FaultLabel.SENSOR_FAULT
    else:
        label = FaultLabel.CAMERA_FAULT
    if probs[label.key] == 0.0:
        # guards the draw == cumulative edge when the final class has zero mass
        label = max((lbl for lbl in FaultLabel if probs[lbl.key] > 0), key=lambda c: probs[c.key])

    specs = {"image": PerturbationSpec.empty(image.size),
             "sensor": PerturbationSpec.empty(sensor.size)}
    corrupted = {"image": image.copy(), "sensor": sensor.copy()}
    if label != FaultLabel.CLEAN:
        modality = label.modality
        kinds = cfg.kinds_for(modality)
        kind = kinds[int(rng.integers(0, len(kinds)))]
        x = image if modality == "image" else sensor
        spec = make_fault(x, modality, kind, cfg, rng, stats)
        specs[modality] = spec
        corrupted[modality] = spec.apply(x)
    return _rebuild(sample, corrupted["image"], corrupted["sensor"]), label, specs


def fault_stream(dataset: list, cfg: FaultConfig, limit: Optional[int] = None, epoch: int = 0,
                 stats: Optional[dict] = None, with_specs: bool = False) -> Iterator[tuple]:
    """Yields (clean, corrupted, label[, specs]); cycles the dataset up to ``limit`` items.

    Sample i draws from the stream keyed (rng_seed, epoch, i).
    """
    if not dataset:
        raise ValueError("dataset must not be empty")
    stats = stats if stats is not None else modality_stats(dataset)
    total = len(dataset) if limit is None else limit
    for i in range(total):
        clean = dataset[i % len(dataset)]
        corrupted, label, specs = inject(clean, cfg, make_rng(cfg.rng_seed, epoch, i), stats)
        yield (clean, corrupted, label, specs) if with_specs else (clean, corrupted, label)
