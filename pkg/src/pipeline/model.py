"""Multimodal autoencoder, compute (correction) block and detector head.

Encoders map each modality to its own latent; the concatenated latent z
feeds both decoders, the compute block C: R^z -> R^z and the detector
M: R^z -> 3 class scores.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import softmax

from ..faults.injector import FaultLabel
from ..nn import layers as L
from ..nn.network import Network, forward, init_network, param_hash, predict

MODALITIES = ("image", "sensor")
DETECTOR_INPUTS = ("pre_compute", "post_compute")


@dataclass
class ArchConfig:
    image_size: int = 16
    sensor_dims: int = 8
    z_image: int = 16
    z_sensor: int = 16
    image_channels: tuple = (8, 16, 16)
    sensor_channels: tuple = (8, 8)
    kernel_size: int = 3
    decoder_channels: int = 8
    compute_layers: int = 4
    compute_hidden: Optional[int] = None
    compute_init: str = "identity"
    detector_hidden: int = 32

    @property
    def z(self) -> int:
        return self.z_image + self.z_sensor

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        for k in ("image_channels", "sensor_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class MultimodalAE:
    encoders: dict
    decoders: dict
    latent_dims: dict
    frozen: bool = False
    arch: ArchConfig = field(default_factory=ArchConfig)
    frozen_hash: Optional[str] = None

    def networks(self) -> list:
        return [self.encoders[m] for m in MODALITIES] + [self.decoders[m] for m in MODALITIES]

    def param_hash(self) -> str:
        return param_hash(*self.networks())

    def freeze(self):
        self.frozen = True
        self.frozen_hash = self.param_hash()

    def split(self, z: np.ndarray) -> dict:
        return {"image": z[..., :self.latent_dims["image"]],
                "sensor": z[..., self.latent_dims["image"]:]}


@dataclass
class ComputeBlock:
    net: Network


@dataclass
class DetectorHead:
    net: Network
    input_space: str = "pre_compute"

    def __post_init__(self):
        if self.input_space not in DETECTOR_INPUTS:
            raise ValueError(f"detector input must be one of {DETECTOR_INPUTS}")


@dataclass
class LatentPair:
    z_c: np.ndarray
    z_f: np.ndarray

    def __post_init__(self):
        if np.shape(self.z_c) != np.shape(self.z_f):
            raise ValueError("latent pair sides differ in shape")

    def distance(self) -> np.ndarray:
        return np.linalg.norm(np.asarray(self.z_c) - np.asarray(self.z_f), axis=-1)


@dataclass
class CorrectionResult:
    image: np.ndarray
    sensor: np.ndarray
    pair: LatentPair


# ── architecture ───────────────────────────────────────────────────────

def _image_encoder(a: ArchConfig) -> list:
    dims = (1, a.image_size, a.image_size)
    layers = []
    for c in a.image_channels:
        conv = L.conv2d(dims, c, a.kernel_size, stride=2, padding="same")
        layers += [conv, L.activation(conv.out_dims, "relu")]
        dims = conv.out_dims
    return layers + [L.dense(dims, a.z_image)]


def _sensor_encoder(a: ArchConfig) -> list:
    dims = (1, a.sensor_dims)
    layers = []
    for c in a.sensor_channels:
        conv = L.conv1d(dims, c, a.kernel_size, stride=1, padding="same")
        layers += [conv, L.activation(conv.out_dims, "relu")]
        dims = conv.out_dims
    return layers + [L.dense(dims, a.z_sensor)]


def _image_decoder(a: ArchConfig) -> list:
    grid = (a.decoder_channels, a.image_size, a.image_size)
    return [L.dense(a.z, grid), L.activation(grid, "relu"),
            L.conv2d(grid, 1, a.kernel_size, padding="same")]


def _sensor_decoder(a: ArchConfig) -> list:
    grid = (a.decoder_channels, a.sensor_dims)
    return [L.dense(a.z, grid), L.activation(grid, "relu"),
            L.conv1d(grid, 1, a.kernel_size, padding="same")]


def compute_layers(a: ArchConfig) -> list:
    hidden = a.compute_hidden or 2 * a.z
    widths = [a.z] + [hidden] * (a.compute_layers - 1) + [a.z]
    layers = []
    for i in range(a.compute_layers):
        layers.append(L.dense(widths[i], widths[i + 1]))
        if i < a.compute_layers - 1:
            layers.append(L.activation(widths[i + 1], "relu"))
    return layers


def build_autoencoder(arch: Optional[ArchConfig] = None, seed: int = 0) -> MultimodalAE:
    a = arch or ArchConfig()
    enc = {
        "image": init_network(_image_encoder(a), "he", seed * 10 + 1, name="encoder.image"),
        "sensor": init_network(_sensor_encoder(a), "he", seed * 10 + 2, name="encoder.sensor"),
    }
    dec = {
        "image": init_network(_image_decoder(a), "he", seed * 10 + 3, name="decoder.image"),
        "sensor": init_network(_sensor_decoder(a), "he", seed * 10 + 4, name="decoder.sensor"),
    }
    return MultimodalAE(enc, dec, {"image": a.z_image, "sensor": a.z_sensor}, False, a)


def build_compute_block(arch: Optional[ArchConfig] = None, seed: int = 0,
                        init: Optional[str] = None) -> ComputeBlock:
    a = arch or ArchConfig()
    return ComputeBlock(init_network(compute_layers(a), init or a.compute_init, seed * 10 + 5,
                                     name="compute"))


def build_detector(arch: Optional[ArchConfig] = None, seed: int = 0,
                   input_space: str = "pre_compute") -> DetectorHead:
    a = arch or ArchConfig()
    layers = [L.dense(a.z, a.detector_hidden), L.activation(a.detector_hidden, "relu"),
              L.dense(a.detector_hidden, len(FaultLabel))]
    return DetectorHead(init_network(layers, "he", seed * 10 + 6, name="detector"), input_space)


# ── evaluation paths ───────────────────────────────────────────────────

def encoder_inputs(images: np.ndarray, sensors: np.ndarray) -> dict:
    """Batch arrays shaped for the encoders: images (B,1,H,W), sensors (B,1,d)."""
    images = np.asarray(images, dtype=np.float64)
    sensors = np.asarray(sensors, dtype=np.float64)
    return {"image": images, "sensor": sensors.reshape(len(sensors), 1, -1)}


def encode(ae: MultimodalAE, images: np.ndarray, sensors: np.ndarray) -> np.ndarray:
    """Concatenated latent (B, z) for batch arrays images (B,1,H,W), sensors (B,d)."""
    x = encoder_inputs(images, sensors)
    return np.concatenate([predict(ae.encoders[m], x[m]) for m in MODALITIES], axis=1)


def decode(ae: MultimodalAE, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = np.atleast_2d(z)
    images = predict(ae.decoders["image"], z)
    sensors = predict(ae.decoders["sensor"], z).reshape(len(z), -1)
    return images, sensors


def ae_forward(ae: MultimodalAE, images: np.ndarray, sensors: np.ndarray) -> dict:
    """Encode/decode with tapes kept for the backward pass."""
    x = encoder_inputs(images, sensors)
    out = {"enc_tapes": {}, "dec_tapes": {}}
    parts = []
    for m in MODALITIES:
        zm, out["enc_tapes"][m] = forward(ae.encoders[m], x[m])
        parts.append(zm)
    z = np.concatenate(parts, axis=1)
    out["z"] = z
    out["image"], out["dec_tapes"]["image"] = forward(ae.decoders["image"], z)
    sen, out["dec_tapes"]["sensor"] = forward(ae.decoders["sensor"], z)
    out["sensor"] = sen.reshape(len(z), -1)
    return out


def correct(ae: MultimodalAE, compute: ComputeBlock, sample) -> CorrectionResult:
    """x_hat_i = D_i(C([E_i(x_i)])) for one sample.

    The pair holds the corrected latent (z_c) and the observed latent (z_f).
    """
    image, sensor = (sample.image, sample.sensor) if hasattr(sample, "image") else sample
    z = encode(ae, np.asarray(image)[None], np.asarray(sensor)[None])
    zc = predict(compute.net, z)
    images, sensors = decode(ae, zc)
    return CorrectionResult(images[0], sensors[0], LatentPair(zc[0], z[0]))


def correct_batch(ae: MultimodalAE, compute: ComputeBlock, images: np.ndarray,
                  sensors: np.ndarray) -> CorrectionResult:
    """Per-sample path over a batch, so results match ``correct`` bit for bit."""
    results = [correct(ae, compute, (i, s)) for i, s in zip(images, sensors)]
    return CorrectionResult(
        np.stack([r.image for r in results]), np.stack([r.sensor for r in results]),
        LatentPair(np.stack([r.pair.z_c for r in results]), np.stack([r.pair.z_f for r in results])),
    )


def class_scores(detector: DetectorHead, latent: np.ndarray) -> np.ndarray:
    return softmax(predict(detector.net, latent), axis=-1)


def detect(detector: DetectorHead, latent: np.ndarray):
    """(FaultLabel, scores) for one latent; arrays of both for a batch.

    Exact score ties go to the lowest class index.
    """
    latent = np.asarray(latent, dtype=np.float64)
    scores = class_scores(detector, latent)
    if latent.ndim == 1:
        return FaultLabel(int(np.argmax(scores))), scores
    return np.argmax(scores, axis=1), scores


def detector_features(detector: DetectorHead, compute: ComputeBlock, z: np.ndarray) -> np.ndarray:
    return predict(compute.net, z) if detector.input_space == "post_compute" else z


def route(ae: MultimodalAE, compute: ComputeBlock, detector: DetectorHead, sample):
    """Detector-gated correction: clean-classified samples bypass the compute block."""
    image, sensor = (sample.image, sample.sensor) if hasattr(sample, "image") else sample
    z = encode(ae, np.asarray(image)[None], np.asarray(sensor)[None])
    label, scores = detect(detector, detector_features(detector, compute, z)[0])
    if label == FaultLabel.CLEAN:
        images, sensors = decode(ae, z)
        return label, CorrectionResult(images[0], sensors[0], LatentPair(z[0], z[0])), scores
    return label, correct(ae, compute, (image, sensor)), scores
