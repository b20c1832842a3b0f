"""Held-out evaluation of a trained pipeline.

Detection (confusion matrix, macro scores), correction (reconstruction
errors and per-sample utility), Lipschitz of corrector and detector on
held-out fault pairs, margin consistency and the latent error topology
experiment.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from ..faults.injector import FaultConfig, FaultLabel, fault_stream, make_fault, modality_stats
from ..lipschitz.bounds import margin_consistency
from ..metrics.detection import ConfusionMatrix, DetectionScores, macro_scores
from ..metrics.reconstruction import per_sample_mse, reconstruction_errors
from ..metrics.topology import latent_topology, topology_frame
from ..nn.network import Network, predict
from ..nn.rng import make_rng, unit_vectors
from ..perturb.spec import PerturbationSpec
from ..synthdata.probe import linear_probe_r2
from ..synthdata.scene import positions, stack
from .losses import similarity_loss
from .model import (
    ComputeBlock,
    DetectorHead,
    MultimodalAE,
    correct_batch,
    decode,
    detect,
    detector_features,
    encode,
    encoder_inputs,
)
from .training import trajectory_lipschitz

# fault-stream epoch reserved for held-out evaluation draws
EVAL_EPOCH = 1_000_000


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    scores: DetectionScores
    reconstruction: pd.DataFrame
    utility: dict
    lipschitz: dict
    margin: dict
    similarity: float
    topology: Optional[pd.DataFrame] = None
    histograms: Optional[pd.DataFrame] = None
    probe_r2: Optional[dict] = None
    latents: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        out = {
            "macro_precision": self.scores.macro_precision,
            "macro_recall": self.scores.macro_recall,
            "macro_f1": self.scores.macro_f1,
            "utility": self.utility,
            "similarity": self.similarity,
            "margin": self.margin,
        }
        out.update(self.lipschitz)
        rows = self.reconstruction[self.reconstruction["subset"] == "faulted"]
        for _, row in rows.iterrows():
            out[f"combined_{row['source']}"] = float(row["combined"])
        if self.topology is not None:
            out["topology"] = {r["branch"]: r["sparsity"] for _, r in self.topology.iterrows()}
        if self.probe_r2 is not None:
            out["probe_r2"] = self.probe_r2
        return out


def _conv_prefix(net: Network, conv_layer: int = 0) -> Network:
    """Encoder cut after its ``conv_layer``-th convolution, before the activation."""
    convs = [i for i, spec in enumerate(net.layers) if spec.is_conv]
    if not 0 <= conv_layer < len(convs):
        raise ValueError(f"{net.name} has {len(convs)} conv layers, asked for {conv_layer}")
    i = convs[conv_layer]
    return Network(net.layers[:i + 1], net.params[:i + 1], net.rng_seed,
                   f"{net.name}.conv{conv_layer}")


def branch_features(ae: MultimodalAE, images: np.ndarray, sensors: np.ndarray,
                    conv_layer: int = 0) -> tuple:
    """(features, split): image conv pre-activations followed by the sensor dense latent.

    Both branches are read at the output of a linear layer, so a zero entry
    in a feature difference means the fault did not reach that unit.
    """
    x = encoder_inputs(images, sensors)
    conv = predict(_conv_prefix(ae.encoders["image"], conv_layer), x["image"])
    conv = conv.reshape(len(images), -1)
    dense = predict(ae.encoders["sensor"], x["sensor"])
    split = {"conv": np.arange(conv.shape[1]),
             "dense": np.arange(conv.shape[1], conv.shape[1] + dense.shape[1])}
    return np.concatenate([conv, dense], axis=1), split


def energy_matched_fault(x: np.ndarray, energy: float, rng: np.random.Generator,
                         modality: str) -> PerturbationSpec:
    """Global additive perturbation of ``x`` with ||delta|| equal to ``energy``."""
    d = np.asarray(x).size
    delta = energy * unit_vectors(rng, 1, d)[0]
    return PerturbationSpec.additive(np.arange(d), delta, size=d, modality=modality,
                                     fault="energy_matched_noise")


def topology_experiment(ae: MultimodalAE, dataset: list, cfg: FaultConfig, seed: int = 0,
                        theta_z=None, stats: Optional[dict] = None, conv_layer: int = 0) -> dict:
    """Local image blocks against global noise of the same input energy.

    Returns {"conv": conv features under image blocks,
             "conv_global": conv features under image-wide noise,
             "dense": sensor latent under sensor-wide noise}.
    """
    stats = stats if stats is not None else modality_stats(dataset)
    images, sensors = stack(dataset)
    bad_images, noisy_images, bad_sensors = images.copy(), images.copy(), sensors.copy()
    for i, s in enumerate(dataset):
        rng = make_rng(seed, 404, i)
        spec = make_fault(s.image, "image", "block_occlusion", cfg, rng, stats)
        bad_images[i] = spec.apply(s.image)
        energy = float(np.linalg.norm(bad_images[i] - images[i]))
        noisy_images[i] = energy_matched_fault(s.image, energy, rng, "image").apply(s.image)
        bad_sensors[i] = energy_matched_fault(s.sensor, energy, rng, "sensor").apply(s.sensor)

    clean, split = branch_features(ae, images, sensors, conv_layer)
    cases = {
        "conv": (bad_images, sensors),
        "conv_global": (noisy_images, sensors),
        "dense": (images, bad_sensors),
    }
    out = {}
    for name, (imgs, sens) in cases.items():
        idx = split["dense" if name == "dense" else "conv"]
        fault, _ = branch_features(ae, imgs, sens, conv_layer)
        out[name] = latent_topology(clean[:, idx], fault[:, idx], {name: np.arange(len(idx))},
                                    theta_z)[name]
    return out


def _reconstruction_rows(truth: tuple, sources: dict, labels: np.ndarray) -> pd.DataFrame:
    subsets = {"all": np.ones(len(labels), dtype=bool), "faulted": labels != int(FaultLabel.CLEAN)}
    subsets.update({lbl.key: labels == int(lbl) for lbl in FaultLabel})
    rows = []
    for name, (images, sensors) in sources.items():
        for subset, mask in subsets.items():
            if not np.any(mask):
                continue
            err = reconstruction_errors((truth[0][mask], truth[1][mask]), (images[mask], sensors[mask]))
            rows.append({"source": name, "subset": subset, "samples": int(mask.sum()), **err.to_dict()})
    return pd.DataFrame(rows)


def correction_utility(truth: tuple, corrupted: tuple, corrected: tuple, labels: np.ndarray) -> dict:
    """Fraction of faulted samples whose corrected modality beats the corrupted one."""
    out, wins_all, n_all = {}, 0, 0
    for lbl, idx in ((FaultLabel.SENSOR_FAULT, 1), (FaultLabel.CAMERA_FAULT, 0)):
        mask = labels == int(lbl)
        if not np.any(mask):
            continue
        before = per_sample_mse(corrupted[idx][mask], truth[idx][mask])
        after = per_sample_mse(corrected[idx][mask], truth[idx][mask])
        wins = int(np.sum(after < before))
        out[lbl.key] = wins / int(mask.sum())
        wins_all += wins
        n_all += int(mask.sum())
    out["overall"] = wins_all / n_all if n_all else 0.0
    return out


def _input_change_norms(clean: tuple, corrupted: tuple) -> np.ndarray:
    d_img = (corrupted[0] - clean[0]).reshape(len(clean[0]), -1)
    d_sen = corrupted[1] - clean[1]
    return np.sqrt(np.sum(d_img ** 2, axis=1) + np.sum(d_sen ** 2, axis=1))


def evaluate(ae: MultimodalAE, compute: ComputeBlock, detector: DetectorHead, test: list,
             fault_cfg: FaultConfig, m: float = 0.5, seed: int = 0, theta_z=None,
             lipschitz_pairs: int = 2000, train: Optional[list] = None,
             topology: bool = True) -> EvalReport:
    stats = modality_stats(test)
    events = list(fault_stream(test, fault_cfg, epoch=EVAL_EPOCH, stats=stats))
    images, sensors = stack(test)
    bad_images, bad_sensors = stack([c for _, c, _ in events])
    labels = np.array([int(lbl) for _, _, lbl in events], dtype=np.int64)

    z_clean = encode(ae, images, sensors)
    z_fail = encode(ae, bad_images, bad_sensors)
    c_clean = predict(compute.net, z_clean)
    c_fail = predict(compute.net, z_fail)

    predicted, _ = detect(detector, detector_features(detector, compute, z_fail))
    cm = ConfusionMatrix.from_labels(labels, predicted)

    corrected = correct_batch(ae, compute, bad_images, bad_sensors)
    truth = (images, sensors)
    sources = {
        "corrupted": (bad_images, bad_sensors),
        "autoencoder": decode(ae, z_fail),
        "corrected": (corrected.image, corrected.sensor),
    }
    faulted = labels != int(FaultLabel.CLEAN)
    if np.any(faulted):
        sim, _, _ = similarity_loss(c_fail[faulted], c_clean[faulted])
        margin = margin_consistency(c_clean[faulted], c_fail[faulted],
                                    _input_change_norms((images[faulted], sensors[faulted]),
                                                        (bad_images[faulted], bad_sensors[faulted])), m)
        margin["pre_compute_above_margin_fraction"] = float(np.mean(
            np.linalg.norm(z_clean[faulted] - z_fail[faulted], axis=1) >= m))
        lip = trajectory_lipschitz(compute, detector, z_clean[faulted], z_fail[faulted],
                                   lipschitz_pairs, seed)
    else:
        sim, margin = 0.0, {}
        lip = {"lipschitz_compute": 0.0, "lipschitz_detector": 0.0}

    report = EvalReport(
        confusion=cm,
        scores=macro_scores(cm),
        reconstruction=_reconstruction_rows(truth, sources, labels),
        utility=correction_utility(truth, sources["corrupted"], sources["corrected"], labels),
        lipschitz=lip,
        margin=margin,
        similarity=sim,
        latents={"z_clean": z_clean, "z_fault": z_fail, "c_clean": c_clean, "c_fault": c_fail,
                 "labels": labels, "positions": positions(test)},
    )
    if topology:
        profiles = topology_experiment(ae, test, fault_cfg, seed, theta_z, stats)
        report.topology = topology_frame(profiles, seed=seed)
        report.histograms = pd.concat([p.histogram_frame() for p in profiles.values()],
                                      ignore_index=True)
    if train:
        report.probe_r2 = probe_decodability(ae, train, test)
    return report


def probe_decodability(ae: MultimodalAE, train: list, test: list) -> dict:
    """Held-out R^2 of a linear probe from each modality's latent to the blob position."""
    out = {}
    tr_z = ae.split(encode(ae, *stack(train)))
    te_z = ae.split(encode(ae, *stack(test)))
    for modality in ("image", "sensor"):
        out[modality] = linear_probe_r2(tr_z[modality], positions(train),
                                        te_z[modality], positions(test))
    return out
