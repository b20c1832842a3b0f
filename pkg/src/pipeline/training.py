"""Two-stage training.

Stage 1 fits encoders and decoders on clean data. Stage 2 freezes them and
trains the compute block and the detector on a fault stream with the
contrastive / similarity / reconstruction / Jacobian objective under the
selective gradient step.
"""

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..faults.injector import FaultConfig, FaultLabel, fault_stream, modality_stats
from ..lipschitz.bounds import PairSampler, empirical_lipschitz
from ..nn.network import backward, forward, named_params, predict
from ..nn.rng import make_rng
from ..synthdata.scene import stack
from .losses import (
    LossWeights,
    contrastive_loss,
    cross_entropy,
    mse,
    reg_loss,
    similarity_loss,
)
from .model import (
    MODALITIES,
    ComputeBlock,
    DetectorHead,
    MultimodalAE,
    ae_forward,
    encode,
    encoder_inputs,
)
from .optim import ClipConfig, make_optimizer, selective_step, unclipped

CONTRASTIVE_SPACES = ("post_compute", "pre_compute")


class NumericAbort(RuntimeError):
    def __init__(self, message: str, stage: str, last_finite_step: int):
        super().__init__(f"{stage}: {message} (last finite step {last_finite_step})")
        self.stage = stage
        self.last_finite_step = last_finite_step


@dataclass
class Stage2Options:
    epochs: int = 50
    batch: int = 16
    seed: int = 0
    optimizer: str = "momentum"
    momentum: float = 0.9
    regularize: bool = True
    contrastive_space: str = "post_compute"
    probes: int = 4
    lipschitz_pairs: int = 2000
    probe_samples: int = 256

    def __post_init__(self):
        if self.contrastive_space not in CONTRASTIVE_SPACES:
            raise ValueError(f"contrastive_space must be one of {CONTRASTIVE_SPACES}")


@dataclass
class Stage2Result:
    compute: ComputeBlock
    detector: DetectorHead
    log: list = field(default_factory=list)
    optimizer_state: Optional[dict] = None


def _batches(n: int, batch: int, rng: np.random.Generator) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def _params_of(*nets) -> dict:
    out = {}
    for net in nets:
        out.update(named_params(net))
    return out


def reconstruction_mse(ae: MultimodalAE, images: np.ndarray, sensors: np.ndarray,
                       chunk: int = 512) -> dict:
    """Per-modality mean squared reconstruction error of the plain autoencoder."""
    err = {"image": 0.0, "sensor": 0.0}
    for a in range(0, len(images), chunk):
        out = ae_forward(ae, images[a:a + chunk], sensors[a:a + chunk])
        err["image"] += float(np.sum((out["image"] - images[a:a + chunk]) ** 2))
        err["sensor"] += float(np.sum((out["sensor"] - sensors[a:a + chunk]) ** 2))
    err["image"] /= images.size
    err["sensor"] /= sensors.size
    err["total"] = err["image"] + err["sensor"]
    return err


# ── stage 1 ────────────────────────────────────────────────────────────

def pretrain_ae(ae: MultimodalAE, images: np.ndarray, sensors: np.ndarray, epochs: int = 50,
                batch: int = 16, eta: float = 1e-3, optimizer: str = "adam", seed: int = 0,
                start_epoch: int = 0, opt_state: Optional[dict] = None,
                on_epoch: Optional[Callable] = None, verbose: bool = True):
    """Fit the autoencoder on clean data. Returns (ae, curve) with one mean MSE per epoch."""
    if ae.frozen:
        raise ValueError("pretrain_ae needs an unfrozen autoencoder")
    images = np.asarray(images, dtype=np.float64)
    sensors = np.asarray(sensors, dtype=np.float64)
    params = _params_of(*ae.networks())
    opt = make_optimizer(optimizer, eta)
    if opt_state:
        opt.load_state_dict(opt_state)
    curve, step = [], 0
    for epoch in range(start_epoch, epochs):
        started = time.time()
        losses = []
        for idx in _batches(len(images), batch, make_rng(seed, 101, epoch)):
            out = ae_forward(ae, images[idx], sensors[idx])
            l_img, g_img = mse(out["image"], images[idx])
            l_sen, g_sen = mse(out["sensor"], sensors[idx])
            loss = l_img + l_sen
            if not np.isfinite(loss):
                raise NumericAbort("non-finite reconstruction loss", "stage1", step - 1)
            grads = {}
            gz = 0.0
            for m, g in (("image", g_img), ("sensor", g_sen.reshape(len(idx), 1, -1))):
                b = backward(ae.decoders[m], out["dec_tapes"][m], g)
                grads.update(b.by_path(ae.decoders[m]))
                gz = gz + b.input_grad
            split = ae.split(gz)
            for m in MODALITIES:
                b = backward(ae.encoders[m], out["enc_tapes"][m], split[m])
                grads.update(b.by_path(ae.encoders[m]))
            opt.step(params, grads)
            for net in ae.networks():
                net.bump()
            losses.append(loss)
            step += 1
        curve.append(float(np.mean(losses)))
        if verbose:
            print(f"  - [stage1] epoch {epoch + 1}/{epochs}: mse={curve[-1]:.6f} "
                  f"({time.time() - started:.1f}s)")
        if on_epoch:
            on_epoch(epoch, curve[-1], opt.state_dict())
    return ae, curve


# ── stage 2 ────────────────────────────────────────────────────────────

@dataclass
class _EpochData:
    z_clean: np.ndarray
    z_fail: np.ndarray
    corrupted: dict
    deltas: dict
    labels: np.ndarray


def _epoch_data(ae: MultimodalAE, dataset: list, fault_cfg: FaultConfig, epoch: int,
                stats: dict, z_clean: np.ndarray, clean: dict) -> _EpochData:
    events = list(fault_stream(dataset, fault_cfg, epoch=epoch, stats=stats))
    bad_images, bad_sensors = stack([c for _, c, _ in events])
    labels = np.array([int(lbl) for _, _, lbl in events], dtype=np.int64)
    return _EpochData(
        z_clean=z_clean,
        z_fail=encode(ae, bad_images, bad_sensors),
        corrupted={"image": bad_images, "sensor": bad_sensors},
        deltas={"image": bad_images - clean["image"], "sensor": bad_sensors - clean["sensor"]},
        labels=labels,
    )


def _scatter(mask: np.ndarray, part: np.ndarray, shape: tuple) -> np.ndarray:
    full = np.zeros(shape)
    full[mask] = part
    return full


def stage2_step(ae: MultimodalAE, compute: ComputeBlock, detector: DetectorHead, zc: np.ndarray,
                zf: np.ndarray, targets: dict, labels: np.ndarray, weights: LossWeights,
                opts: Stage2Options, rng: np.random.Generator) -> tuple[dict, dict]:
    """Loss terms and gradients (keyed by parameter path) for one batch."""
    B = len(zc)
    out, tape_c = forward(compute.net, np.concatenate([zc, zf]))
    cc, cf = out[:B], out[B:]

    # reconstruction of the clean targets through the frozen decoders
    rec_img, t_img = forward(ae.decoders["image"], cf)
    rec_sen, t_sen = forward(ae.decoders["sensor"], cf)
    l_img, g_img = mse(rec_img, targets["image"])
    l_sen, g_sen = mse(rec_sen.reshape(B, -1), targets["sensor"])
    g_rec = (backward(ae.decoders["image"], t_img, g_img).input_grad
             + backward(ae.decoders["sensor"], t_sen, g_sen.reshape(B, 1, -1)).input_grad)

    l_sim, g_sim_f, g_sim_c = similarity_loss(cf, cc)

    faulted = labels != int(FaultLabel.CLEAN)
    l_con, g_con_c, g_con_f = 0.0, np.zeros_like(cc), np.zeros_like(cf)
    if np.any(faulted):
        if opts.contrastive_space == "post_compute":
            l_con, gc, gf = contrastive_loss(cc[faulted], cf[faulted], weights.m)
            g_con_c = _scatter(faulted, gc, cc.shape)
            g_con_f = _scatter(faulted, gf, cf.shape)
        else:
            l_con, _, _ = contrastive_loss(zc[faulted], zf[faulted], weights.m)

    up_c = weights.lambda_sim * g_sim_c + weights.lambda_con * g_con_c
    up_f = weights.lambda_rec * g_rec + weights.lambda_sim * g_sim_f + weights.lambda_con * g_con_f
    grads = backward(compute.net, tape_c, np.concatenate([up_c, up_f])).by_path(compute.net)

    l_reg = 0.0
    if opts.regularize and weights.lambda_reg_compute > 0:
        # compute term only; the encoders are frozen in stage 2
        reg = reg_loss({}, compute.net, {}, {}, zc, weights, opts.probes, rng, grad=True)
        l_reg = reg.compute
        for i, p in enumerate(reg.compute_grads):
            for k, g in p.items():
                grads[f"{compute.net.name}.{i}.{k}"] += g

    feats = cf if detector.input_space == "post_compute" else zf
    logits, tape_d = forward(detector.net, feats)
    ce, g_ce = cross_entropy(logits, labels)
    grads.update(backward(detector.net, tape_d, g_ce).by_path(detector.net))

    terms = {
        "L_rec": l_img + l_sen,
        "camera_mse": l_img,
        "sensor_mse": l_sen,
        "L_sim": l_sim,
        "L_con": l_con,
        "reg_compute": l_reg,
        "detector_ce": ce,
        "detector_acc": float(np.mean(np.argmax(logits, axis=1) == labels)),
    }
    terms["loss_compute"] = (weights.lambda_rec * terms["L_rec"] + weights.lambda_con * l_con
                             + weights.lambda_sim * l_sim
                             + (weights.lambda_reg_compute * l_reg if opts.regularize else 0.0))
    return terms, grads


def trajectory_lipschitz(compute: ComputeBlock, detector: DetectorHead, zc: np.ndarray,
                         zf: np.ndarray, pairs: int, seed: int) -> dict:
    """Fault-direction Lipschitz estimates of the compute block and the detector."""
    keep = np.linalg.norm(zc - zf, axis=1) > 0
    if not np.any(keep):
        return {"lipschitz_compute": 0.0, "lipschitz_detector": 0.0}
    zc, zf = zc[keep], zf[keep]
    lc = empirical_lipschitz(compute.net, PairSampler(zc, zf), pairs, seed, tight_fraction=0.0)
    if detector.input_space == "post_compute":
        xc, xf = predict(compute.net, zc), predict(compute.net, zf)
    else:
        xc, xf = zc, zf
    keep = np.linalg.norm(xc - xf, axis=1) > 0
    ld = (empirical_lipschitz(detector.net, PairSampler(xc[keep], xf[keep]), pairs, seed,
                              tight_fraction=0.0) if np.any(keep) else 0.0)
    return {"lipschitz_compute": lc, "lipschitz_detector": ld}


def train_stage2(ae: MultimodalAE, compute: ComputeBlock, detector: DetectorHead, dataset: list,
                 fault_cfg: FaultConfig, weights: LossWeights, clip: ClipConfig,
                 opts: Optional[Stage2Options] = None, start_epoch: int = 0,
                 opt_state: Optional[dict] = None, on_epoch: Optional[Callable] = None,
                 verbose: bool = True) -> Stage2Result:
    """Train compute block and detector against a frozen autoencoder.

    Corruptions are redrawn every epoch from the stream keyed
    (fault seed, epoch, sample index).
    """
    opts = opts or Stage2Options()
    if not ae.frozen:
        raise ValueError("train_stage2 needs a frozen autoencoder")
    if ae.param_hash() != ae.frozen_hash:
        raise RuntimeError("frozen autoencoder parameters changed since freeze()")

    step_clip = clip if opts.regularize else unclipped(clip)
    opt = make_optimizer(opts.optimizer, clip.eta, opts.momentum)
    if opt_state:
        opt.load_state_dict(opt_state)
    params = _params_of(compute.net, detector.net)

    images, sensors = stack(dataset)
    clean = {"image": images, "sensor": sensors}
    stats = modality_stats(dataset)
    z_clean = encode(ae, images, sensors)
    log, step = [], 0

    for epoch in range(start_epoch, opts.epochs):
        started = time.time()
        data = _epoch_data(ae, dataset, fault_cfg, epoch, stats, z_clean, clean)
        rng = make_rng(opts.seed, 202, epoch)
        sums, scales, n_batches = {}, [], 0
        for idx in _batches(len(dataset), opts.batch, rng):
            targets = {"image": images[idx], "sensor": sensors[idx]}
            terms, grads = stage2_step(ae, compute, detector, z_clean[idx], data.z_fail[idx],
                                       targets, data.labels[idx], weights, opts, rng)
            if not all(np.isfinite(v) for v in terms.values()):
                raise NumericAbort("non-finite stage-2 loss", "stage2", step - 1)
            _, applied = selective_step(params, grads, step_clip, opt)
            compute.net.bump()
            detector.net.bump()
            scales.append(applied.scale)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
            step += 1

        if ae.param_hash() != ae.frozen_hash:
            raise RuntimeError(f"frozen autoencoder parameters changed during epoch {epoch}")

        entry = {"epoch": epoch}
        entry.update({k: v / n_batches for k, v in sums.items()})
        entry["grad_scale_mean"] = float(np.mean(scales))

        faulted = np.flatnonzero(data.labels != int(FaultLabel.CLEAN))[:opts.probe_samples]
        reg_encoder = 0.0
        if opts.regularize and faulted.size:
            x = encoder_inputs(images[faulted], sensors[faulted])
            d = encoder_inputs(data.deltas["image"][faulted], data.deltas["sensor"][faulted])
            reg_encoder = reg_loss(ae.encoders, compute.net, x, d, z_clean[faulted], weights,
                                   opts.probes, make_rng(opts.seed, 303, epoch), grad=False).encoder
        entry["reg_encoder"] = reg_encoder
        entry["L_reg"] = (weights.lambda_reg_encoder * reg_encoder
                          + weights.lambda_reg_compute * entry.get("reg_compute", 0.0)
                          if opts.regularize else 0.0)
        entry.update(trajectory_lipschitz(compute, detector, z_clean[faulted],
                                          data.z_fail[faulted], opts.lipschitz_pairs,
                                          opts.seed + epoch))
        log.append(entry)
        if verbose:
            print(f"  - [stage2] epoch {epoch + 1}/{opts.epochs}: L_rec={entry['L_rec']:.5f} "
                  f"L_sim={entry['L_sim']:.5f} L_con={entry['L_con']:.4f} "
                  f"ce={entry['detector_ce']:.4f} acc={entry['detector_acc']:.3f} "
                  f"Lip(C)={entry['lipschitz_compute']:.3f} Lip(M)={entry['lipschitz_detector']:.3f} "
                  f"({time.time() - started:.1f}s)")
        if on_epoch:
            on_epoch(epoch, entry, opt.state_dict())

    return Stage2Result(compute, detector, log, opt.state_dict())
