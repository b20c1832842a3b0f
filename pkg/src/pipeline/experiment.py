"""End-to-end runs: data, Stage 1, Stage 2 and evaluation in one run directory,
plus the ablation sweeps built from child runs."""

import copy
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..faults.injector import FaultConfig
from ..synthdata import container
from ..synthdata.scene import generate, stack
from ..utils import archive
from .evaluation import EvalReport, evaluate
from .losses import LossWeights
from .model import (
    ArchConfig,
    ComputeBlock,
    DetectorHead,
    MultimodalAE,
    build_autoencoder,
    build_compute_block,
    build_detector,
)
from .optim import ClipConfig
from .training import Stage2Options, Stage2Result, pretrain_ae, reconstruction_mse, train_stage2

PIPELINE_SECTIONS = ("data", "faults", "architecture", "stage1", "stage2", "loss_weights", "clip", "eval")
TEST_SEED_OFFSET = 1_000_003


@dataclass
class RunSettings:
    seed: int
    threads: int
    data: dict
    faults: FaultConfig
    arch: ArchConfig
    stage1: dict
    stage2: Stage2Options
    detector_input: str
    weights: LossWeights
    clip: ClipConfig
    eval: dict

    @classmethod
    def from_config(cls, cfg: dict) -> "RunSettings":
        s2 = dict(cfg["stage2"])
        detector_input = s2.pop("detector_input", "pre_compute")
        return cls(
            seed=int(cfg["seed"]),
            threads=int(cfg.get("threads") or 1),
            data=dict(cfg["data"]),
            faults=FaultConfig.from_dict(cfg["faults"]),
            arch=ArchConfig.from_dict(cfg["architecture"]),
            stage1=dict(cfg["stage1"]),
            stage2=Stage2Options(seed=int(cfg["seed"]), **s2),
            detector_input=detector_input,
            weights=LossWeights(**cfg["loss_weights"]),
            clip=ClipConfig(**cfg["clip"]),
            eval=dict(cfg["eval"]),
        )


def build_data(rs: RunSettings) -> tuple[list, list]:
    d = rs.data
    kw = {"image_size": d["image_size"], "sensor_noise": d["sensor_noise"], "chunk": d["chunk"],
          "threads": rs.threads}
    train = generate(int(d["n_train"]), rs.seed, **kw)
    test = generate(int(d["n_test"]), rs.seed + TEST_SEED_OFFSET, **kw)
    return train, test


def _stage_done(run_dir: str, stage: str) -> bool:
    manifest = archive.load_manifest(run_dir) or {}
    return manifest.get("stages", {}).get(stage, {}).get("status") == "complete"


def _mark_stage(run_dir: str, stage: str, **fields):
    manifest = archive.load_manifest(run_dir) or {}
    stages = manifest.get("stages", {})
    stages[stage] = {"status": "complete", **fields}
    archive.update_manifest(run_dir, stages=stages)


def load_autoencoder(run_dir: str, arch: ArchConfig) -> MultimodalAE:
    ae = build_autoencoder(arch)
    for m in ae.encoders:
        ae.encoders[m] = archive.load_weights(run_dir, f"encoder.{m}")
        ae.decoders[m] = archive.load_weights(run_dir, f"decoder.{m}")
    ae.freeze()
    return ae


def load_trained(run_dir: str, rs: RunSettings) -> tuple:
    ae = load_autoencoder(run_dir, rs.arch)
    compute = ComputeBlock(archive.load_weights(run_dir, "compute"))
    detector = DetectorHead(archive.load_weights(run_dir, "detector"), rs.detector_input)
    return ae, compute, detector


def run_stage1(run_dir: str, rs: RunSettings, train: list, resume: bool = False,
               verbose: bool = True) -> MultimodalAE:
    if resume and _stage_done(run_dir, "stage1"):
        print("  - Stage 1 already complete, loading weights")
        return load_autoencoder(run_dir, rs.arch)

    ae = build_autoencoder(rs.arch, rs.seed)
    images, sensors = stack(train)
    start, history, opt_state = 0, [], None
    if resume:
        ckpt = archive.load_checkpoint(run_dir, "stage1", ae.networks())
        if ckpt:
            start, history, opt_state = ckpt["epoch"] + 1, ckpt["history"], ckpt["opt_state"]
            print(f"  - Resuming Stage 1 after epoch {start}")
    initial = (archive.read_json(run_dir, "stage1.json") or {}).get("initial_mse") if start else None
    if initial is None:
        initial = reconstruction_mse(ae, images, sensors)["total"]
        archive.write_json(run_dir, "stage1.json", {"initial_mse": initial})

    def checkpoint(epoch, loss, state):
        history.append(loss)
        archive.save_checkpoint(run_dir, "stage1", epoch, ae.networks(), state, history)

    s1 = rs.stage1
    pretrain_ae(ae, images, sensors, epochs=int(s1["epochs"]), batch=int(s1["batch"]),
                eta=float(s1["eta"]), optimizer=s1["optimizer"], seed=rs.seed, start_epoch=start,
                opt_state=opt_state, on_epoch=checkpoint, verbose=verbose)
    final = reconstruction_mse(ae, images, sensors)
    ae.freeze()
    archive.save_weights(run_dir, *ae.networks())
    archive.write_csv(run_dir, "stage1.csv", [{"epoch": i, "mse": v} for i, v in enumerate(history)])
    summary = {"initial_mse": initial, "final_mse": final["total"], "image_mse": final["image"],
               "sensor_mse": final["sensor"], "threshold": 0.1 * initial,
               "below_threshold": final["total"] < 0.1 * initial, "frozen_hash": ae.frozen_hash}
    archive.write_json(run_dir, "stage1.json", summary)
    _mark_stage(run_dir, "stage1", **summary)
    print(f"  - Stage 1 mse {initial:.5f} -> {final['total']:.5f}")
    return ae


METRIC_COLUMNS = ("epoch", "loss_compute", "L_rec", "camera_mse", "sensor_mse", "L_sim", "L_con",
                  "L_reg", "reg_encoder", "reg_compute", "detector_ce", "detector_acc",
                  "grad_scale_mean", "lipschitz_compute", "lipschitz_detector")


def _write_stage2_logs(run_dir: str, log: list):
    archive.write_csv(run_dir, "metrics.csv", [{k: e.get(k) for k in METRIC_COLUMNS} for e in log])
    archive.write_csv(run_dir, "lipschitz.csv", [
        {"epoch": e["epoch"], "compute": e["lipschitz_compute"], "detector": e["lipschitz_detector"]}
        for e in log])


def run_stage2(run_dir: str, rs: RunSettings, ae: MultimodalAE, train: list, resume: bool = False,
               verbose: bool = True) -> Stage2Result:
    compute = build_compute_block(rs.arch, rs.seed)
    detector = build_detector(rs.arch, rs.seed, rs.detector_input)
    if resume and _stage_done(run_dir, "stage2"):
        print("  - Stage 2 already complete, loading weights")
        _, compute, detector = load_trained(run_dir, rs)
        meta = archive.read_json(run_dir, os.path.join("checkpoints", "stage2.json")) or {}
        return Stage2Result(compute, detector, meta.get("history", []))

    start, history, opt_state = 0, [], None
    if resume:
        ckpt = archive.load_checkpoint(run_dir, "stage2", [compute.net, detector.net])
        if ckpt:
            start, history, opt_state = ckpt["epoch"] + 1, ckpt["history"], ckpt["opt_state"]
            print(f"  - Resuming Stage 2 after epoch {start}")

    def checkpoint(epoch, entry, state):
        history.append(entry)
        archive.save_checkpoint(run_dir, "stage2", epoch, [compute.net, detector.net], state, history)
        _write_stage2_logs(run_dir, history)

    result = train_stage2(ae, compute, detector, train, rs.faults, rs.weights, rs.clip, rs.stage2,
                          start_epoch=start, opt_state=opt_state, on_epoch=checkpoint, verbose=verbose)
    result.log = history
    _write_stage2_logs(run_dir, history)
    archive.save_weights(run_dir, compute.net, detector.net)
    last = history[-1] if history else {}
    _mark_stage(run_dir, "stage2", epochs=len(history),
                lipschitz_compute=last.get("lipschitz_compute"),
                lipschitz_detector=last.get("lipschitz_detector"))
    return result


def write_eval(run_dir: str, report: EvalReport):
    archive.write_csv(run_dir, "confusion.csv", report.confusion.to_frame().reset_index())
    archive.write_csv(run_dir, "scores.csv", report.scores.to_frame())
    archive.write_csv(run_dir, "reconstruction.csv", report.reconstruction)
    if report.topology is not None:
        archive.write_csv(run_dir, "topology.csv", report.topology)
        archive.write_csv(run_dir, "topology_hist.csv", report.histograms)
    np.savez(os.path.join(run_dir, "latents.npz"), **report.latents)
    archive.write_json(run_dir, "eval.json", report.summary())


def run_eval(run_dir: str, rs: RunSettings, ae, compute, detector, test: list,
             train: Optional[list] = None) -> EvalReport:
    ev = rs.eval
    report = evaluate(ae, compute, detector, test, rs.faults, m=rs.weights.m, seed=rs.seed,
                      theta_z=ev.get("theta_z"), lipschitz_pairs=int(ev["lipschitz_pairs"]),
                      train=train if ev.get("probe") else None, topology=bool(ev.get("topology", True)))
    write_eval(run_dir, report)
    s = report.summary()
    print(f"  - macro P/R/F1 {s['macro_precision']:.3f}/{s['macro_recall']:.3f}/{s['macro_f1']:.3f}")
    print(f"  - correction utility {s['utility'].get('overall', 0.0):.3f}")
    print(f"  - Lip(C)={s['lipschitz_compute']:.3f} Lip(M)={s['lipschitz_detector']:.3f}")
    return report


def run_pipeline(cfg: dict, run_dir: str, resume: bool = False, verbose: bool = True,
                 pretrained: Optional[MultimodalAE] = None, data: Optional[tuple] = None) -> dict:
    """Full run; returns the evaluation summary. NumericAbort propagates to the caller."""
    rs = RunSettings.from_config(cfg)
    archive.start_run(run_dir, "pipeline", cfg, resume=resume)

    print("\n[Data]")
    train, test = data or build_data(rs)
    if not os.path.exists(os.path.join(run_dir, "train.mmds")):
        container.save(train, os.path.join(run_dir, "train.mmds"), seed=rs.seed)
        container.save(test, os.path.join(run_dir, "test.mmds"), seed=rs.seed + TEST_SEED_OFFSET)
    print(f"  - {len(train)} train / {len(test)} test samples")

    print("\n[Stage 1] clean-data autoencoder")
    if pretrained is not None:
        ae = pretrained
        archive.save_weights(run_dir, *ae.networks())
        _mark_stage(run_dir, "stage1", shared=True, frozen_hash=ae.frozen_hash)
        print("  - Using shared pretrained autoencoder")
    else:
        ae = run_stage1(run_dir, rs, train, resume, verbose)

    print("\n[Stage 2] compute block + detector")
    result = run_stage2(run_dir, rs, ae, train, resume, verbose)

    print("\n[Eval]")
    report = run_eval(run_dir, rs, ae, result.compute, result.detector, test, train)
    summary = report.summary()
    archive.finish_run(run_dir, summary=summary)
    return summary


# ── ablations ──────────────────────────────────────────────────────────

def ablation_children(cfg: dict, ratios: list, seeds: list, sweep: bool = True,
                      regularizer: bool = True) -> list:
    """[(child name, kind, params, child cfg)], seeds also reseed the fault stream."""
    children = []

    def child(seed: int) -> dict:
        c = copy.deepcopy(cfg)
        c["seed"] = seed
        c["faults"]["rng_seed"] = seed
        return c

    if sweep:
        for ratio in ratios:
            for seed in seeds:
                c = child(seed)
                c["loss_weights"]["lambda_sim"] = float(ratio) * c["loss_weights"]["lambda_con"]
                children.append((f"ratio-{ratio:g}-seed-{seed}", "ratio",
                                 {"ratio": float(ratio), "seed": seed}, c))
    if regularizer:
        for on in (True, False):
            for seed in seeds:
                c = child(seed)
                c["stage2"]["regularize"] = on
                children.append((f"reg-{'on' if on else 'off'}-seed-{seed}", "regularizer",
                                 {"regularize": on, "seed": seed}, c))
    return children


def _mean(rows: list, key: str, **match) -> float:
    vals = [r[key] for r in rows if all(r.get(k) == v for k, v in match.items())]
    return float(np.mean(vals)) if vals else float("nan")


def ablation_checks(rows: list, ratios: list) -> dict:
    checks = {}
    ratio_rows = [r for r in rows if r["kind"] == "ratio"]
    if ratio_rows:
        lo, hi = min(ratios), max(ratios)
        f1_lo, f1_hi = _mean(ratio_rows, "macro_f1", ratio=lo), _mean(ratio_rows, "macro_f1", ratio=hi)
        sim_lo = _mean(ratio_rows, "similarity", ratio=lo)
        sim_hi = _mean(ratio_rows, "similarity", ratio=hi)
        checks["f1_degrades_with_similarity_weight"] = {
            "low_ratio": f1_lo, "high_ratio": f1_hi, "pass": bool(f1_lo > f1_hi)}
        checks["similarity_falls_with_similarity_weight"] = {
            "low_ratio": sim_lo, "high_ratio": sim_hi, "pass": bool(sim_hi < sim_lo)}
    reg_rows = [r for r in rows if r["kind"] == "regularizer"]
    if reg_rows:
        on = _mean(reg_rows, "combined_corrected", regularize=True)
        off = _mean(reg_rows, "combined_corrected", regularize=False)
        checks["regularizer_helps_reconstruction"] = {"on": on, "off": off, "pass": bool(on <= off)}
    return checks


def run_ablation(cfg: dict, out_dir: str, ratios: list, seeds: list, sweep: bool = True,
                 regularizer: bool = True, threads: int = 1, resume: bool = False) -> dict:
    """Stage 1 runs once per seed; every child shares that frozen autoencoder."""
    archive.start_run(out_dir, "ablate", cfg, resume=resume)
    shared = {}
    for seed in seeds:
        c = copy.deepcopy(cfg)
        c["seed"] = seed
        rs = RunSettings.from_config(c)
        seed_dir = os.path.join(out_dir, f"stage1-seed-{seed}")
        print(f"\n=== Shared Stage 1 (seed {seed}) ===")
        archive.start_run(seed_dir, "stage1", c, resume=resume)
        data = build_data(rs)
        ae = run_stage1(seed_dir, rs, data[0], resume, verbose=False)
        archive.finish_run(seed_dir)
        shared[seed] = (ae, data)

    children = ablation_children(cfg, ratios, seeds, sweep, regularizer)

    def run_child(item):
        name, kind, params, c = item
        ae, data = shared[params["seed"]]
        print(f"\n=== Ablation child {name} ===")
        summary = run_pipeline(c, os.path.join(out_dir, name), resume, verbose=False,
                               pretrained=ae, data=data)
        return {"child": name, "kind": kind, "ratio": params.get("ratio"),
                "regularize": params.get("regularize"), "seed": params["seed"],
                "macro_f1": summary["macro_f1"], "similarity": summary["similarity"],
                "combined_corrected": summary.get("combined_corrected"),
                "lipschitz_compute": summary["lipschitz_compute"],
                "lipschitz_detector": summary["lipschitz_detector"]}

    if threads <= 1:
        rows = [run_child(item) for item in children]
    else:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            rows = list(executor.map(run_child, children))

    checks = ablation_checks(rows, ratios)
    report = {"children": len(rows), "checks": checks,
              "pass": all(v["pass"] for v in checks.values())}
    archive.write_csv(out_dir, "ablation.csv", rows)
    archive.write_json(out_dir, "ablation.json", report)
    archive.finish_run(out_dir, status="complete" if report["pass"] else "failed", summary=report)
    return report
