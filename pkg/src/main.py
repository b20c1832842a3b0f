"""liplab: main entry point.

Commands:
    python -m src.main gen --n 5000 --seed 1 --out train.mmds
    python -m src.main inject --in train.mmds --cfg faults.json --out corrupted/
    python -m src.main verify-lemmas [--cfg cfg.json] [--out dir] [--threads N]
    python -m src.main lipschitz --net net.json [--cfg cfg.json] [--out report.json]
    python -m src.main train --stage {1,2} --data train.mmds --cfg run.json --out runs/<id>/ [--resume]
    python -m src.main eval --run runs/<id>/ [--data test.mmds] [--cfg run.json]
    python -m src.main ablate --cfg run.json --out runs/<id>/ [--only sweep|regularizer] [--resume]
    python -m src.main pipeline --cfg run.json --out runs/<id>/ [--resume] [--ablate]

Exit codes: 0 pass, 1 usage/config error, 2 scientific-check failure, 3 numeric abort.
"""

import os
import sys
from typing import Optional

import numpy as np

from .faults.injector import FaultConfig, fault_stream, modality_stats
from .lipschitz.bounds import lipschitz_report, noisy_bound_check
from .nn.rng import make_rng, unit_vectors
from .nn.serialization import load_network
from .perturb.suite import verify_lemmas
from .pipeline import experiment
from .pipeline.training import NumericAbort
from .synthdata import container
from .synthdata.scene import generate
from .utils import archive
from .utils.config import ConfigError, load_document, load_run_config, resolve_config

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(ValueError):
    pass


def _arg(name: str, default: Optional[str] = None, required: bool = False) -> Optional[str]:
    """Value following ``name`` in sys.argv."""
    if name in sys.argv:
        idx = sys.argv.index(name)
        if idx + 1 < len(sys.argv):
            return sys.argv[idx + 1]
        raise UsageError(f"{name} needs a value")
    if required:
        raise UsageError(f"missing required flag {name}")
    return default


def _int_arg(name: str, default: Optional[int] = None, required: bool = False) -> Optional[int]:
    raw = _arg(name, None, required)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{name} expects an integer, got '{raw}'")


def _config(sections: tuple, path: Optional[str] = None) -> dict:
    """Resolved run config: settings defaults < --cfg document < --seed/--threads flags."""
    cfg = load_run_config(path or _arg("--cfg"), sections)
    seed, threads = _int_arg("--seed"), _int_arg("--threads")
    if seed is not None:
        cfg["seed"] = seed
    if threads is not None:
        cfg["threads"] = threads
    return cfg


def cmd_gen():
    n = _int_arg("--n", required=True)
    out = _arg("--out", required=True)
    cfg = _config(("data",))
    seed = cfg["seed"]
    d = cfg["data"]
    print(f"=== Generate {n} samples (seed {seed}) ===")
    dataset = generate(n, seed, image_size=d["image_size"], sensor_noise=d["sensor_noise"],
                       chunk=d["chunk"], threads=cfg["threads"])
    container.save(dataset, out, seed=seed, meta={"data": d})
    print(f"  - Saved: {out}")


def cmd_inject():
    src = _arg("--in", required=True)
    out = _arg("--out", required=True)
    cfg = _config(("faults",))
    faults = FaultConfig.from_dict(cfg["faults"])
    dataset = container.load(src)
    print(f"=== Inject faults into {len(dataset)} samples ===")
    archive.start_run(out, "inject", cfg, inputs={"data": src})
    corrupted, records = [], []
    counts = {}
    for i, (_, bad, label, specs) in enumerate(fault_stream(dataset, faults, stats=modality_stats(dataset),
                                                            with_specs=True)):
        corrupted.append(bad)
        counts[label.key] = counts.get(label.key, 0) + 1
        records.append({"index": i, "label": label.key,
                        "image": specs["image"].to_dict(), "sensor": specs["sensor"].to_dict()})
    container.save(corrupted, os.path.join(out, "corrupted.mmds"), meta={"faults": faults.to_dict()})
    archive.write_json(out, "faults.json", records)
    archive.finish_run(out, summary={"counts": counts})
    for k, v in sorted(counts.items()):
        print(f"  - {k}: {v}")


def cmd_verify_lemmas():
    cfg = _config(("verify_lemmas",))
    out = archive.run_path(_arg("--out"), "verify-lemmas")
    print("=== Verify perturbation lemmas ===")
    report = verify_lemmas(seed=cfg["seed"], threads=cfg["threads"], **cfg["verify_lemmas"])
    archive.write_json(out, "report.json", report)
    print(f"  - Report: {os.path.join(out, 'report.json')}")
    if not report["pass"]:
        print(f"::error::failed checks: {', '.join(report['failed'])}")
        sys.exit(EXIT_CHECK)


def cmd_lipschitz():
    net = load_network(_arg("--net", required=True))
    cfg = _config(("lipschitz",))
    lc = cfg["lipschitz"]
    seed = cfg["seed"]
    print(f"=== Lipschitz report: {net.name} ===")
    report = lipschitz_report(net, noise_norm=lc["noise_norm"], pairs=lc["pairs"],
                              samples=lc["samples"], seed=seed)
    result = report.to_dict()
    violations = []
    if report.empirical_clean > report.clean_bound * (1.0 + 1e-9):
        violations.append("empirical estimate exceeds the clean bound")
    if report.smooth:
        rng = make_rng(seed, 31)
        dims = tuple(net.in_dims)
        x = rng.standard_normal(dims)
        delta = lc["noise_norm"] * unit_vectors(rng, 1, int(np.prod(dims)))[0].reshape(dims)
        lhs, rhs, holds = noisy_bound_check(net, x, delta, samples=lc["samples"], seed=seed,
                                            bound=report.clean_bound)
        result["noisy_check"] = {"lhs": lhs, "rhs": rhs, "holds": holds}
        if not holds:
            violations.append("noisy bound violated")
    result["violations"] = violations
    for k in ("clean_bound", "empirical_clean", "L_J_estimate", "noisy_effective"):
        print(f"  - {k}: {result.get(k)}")
    out = _arg("--out")
    if out:
        archive.write_json(os.path.dirname(os.path.abspath(out)), os.path.basename(out), result)
    if violations:
        print(f"::error::{'; '.join(violations)}")
        sys.exit(EXIT_CHECK)


def cmd_train():
    stage = _int_arg("--stage", required=True)
    if stage not in (1, 2):
        raise UsageError("--stage must be 1 or 2")
    data_path = _arg("--data", required=True)
    out = archive.run_path(_arg("--out"))
    cfg = _config(experiment.PIPELINE_SECTIONS)
    rs = experiment.RunSettings.from_config(cfg)
    train = container.load(data_path)
    resume = "--resume" in sys.argv or stage == 2
    archive.start_run(out, f"train-stage{stage}", cfg, inputs={"data": data_path}, resume=resume)
    print(f"=== Train stage {stage} ({len(train)} samples) → {out} ===")
    if stage == 1:
        experiment.run_stage1(out, rs, train, resume="--resume" in sys.argv)
    else:
        ae = experiment.load_autoencoder(_arg("--ae", out), rs.arch)
        experiment.run_stage2(out, rs, ae, train, resume="--resume" in sys.argv)
    archive.update_manifest(out, status="complete" if stage == 2 else "stage1_complete")


def cmd_eval():
    run_dir = _arg("--run", required=True)
    manifest = archive.load_manifest(run_dir)
    if _arg("--cfg"):
        cfg = _config(experiment.PIPELINE_SECTIONS)
    elif manifest and "config" in manifest:
        cfg = resolve_config(experiment.PIPELINE_SECTIONS,
                             {k: v for k, v in manifest["config"].items()})
    else:
        raise ConfigError(f"{run_dir} has no manifest; pass --cfg")
    rs = experiment.RunSettings.from_config(cfg)
    test_path = _arg("--data", os.path.join(run_dir, "test.mmds"))
    test = container.load(test_path)
    train_path = os.path.join(run_dir, "train.mmds")
    train = container.load(train_path) if os.path.exists(train_path) else None
    print(f"=== Evaluate {run_dir} on {len(test)} samples ===")
    ae, compute, detector = experiment.load_trained(run_dir, rs)
    experiment.run_eval(run_dir, rs, ae, compute, detector, test, train)


def _ablate(cfg: dict, out: str) -> dict:
    overrides = {"ablation": load_document(_arg("--ablation"))} if _arg("--ablation") else {}
    ab = resolve_config(("ablation",), overrides)["ablation"]
    only = _arg("--only")
    if only not in (None, "sweep", "regularizer"):
        raise UsageError("--only must be 'sweep' or 'regularizer'")
    sweep = ab["sweep"] and only in (None, "sweep")
    regularizer = ab["regularizer"] and only in (None, "regularizer")
    n = (len(ab["ratios"]) * len(ab["seeds"]) if sweep else 0) + (2 * len(ab["seeds"]) if regularizer else 0)
    print(f"=== Ablation: {n} child runs → {out} ===")
    report = experiment.run_ablation(cfg, out, ab["ratios"], ab["seeds"], sweep, regularizer,
                                     threads=cfg["threads"], resume="--resume" in sys.argv)
    for name, check in report["checks"].items():
        print(f"  - {name}: {'ok' if check['pass'] else 'FAIL'}")
    return report


def cmd_ablate():
    cfg = _config(experiment.PIPELINE_SECTIONS)
    report = _ablate(cfg, archive.run_path(_arg("--out"), "ablate"))
    if not report["pass"]:
        sys.exit(EXIT_CHECK)


def cmd_pipeline():
    cfg = _config(experiment.PIPELINE_SECTIONS)
    out = archive.run_path(_arg("--out"))
    if "--ablate" in sys.argv:
        report = _ablate(cfg, out)
        if not report["pass"]:
            sys.exit(EXIT_CHECK)
        return
    print(f"=== Pipeline → {out} ===")
    try:
        summary = experiment.run_pipeline(cfg, out, resume="--resume" in sys.argv)
    except NumericAbort as e:
        archive.finish_run(out, status="aborted", error=str(e), last_finite_step=e.last_finite_step)
        raise
    print(f"\n=== Pipeline complete: macro F1 {summary['macro_f1']:.3f} ===")


def main():
    if len(sys.argv) < 2:
        print(__doc__)
        sys.exit(EXIT_USAGE)

    command = sys.argv[1]
    commands = {
        "gen": cmd_gen,
        "inject": cmd_inject,
        "verify-lemmas": cmd_verify_lemmas,
        "lipschitz": cmd_lipschitz,
        "train": cmd_train,
        "eval": cmd_eval,
        "ablate": cmd_ablate,
        "pipeline": cmd_pipeline,
    }

    if command not in commands:
        print(f"Unknown command: {command}")
        print(f"Available: {', '.join(commands.keys())}")
        sys.exit(EXIT_USAGE)

    try:
        commands[command]()
    except NumericAbort as e:
        print(f"::error::numeric abort: {e}")
        sys.exit(EXIT_NUMERIC)
    except (ValueError, OSError) as e:
        # ConfigError, ContainerError, ShapeError and UsageError are ValueErrors
        print(f"::error::{e}")
        sys.exit(EXIT_USAGE)


if __name__ == "__main__":
    main()
