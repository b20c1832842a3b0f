"""Run directories: manifest lifecycle, result files, weights and checkpoints.

Each run lives in its own directory with manifest.json carrying status
lifecycle:
  running → complete
            → aborted (numeric abort) / failed (check failure)
"""

import json
import os
from datetime import datetime, timezone
from typing import Optional

import numpy as np
import pandas as pd

from ..nn.network import Network, named_params
from ..nn.serialization import load_network, save_network
from .config import RUNS_DIR, blob_hash, config_hash

MANIFEST = "manifest.json"
FINAL_STATES = ("complete",)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def run_path(out: Optional[str], run_id: Optional[str] = None) -> str:
    if out:
        return out
    return os.path.join(RUNS_DIR, run_id or datetime.now().strftime("%Y%m%d-%H%M%S"))


def write_json(run_dir: str, name: str, data) -> str:
    path = os.path.join(run_dir, name)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)
    os.replace(tmp, path)
    return path


def read_json(run_dir: str, name: str) -> Optional[dict]:
    try:
        with open(os.path.join(run_dir, name), "r", encoding="utf-8") as f:
            return json.load(f)
    except (FileNotFoundError, json.JSONDecodeError):
        return None


def write_csv(run_dir: str, name: str, rows) -> str:
    """rows: DataFrame or list of dicts. Floats are written with full repr precision."""
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(rows)
    path = os.path.join(run_dir, name)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def load_manifest(run_dir: str) -> Optional[dict]:
    return read_json(run_dir, MANIFEST)


def start_run(run_dir: str, command: str, config: dict, inputs: Optional[dict] = None,
              resume: bool = False) -> dict:
    """Create or reopen a run directory and mark it running.

    Never reuses a run that already completed; a resumed run must carry the
    same resolved config.
    """
    existing = load_manifest(run_dir)
    if existing and existing.get("status") in FINAL_STATES and not resume:
        raise FileExistsError(f"{run_dir} already holds a {existing['status']} run")
    if existing and resume and existing.get("config_hash") != config_hash(config):
        raise ValueError(f"{run_dir}: resume config differs from the recorded one")
    if existing and not resume and existing.get("status") == "running":
        raise FileExistsError(f"{run_dir} holds an unfinished run; pass --resume to continue it")

    os.makedirs(run_dir, exist_ok=True)
    manifest = existing if (existing and resume) else {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "inputs": {k: {"path": p, "blob": blob_hash(p)} for k, p in (inputs or {}).items()
                   if p and os.path.isfile(p)},
        "created_at": _now(),
    }
    manifest["status"] = "running"
    manifest["updated_at"] = _now()
    if resume:
        manifest["resumed"] = manifest.get("resumed", 0) + 1
    write_json(run_dir, MANIFEST, manifest)
    return manifest


def update_manifest(run_dir: str, **fields) -> dict:
    manifest = load_manifest(run_dir) or {}
    manifest.update(fields)
    manifest["updated_at"] = _now()
    write_json(run_dir, MANIFEST, manifest)
    return manifest


def finish_run(run_dir: str, status: str = "complete", **fields) -> dict:
    return update_manifest(run_dir, status=status, finished_at=_now(), **fields)


# ── weights ────────────────────────────────────────────────────────────

def save_weights(run_dir: str, *nets: Network) -> list:
    return [save_network(net, os.path.join(run_dir, "weights", f"{net.name}.json")) for net in nets]


def load_weights(run_dir: str, name: str) -> Network:
    path = os.path.join(run_dir, "weights", f"{name}.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing weights {path}")
    return load_network(path)


# ── checkpoints ────────────────────────────────────────────────────────

def save_checkpoint(run_dir: str, stage: str, epoch: int, nets: list, opt_state: dict,
                    history: list) -> str:
    """Latest-epoch checkpoint: parameters + optimizer arrays (npz) and a JSON sidecar."""
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    arrays = {f"p/{k}": v for net in nets for k, v in named_params(net).items()}
    arrays.update({f"o/{k}": v for k, v in opt_state.get("arrays", {}).items()})
    tmp = os.path.join(ckpt_dir, f"{stage}.tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, os.path.join(ckpt_dir, f"{stage}.npz"))
    return write_json(run_dir, os.path.join("checkpoints", f"{stage}.json"), {
        "stage": stage,
        "epoch": epoch,
        "optimizer": {"kind": opt_state.get("kind"), "t": opt_state.get("t", 0)},
        "history": history,
    })


def load_checkpoint(run_dir: str, stage: str, nets: list) -> Optional[dict]:
    """Restore parameters in place; returns {"epoch", "history", "opt_state"} or None."""
    meta = read_json(run_dir, os.path.join("checkpoints", f"{stage}.json"))
    path = os.path.join(run_dir, "checkpoints", f"{stage}.npz")
    if meta is None or not os.path.exists(path):
        return None
    with np.load(path) as data:
        for net in nets:
            for k, a in named_params(net).items():
                a[...] = data[f"p/{k}"]
            net.bump()
        opt_arrays = {k[2:]: data[k].copy() for k in data.files if k.startswith("o/")}
    return {
        "epoch": meta["epoch"],
        "history": meta["history"],
        "opt_state": {**meta["optimizer"], "arrays": opt_arrays},
    }
