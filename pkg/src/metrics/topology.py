"""Latent error topology: how a fault spreads across latent dimensions.

Conv branches are expected to leave most dimensions untouched by a local
fault (zero-inflated |dz|); dense branches spread it (bell-shaped |dz|).
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

HIST_BINS = 64
HIST_FLOOR = 1e-8


@dataclass
class LatentErrorProfile:
    name: str
    deltas: np.ndarray = field(repr=False)
    theta_z: float
    sparsity: float
    edges: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)
    zero_count: int = 0

    def histogram_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"branch": self.name, "lo": self.edges[:-1], "hi": self.edges[1:],
                              "count": self.counts})
        zero = pd.DataFrame([{"branch": self.name, "lo": 0.0, "hi": 0.0, "count": self.zero_count}])
        return pd.concat([zero, frame], ignore_index=True)

    def summary(self) -> dict:
        return {"branch": self.name, "dims": int(self.deltas.shape[1]), "samples": int(self.deltas.shape[0]),
                "theta_z": self.theta_z, "sparsity": self.sparsity,
                "mean_abs_delta": float(self.deltas.mean()) if self.deltas.size else 0.0}


def default_theta(clean: np.ndarray) -> float:
    """1e-3 times the RMS of the clean latents."""
    clean = np.asarray(clean, dtype=np.float64)
    return 1e-3 * float(np.sqrt(np.mean(clean ** 2))) if clean.size else 0.0


def _check_split(split: dict, dims: int) -> dict:
    seen = np.zeros(dims, dtype=np.int64)
    out = {}
    for name, idx in split.items():
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= dims):
            raise ValueError(f"branch '{name}' indexes outside the latent")
        np.add.at(seen, idx, 1)
        out[name] = idx
    if np.any(seen > 1):
        raise ValueError("overlapping split: a latent dimension belongs to more than one branch")
    if np.any(seen == 0):
        raise ValueError("split does not cover every latent dimension")
    return out


def _histogram(values: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray, int]:
    flat = values.ravel()
    nonzero = flat[flat > 0]
    top = max(float(nonzero.max()) if nonzero.size else HIST_FLOOR, HIST_FLOOR * 10)
    edges = np.logspace(np.log10(HIST_FLOOR), np.log10(top), bins + 1)
    counts, _ = np.histogram(np.clip(nonzero, HIST_FLOOR, top), bins=edges)
    return edges, counts, int(flat.size - nonzero.size)


def latent_topology(clean: np.ndarray, fault: np.ndarray, split: dict, theta_z=None,
                    bins: int = HIST_BINS) -> dict:
    """{branch: LatentErrorProfile}; sparsity = fraction of |dz| <= theta_z."""
    clean = np.atleast_2d(np.asarray(clean, dtype=np.float64))
    fault = np.atleast_2d(np.asarray(fault, dtype=np.float64))
    if clean.shape != fault.shape:
        raise ValueError(f"shape mismatch {clean.shape} vs {fault.shape}")
    split = _check_split(split, clean.shape[1])
    theta = default_theta(clean) if theta_z is None else float(theta_z)
    if theta < 0:
        raise ValueError("theta_z must be >= 0")
    deltas = np.abs(fault - clean)
    out = {}
    for name, idx in split.items():
        d = deltas[:, idx]
        edges, counts, zeros = _histogram(d, bins)
        out[name] = LatentErrorProfile(name, d, theta, float(np.mean(d <= theta)) if d.size else 1.0,
                                       edges, counts, zeros)
    return out


def topology_frame(profiles: dict, **columns) -> pd.DataFrame:
    return pd.DataFrame([{**columns, **p.summary()} for p in profiles.values()])
