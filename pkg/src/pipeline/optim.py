"""Selective gradient scaling (amplify, renormalise, step) and the optimizers it feeds.

Parameters and gradients are flat dicts keyed by parameter path
(``detector.2.W`` ...); ``target_set`` globs pick the amplified subset.
"""

from dataclasses import dataclass, field
from fnmatch import fnmatch
from typing import Optional

import numpy as np


@dataclass
class ClipConfig:
    tau: float = 1.0
    alpha: float = 3.0
    target_set: tuple = ("detector.*",)
    eta: float = 1e-4

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.alpha < 1:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        self.target_set = tuple(self.target_set)

    def targets(self, paths) -> list:
        return [p for p in paths if any(fnmatch(p, pat) for pat in self.target_set)]


@dataclass
class AppliedGradient:
    targeted: list
    amplified_norm: float
    scale: float
    applied_norm: float
    grads: dict = field(repr=False, default_factory=dict)


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


class SGDMomentum:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.buffers = {}

    def step(self, params: dict, grads: dict):
        for k, g in grads.items():
            buf = self.buffers.get(k)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[k] = buf
            params[k] -= self.lr * buf

    def state_dict(self) -> dict:
        return {"kind": "momentum", "t": 0, "arrays": {f"m/{k}": v for k, v in self.buffers.items()}}

    def load_state_dict(self, state: dict):
        self.buffers = {k[2:]: v.copy() for k, v in state["arrays"].items() if k.startswith("m/")}


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.beta1 * self.m.get(k, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        arrays = {f"m/{k}": v for k, v in self.m.items()}
        arrays.update({f"v/{k}": v for k, v in self.v.items()})
        return {"kind": "adam", "t": self.t, "arrays": arrays}

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        self.m = {k[2:]: v.copy() for k, v in state["arrays"].items() if k.startswith("m/")}
        self.v = {k[2:]: v.copy() for k, v in state["arrays"].items() if k.startswith("v/")}


def make_optimizer(kind: str, lr: float, momentum: float = 0.9):
    if kind == "momentum":
        return SGDMomentum(lr, momentum)
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGDMomentum(lr, 0.0)
    raise ValueError(f"Unknown optimizer '{kind}'")


def selective_step(params: dict, grads: dict, clip: ClipConfig, optimizer=None):
    """One selective-scaling step; ``params`` is updated in place and returned.

    1. g[theta_a] *= alpha
    2. n = ||g|| over all parameters
    3. g *= tau / n when n > tau
    4. theta -= eta * g (or the optimizer's rule on g)
    """
    targeted = clip.targets(grads)
    g = {k: (v * clip.alpha if k in targeted else v) for k, v in grads.items()}
    n = global_norm(g)
    scale = clip.tau / n if n > clip.tau else 1.0
    if scale != 1.0:
        g = {k: v * scale for k, v in g.items()}
    if optimizer is None:
        for k, v in g.items():
            params[k] -= clip.eta * v
    else:
        optimizer.step(params, g)
    return params, AppliedGradient(targeted, n, scale, global_norm(g), g)


def unclipped(clip: Optional[ClipConfig]) -> ClipConfig:
    """Plain gradient step settings (no amplification, no clipping)."""
    return ClipConfig(tau=float("inf"), alpha=1.0, target_set=(), eta=clip.eta if clip else 1e-4)
