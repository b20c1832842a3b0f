"""Supported additive / multiplicative perturbations."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

KINDS = ("additive", "multiplicative")


@dataclass
class PerturbationSpec:
    """A fault on the flattened input.

    additive:        x~ = x + delta, delta_i = magnitudes on ``support``
    multiplicative:  x~ = x * (1 + eps), eps_i = magnitudes on ``support``;
                     its effective additive vector is x_i * eps_i on the support
    """
    kind: str
    support: tuple
    magnitudes: np.ndarray
    base_input: Optional[np.ndarray] = None
    size: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"Unknown perturbation kind '{self.kind}'")
        support = np.asarray(self.support, dtype=np.int64).ravel()
        mags = np.asarray(self.magnitudes, dtype=np.float64).ravel()
        if support.size != mags.size:
            raise ValueError(f"{support.size} support indices but {mags.size} magnitudes")
        if np.unique(support).size != support.size:
            raise ValueError("support indices must be unique")
        order = np.argsort(support, kind="stable")
        self.support = tuple(int(i) for i in support[order])
        self.magnitudes = mags[order]
        if self.base_input is not None:
            self.base_input = np.asarray(self.base_input, dtype=np.float64).ravel()
            if self.size is None:
                self.size = self.base_input.size
            elif self.size != self.base_input.size:
                raise ValueError("base_input length differs from size")
        if self.support and (self.support[0] < 0 or
                             (self.size is not None and self.support[-1] >= self.size)):
            raise ValueError(f"support index out of range for input of size {self.size}")

    @classmethod
    def additive(cls, support, delta, size: Optional[int] = None, **meta) -> "PerturbationSpec":
        return cls("additive", tuple(support), np.asarray(delta, dtype=np.float64), None, size, meta)

    @classmethod
    def multiplicative(cls, base_input, support, eps, **meta) -> "PerturbationSpec":
        x = np.asarray(base_input, dtype=np.float64)
        return cls("multiplicative", tuple(support), np.asarray(eps, dtype=np.float64), x, x.size, meta)

    @classmethod
    def empty(cls, size: Optional[int] = None) -> "PerturbationSpec":
        return cls("additive", (), np.zeros(0), None, size)

    @property
    def r(self) -> int:
        return len(self.support)

    def support_delta(self) -> np.ndarray:
        """delta restricted to the support (substituting diag(x) eps when multiplicative)."""
        if self.kind == "additive":
            return self.magnitudes.copy()
        if self.base_input is None:
            raise ValueError("multiplicative perturbation needs base_input")
        return self.base_input[list(self.support)] * self.magnitudes

    def effective_delta(self, size: Optional[int] = None) -> np.ndarray:
        n = size if size is not None else self.size
        if n is None:
            raise ValueError("input size unknown; pass size=")
        delta = np.zeros(n)
        if self.support:
            delta[list(self.support)] = self.support_delta()
        return delta

    def apply(self, x: np.ndarray) -> np.ndarray:
        """x + effective delta, keeping the input's shape."""
        x = np.asarray(x, dtype=np.float64)
        return x + self.effective_delta(x.size).reshape(x.shape)

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "support": list(self.support),
            "magnitudes": self.magnitudes.tolist(),
            "size": self.size,
        }
        if self.base_input is not None:
            d["base_input"] = self.base_input.tolist()
        if self.meta:
            d["meta"] = self.meta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationSpec":
        base = d.get("base_input")
        return cls(d["kind"], tuple(d["support"]), np.asarray(d["magnitudes"], dtype=np.float64),
                   None if base is None else np.asarray(base, dtype=np.float64),
                   d.get("size"), d.get("meta", {}))


def random_spec(rng: np.random.Generator, n: int, r: int, kind: str = "additive",
                base_input: Optional[np.ndarray] = None, equal_magnitudes: bool = False
                ) -> PerturbationSpec:
    """Uniform support without replacement, magnitudes uniform in [-1, 1]."""
    if not 0 <= r <= n:
        raise ValueError(f"support size {r} outside [0, {n}]")
    support = np.sort(rng.choice(n, size=r, replace=False))
    if equal_magnitudes:
        mags = np.full(r, rng.uniform(0.1, 1.0)) * rng.choice([-1.0, 1.0], size=r)
    else:
        mags = rng.uniform(-1.0, 1.0, size=r)
    if kind == "additive":
        return PerturbationSpec.additive(support, mags, size=n)
    if base_input is None:
        base_input = rng.uniform(-1.0, 1.0, size=n)
    return PerturbationSpec.multiplicative(base_input, support, mags)
