"""Closed-form expected output energies under random linear layers.

Dense layer with i.i.d. N(0, s2) entries:   E||W d||^2 = M s2 ||d_S||^2
Conv layer, independent entries per (row, column) on the conv sparsity mask:
    E||C d||^2 = s2 sum_{i in S} |S_i| d_i^2  <=  s2 r K ||d_S||^2
where |S_i| is the number of outputs column i feeds. Multiplicative faults use
the same formulas after substituting d = diag(x) eps.
"""

from dataclasses import dataclass

import numpy as np

from ..nn.layers import LayerSpec
from ..nn.network import conv_support_mask
from .spec import PerturbationSpec


@dataclass
class ConvSupportProfile:
    """Receptive-set sizes |S_i| per input column plus the support they are read for."""
    column_sizes: dict
    K: int
    support: tuple = ()

    def __post_init__(self):
        missing = [i for i in self.support if i not in self.column_sizes]
        if missing:
            raise ValueError(f"support indices {missing} not covered by the profile")

    @property
    def r(self) -> int:
        return len(self.support)

    @property
    def s(self) -> int:
        return int(sum(self.column_sizes[i] for i in self.support))

    def sizes(self) -> np.ndarray:
        return np.array([self.column_sizes[i] for i in self.support], dtype=np.float64)

    def for_support(self, support) -> "ConvSupportProfile":
        return ConvSupportProfile(self.column_sizes, self.K, tuple(int(i) for i in support))

    @classmethod
    def from_layer(cls, layer: LayerSpec, support=()) -> "ConvSupportProfile":
        counts = conv_support_mask(layer).sum(axis=0)
        return cls({i: int(c) for i, c in enumerate(counts)}, int(counts.max()),
                   tuple(int(i) for i in support))


@dataclass
class EnergyComparison:
    dense_expected: float
    conv_expected: float
    dense_per_output: float
    conv_per_output: float
    M: int
    s: int
    equal_magnitudes: bool = True

    @property
    def holds(self) -> bool:
        return self.conv_per_output >= self.dense_per_output

    def to_dict(self) -> dict:
        return {
            "dense_expected": self.dense_expected,
            "conv_expected": self.conv_expected,
            "dense_per_output": self.dense_per_output,
            "conv_per_output": self.conv_per_output,
            "M": self.M,
            "s": self.s,
            "equal_magnitudes": self.equal_magnitudes,
            "holds": self.holds,
        }


@dataclass
class DenseConfig:
    M: int
    sigma2: float


@dataclass
class ConvConfig:
    profile: ConvSupportProfile
    sigma2: float


def expected_energy_dense(M: int, sigma_W2: float, p: PerturbationSpec) -> float:
    if M < 1 or sigma_W2 <= 0:
        raise ValueError("need M >= 1 and sigma_W2 > 0")
    d = p.support_delta()
    return float(M * sigma_W2 * np.dot(d, d))


def expected_energy_conv(profile: ConvSupportProfile, sigma_k2: float,
                         p: PerturbationSpec) -> tuple[float, float]:
    """(exact, upper_bound) for the independent-entry conv model."""
    if sigma_k2 <= 0:
        raise ValueError("need sigma_k2 > 0")
    profile = profile.for_support(p.support)
    d = p.support_delta()
    exact = float(sigma_k2 * np.dot(profile.sizes(), d * d))
    bound = float(sigma_k2 * profile.r * profile.K * np.dot(d, d))
    return exact, bound


def compare_per_output(dense_cfg: DenseConfig, conv_cfg: ConvConfig,
                       p: PerturbationSpec) -> EnergyComparison:
    """Per-output energy of dense (over all M rows) against conv (over the s affected rows).

    With equal delta_i^2 the ratio is exactly conv = dense / r, so the
    comparison favours conv (with equality) only for single-index supports.
    """
    if dense_cfg.sigma2 != conv_cfg.sigma2:
        raise ValueError("compare_per_output assumes sigma_W2 == sigma_k2")
    profile = conv_cfg.profile.for_support(p.support)
    s = profile.s
    if s == 0:
        raise ValueError("no affected outputs (s == 0)")
    if s > dense_cfg.M / 4:
        raise ValueError(f"precondition s <= M/4 violated (s={s}, M={dense_cfg.M})")
    dense = expected_energy_dense(dense_cfg.M, dense_cfg.sigma2, p)
    conv, _ = expected_energy_conv(profile, conv_cfg.sigma2, p)
    d2 = p.support_delta() ** 2
    return EnergyComparison(
        dense_expected=dense,
        conv_expected=conv,
        dense_per_output=dense / dense_cfg.M,
        conv_per_output=conv / s,
        M=dense_cfg.M,
        s=s,
        equal_magnitudes=bool(np.all(d2 == d2[0])) if d2.size else True,
    )
