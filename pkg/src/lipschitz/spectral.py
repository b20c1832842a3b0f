"""Spectral norms by power iteration on A^T A."""

from typing import Callable

import numpy as np

from ..nn.layers import LayerSpec, layer_backward, layer_forward
from ..nn.rng import make_rng

POWER_TOL = 1e-9
POWER_ITERS = 1000


def operator_norm(matvec: Callable, rmatvec: Callable, n: int, iters: int = POWER_ITERS,
                  tol: float = POWER_TOL, seed: int = 0) -> float:
    """sigma_max of a linear operator given A v and A^T u.

    The estimate ||A v_k|| is non-decreasing in k; iteration stops once its
    relative change drops below ``tol``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    v = make_rng(seed, n).standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        u = matvec(v)
        new = float(np.linalg.norm(u))
        if new == 0.0:
            return est
        w = rmatvec(u)
        wn = np.linalg.norm(w)
        if wn == 0.0:
            return new
        v = w / wn
        if est > 0.0 and abs(new - est) <= tol * new:
            return max(est, new)
        est = max(est, new)
    return est


def spectral_norm(W: np.ndarray, iters: int = POWER_ITERS, tol: float = POWER_TOL) -> float:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"spectral_norm expects a matrix, got shape {W.shape}")
    if not np.any(W):
        return 0.0
    return operator_norm(lambda v: W @ v, lambda u: W.T @ u, W.shape[1], iters, tol)


def layer_norm(spec: LayerSpec, params: dict, iters: int = POWER_ITERS,
               tol: float = POWER_TOL) -> float:
    """||W||_2 of a linear layer; conv layers run on the operator (forward + adjoint)."""
    if spec.kind == "dense":
        return spectral_norm(params["W"], iters, tol)
    if not spec.is_conv:
        raise ValueError(f"layer_norm needs a linear layer, got '{spec.kind}'")
    if not np.any(params["W"]):
        return 0.0
    W = {"W": params["W"]}
    shape = (1,) + tuple(spec.in_dims)

    def matvec(v):
        return layer_forward(spec, W, v.reshape(shape))[0].ravel()

    def rmatvec(u):
        _, cache = layer_forward(spec, W, np.zeros(shape))
        dx, _ = layer_backward(spec, W, cache, u.reshape((1,) + tuple(spec.out_dims)))
        return dx.ravel()

    return operator_norm(matvec, rmatvec, spec.in_size, iters, tol)
