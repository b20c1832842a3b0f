"""Network container, deterministic initialisation and the chain-rule passes.

A forward call returns a call-local tape; backward refuses tapes recorded
against another network or an older parameter version. Inputs may be a
single sample (shape ``in_dims``) or a batch (``(B, *in_dims)``); parameter
gradients are summed over the batch.
"""

import copy
import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .layers import (
    LayerSpec,
    ShapeError,
    layer_backward,
    layer_forward,
    layer_tangent,
    layer_tangent_backward,
)
from .rng import spawn

INIT_SCHEMES = ("gaussian", "he", "xavier", "identity", "zeros")
_instance_ids = itertools.count(1)


@dataclass
class Network:
    layers: list
    params: list
    rng_seed: int = 0
    name: str = "net"
    version: int = field(default=0, compare=False)
    # identifies this instance in tape tokens; never reused within a process
    uid: int = field(default_factory=lambda: next(_instance_ids), compare=False, repr=False)

    @property
    def in_dims(self) -> tuple:
        return self.layers[0].in_dims

    @property
    def out_dims(self) -> tuple:
        return self.layers[-1].out_dims

    def bump(self):
        """Mark parameters as changed; outstanding tapes become stale."""
        self.version += 1

    def copy(self, name: Optional[str] = None) -> "Network":
        return Network(list(self.layers), copy.deepcopy(self.params), self.rng_seed,
                       name or self.name)

    def num_params(self) -> int:
        return sum(a.size for p in self.params for a in p.values())


@dataclass
class Tape:
    caches: list
    token: tuple
    single: bool


@dataclass
class GradientBundle:
    grads: list
    input_grad: Optional[np.ndarray] = None
    loss_value: float = 0.0

    def by_path(self, net: Network) -> dict:
        return {f"{net.name}.{i}.{k}": g for i, p in enumerate(self.grads) for k, g in p.items()}

    def global_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for p in self.grads for g in p.values())))


def check_composes(layers: list):
    if not layers:
        raise ShapeError("composition error: empty layer list")
    for i in range(len(layers) - 1):
        if tuple(layers[i].out_dims) != tuple(layers[i + 1].in_dims):
            raise ShapeError(
                f"composition error: layer {i} outputs {layers[i].out_dims} "
                f"but layer {i + 1} expects {layers[i + 1].in_dims}"
            )


def _identity_weight(spec: LayerSpec) -> np.ndarray:
    n, m = spec.in_size, spec.out_size
    eye = np.eye(min(n, m))
    if m == n:
        return np.eye(n)
    if m == 2 * n:
        return np.vstack([eye, -eye])
    if n == 2 * m:
        return np.hstack([eye, -eye])
    raise ShapeError(f"identity init needs out == in, 2*in or in/2, got {n}->{m}")


def init_network(layers: list, scheme: Union[str, tuple] = "he", seed: int = 0,
                 sigma: Optional[float] = None, name: str = "net") -> Network:
    """Build parameters for ``layers``.

    ``scheme`` is one of gaussian (needs ``sigma``, or pass ("gaussian", sigma)),
    he, xavier, identity (dense relu stacks only, exact identity map) or zeros.
    Each layer draws from its own split stream of ``seed``; biases start at 0.
    """
    if isinstance(scheme, (tuple, list)):
        scheme, sigma = scheme[0], scheme[1]
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"Unknown init scheme '{scheme}'")
    if scheme == "gaussian" and (sigma is None or sigma <= 0):
        raise ValueError("gaussian init needs sigma > 0")
    check_composes(layers)

    streams = spawn(seed, len(layers))
    params = []
    for spec, rng in zip(layers, streams):
        shapes = spec.param_shapes()
        p = {}
        if "W" in shapes:
            fan_in, fan_out = spec.fans()
            if scheme == "identity":
                if spec.kind != "dense":
                    raise ShapeError("identity init supports dense layers only")
                p["W"] = _identity_weight(spec)
            elif scheme == "zeros":
                p["W"] = np.zeros(shapes["W"])
            else:
                std = {
                    "gaussian": sigma,
                    "he": np.sqrt(2.0 / fan_in),
                    "xavier": np.sqrt(2.0 / (fan_in + fan_out)),
                }[scheme]
                p["W"] = rng.normal(0.0, std, size=shapes["W"])
        if "b" in shapes:
            p["b"] = np.zeros(shapes["b"])
        params.append(p)
    return Network(list(layers), params, int(seed), name)


def compose(*nets: Network, name: Optional[str] = None) -> Network:
    """Concatenate networks (first applied first); parameters are copied."""
    layers = [spec for net in nets for spec in net.layers]
    check_composes(layers)
    params = [copy.deepcopy(p) for net in nets for p in net.params]
    return Network(layers, params, nets[0].rng_seed, name or "+".join(n.name for n in nets))


def named_params(net: Network) -> dict:
    """``<name>.<layer>.<W|b>`` -> parameter array (live views, not copies)."""
    return {f"{net.name}.{i}.{k}": a for i, p in enumerate(net.params) for k, a in p.items()}


def param_hash(*nets: Network) -> str:
    h = hashlib.sha256()
    for net in nets:
        for path, a in named_params(net).items():
            h.update(path.encode("utf-8"))
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def _as_batch(dims: tuple, x: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == tuple(dims):
        return x[None], True
    if x.ndim == len(dims) + 1 and x.shape[1:] == tuple(dims):
        return x, False
    raise ShapeError(f"{what} shape {x.shape} does not match {tuple(dims)}")


def forward(net: Network, x: np.ndarray):
    """Exact composed map. Returns (y, tape)."""
    h, single = _as_batch(net.in_dims, x, "input")
    caches = []
    for spec, p in zip(net.layers, net.params):
        h, cache = layer_forward(spec, p, h)
        caches.append(cache)
    tape = Tape(caches, (net.uid, net.version), single)
    return (h[0] if single else h), tape


def predict(net: Network, x: np.ndarray) -> np.ndarray:
    return forward(net, x)[0]


def _check_tape(net: Network, tape: Tape):
    if tape.token != (net.uid, net.version) or len(tape.caches) != len(net.layers):
        raise ShapeError("stale or mismatched tape: re-run forward after parameter updates")


def backward(net: Network, tape: Tape, upstream: np.ndarray) -> GradientBundle:
    """Gradients of <upstream, y> with respect to parameters and input."""
    _check_tape(net, tape)
    g, single = _as_batch(net.out_dims, upstream, "upstream")
    if single != tape.single:
        raise ShapeError("upstream batch layout does not match the tape")
    grads = [None] * len(net.layers)
    for i in reversed(range(len(net.layers))):
        g, grads[i] = layer_backward(net.layers[i], net.params[i], tape.caches[i], g)
    return GradientBundle(grads, g[0] if single else g)


def jacobian_input(net: Network, x: np.ndarray) -> np.ndarray:
    """Matrix df/dx at a single sample; row i is the backward pass seeded with e_i."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(net.in_dims):
        raise ShapeError(f"jacobian_input takes one sample of shape {net.in_dims}")
    m = net.layers[-1].out_size
    xs = np.broadcast_to(x, (m,) + x.shape).copy()
    _, tape = forward(net, xs)
    seeds = np.eye(m).reshape((m,) + tuple(net.out_dims))
    return backward(net, tape, seeds).input_grad.reshape(m, -1)


def jvp(net: Network, tape: Tape, v: np.ndarray):
    """Forward-mode product J(x) v at the taped point. Returns (Jv, tangent caches)."""
    _check_tape(net, tape)
    t, single = _as_batch(net.in_dims, v, "tangent")
    if single != tape.single:
        raise ShapeError("tangent batch layout does not match the tape")
    tcaches = []
    for spec, p, cache in zip(net.layers, net.params, tape.caches):
        t, tc = layer_tangent(spec, p, cache, t)
        tcaches.append(tc)
    return (t[0] if single else t), tcaches


def jvp_backward(net: Network, tape: Tape, tcaches: list, upstream: np.ndarray) -> GradientBundle:
    """Parameter gradients of <upstream, J(x) v>, curvature terms included.

    ``input_grad`` holds the gradient with respect to the primal input x.
    """
    _check_tape(net, tape)
    gt, single = _as_batch(net.out_dims, upstream, "upstream")
    gp = np.zeros_like(gt)
    grads = [None] * len(net.layers)
    for i in reversed(range(len(net.layers))):
        spec, p, cache = net.layers[i], net.params[i], tape.caches[i]
        gt, dt_params, extra = layer_tangent_backward(spec, p, cache, tcaches[i], gt)
        gp, dp_params = layer_backward(spec, p, cache, gp)
        if extra is not None:
            gp = gp + extra
        grads[i] = {k: dt_params.get(k, 0.0) + dp_params[k] for k in dp_params}
    return GradientBundle(grads, gp[0] if single else gp)


def materialize_matrix(spec: LayerSpec, params: dict) -> np.ndarray:
    """Explicit (out_size x in_size) matrix of a conv layer, bias excluded."""
    if not spec.is_conv:
        raise ShapeError(f"materialize_matrix needs a conv layer, got '{spec.kind}'")
    n = spec.in_size
    basis = np.eye(n).reshape((n,) + tuple(spec.in_dims))
    y, _ = layer_forward(spec, {"W": params["W"]}, basis)
    return y.reshape(n, -1).T


def conv_support_mask(spec: LayerSpec) -> np.ndarray:
    """Boolean structural sparsity pattern of a conv layer's matrix."""
    return materialize_matrix(spec, {"W": np.ones(spec.param_shapes()["W"])}) != 0.0
