"""Layer kinds: dense, conv1d, conv2d and elementwise activations.

All kernels work on a leading batch axis. Convolutions use an im2col gather
over the zero-padded input; the backward pass scatters back one kernel tap at
a time (positions within a tap never collide, so plain fancy-index ``+=`` is
exact).
"""

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

LAYER_KINDS = ("dense", "conv1d", "conv2d", "activation")
ACTIVATIONS = ("relu", "tanh", "softplus")
SMOOTH_ACTIVATIONS = ("tanh", "softplus")

# K_phi of every supported activation
ACTIVATION_LIPSCHITZ = {"relu": 1.0, "tanh": 1.0, "softplus": 1.0}


class ShapeError(ValueError):
    """Raised on non-composing specs, mismatched inputs and stale tapes."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dims: tuple
    out_dims: tuple
    kernel_size: int = 1
    stride: int = 1
    padding: str = "valid"
    activation_kind: Optional[str] = None
    activation_lipschitz: float = 1.0
    bias: bool = True

    @property
    def is_conv(self) -> bool:
        return self.kind in ("conv1d", "conv2d")

    @property
    def is_linear(self) -> bool:
        return self.kind in ("dense", "conv1d", "conv2d")

    @property
    def in_size(self) -> int:
        return math.prod(self.in_dims)

    @property
    def out_size(self) -> int:
        return math.prod(self.out_dims)

    def param_shapes(self) -> dict:
        if self.kind == "dense":
            shapes = {"W": (self.out_size, self.in_size)}
            if self.bias:
                shapes["b"] = (self.out_size,)
            return shapes
        if self.is_conv:
            spatial = len(self.in_dims) - 1
            shapes = {"W": (self.out_dims[0], self.in_dims[0]) + (self.kernel_size,) * spatial}
            if self.bias:
                shapes["b"] = (self.out_dims[0],)
            return shapes
        return {}

    def fans(self) -> tuple[int, int]:
        """(fan_in, fan_out) used by the He and Xavier schemes."""
        if self.kind == "dense":
            return self.in_size, self.out_size
        if self.is_conv:
            taps = self.kernel_size ** (len(self.in_dims) - 1)
            return self.in_dims[0] * taps, self.out_dims[0] * taps
        return 0, 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["in_dims"] = list(self.in_dims)
        d["out_dims"] = list(self.out_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        d["in_dims"] = tuple(d["in_dims"])
        d["out_dims"] = tuple(d["out_dims"])
        return cls(**d)


def _dims(d) -> tuple:
    return (int(d),) if isinstance(d, (int, np.integer)) else tuple(int(v) for v in d)


def pad_amounts(n: int, k: int, s: int, padding: str) -> tuple[int, int]:
    """(left, right) zero padding; odd totals put the extra zero on the left/top."""
    if padding == "valid":
        return 0, 0
    if padding != "same":
        raise ShapeError(f"Unknown padding '{padding}'")
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return total - total // 2, total // 2


def conv_output_length(n: int, k: int, s: int, padding: str) -> int:
    left, right = pad_amounts(n, k, s, padding)
    padded = n + left + right
    if padded < k:
        raise ShapeError(f"Kernel {k} larger than padded input {padded}")
    return (padded - k) // s + 1


def dense(in_dims, out_dims, bias: bool = True) -> LayerSpec:
    return LayerSpec("dense", _dims(in_dims), _dims(out_dims), bias=bias)


def _conv(kind: str, in_dims, channels: int, kernel_size: int, stride: int,
          padding: str, bias: bool) -> LayerSpec:
    in_dims = _dims(in_dims)
    spatial = 1 if kind == "conv1d" else 2
    if len(in_dims) != spatial + 1:
        raise ShapeError(f"{kind} expects (C, {'L' if spatial == 1 else 'H, W'}) input, got {in_dims}")
    if kernel_size < 1 or stride < 1:
        raise ShapeError("kernel_size and stride must be positive")
    out_sp = tuple(conv_output_length(n, kernel_size, stride, padding) for n in in_dims[1:])
    return LayerSpec(kind, in_dims, (int(channels),) + out_sp, kernel_size=kernel_size,
                     stride=stride, padding=padding, bias=bias)


def conv1d(in_dims, channels: int, kernel_size: int, stride: int = 1,
           padding: str = "valid", bias: bool = True) -> LayerSpec:
    return _conv("conv1d", in_dims, channels, kernel_size, stride, padding, bias)


def conv2d(in_dims, channels: int, kernel_size: int, stride: int = 1,
           padding: str = "valid", bias: bool = True) -> LayerSpec:
    return _conv("conv2d", in_dims, channels, kernel_size, stride, padding, bias)


def activation(dims, kind: str) -> LayerSpec:
    if kind not in ACTIVATIONS:
        raise ShapeError(f"Unknown activation '{kind}'")
    dims = _dims(dims)
    return LayerSpec("activation", dims, dims, activation_kind=kind,
                     activation_lipschitz=ACTIVATION_LIPSCHITZ[kind], bias=False)


# ── activation derivatives ─────────────────────────────────────────────

def _act(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "tanh":
        return np.tanh(a)
    return np.logaddexp(0.0, a)


def _act_d1(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (a > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - np.tanh(a) ** 2
    return expit(a)


def _act_d2(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.zeros_like(a)
    if kind == "tanh":
        t = np.tanh(a)
        return -2.0 * t * (1.0 - t * t)
    s = expit(a)
    return s * (1.0 - s)


# ── convolution via im2col ─────────────────────────────────────────────

def _patch_index(padded: tuple, out: tuple, k: int, s: int) -> np.ndarray:
    """(positions, taps) flat indices into the padded spatial grid."""
    pos = np.zeros(1, dtype=np.intp)
    off = np.zeros(1, dtype=np.intp)
    mult = 1
    for axis in reversed(range(len(padded))):
        o = np.arange(out[axis], dtype=np.intp) * s * mult
        kk = np.arange(k, dtype=np.intp) * mult
        pos = (o[:, None] + pos[None, :]).ravel()
        off = (kk[:, None] + off[None, :]).ravel()
        mult *= padded[axis]
    return pos[:, None] + off[None, :]


def _conv_geometry(spec: LayerSpec):
    pads = [pad_amounts(n, spec.kernel_size, spec.stride, spec.padding) for n in spec.in_dims[1:]]
    padded = tuple(n + l + r for n, (l, r) in zip(spec.in_dims[1:], pads))
    idx = _patch_index(padded, spec.out_dims[1:], spec.kernel_size, spec.stride)
    return pads, padded, idx


def _im2col(spec: LayerSpec, x: np.ndarray):
    b, c = x.shape[0], spec.in_dims[0]
    pads, padded, idx = _conv_geometry(spec)
    xp = np.pad(x, [(0, 0), (0, 0)] + pads) if any(l or r for l, r in pads) else x
    cols = xp.reshape(b, c, -1)[:, :, idx]
    cols = cols.transpose(0, 2, 1, 3).reshape(b, idx.shape[0], c * idx.shape[1])
    return cols, (pads, padded, idx)


def _conv_apply(spec: LayerSpec, W: np.ndarray, cols: np.ndarray, b: Optional[np.ndarray]):
    batch = cols.shape[0]
    c_out = spec.out_dims[0]
    y = cols @ W.reshape(c_out, -1).T
    if b is not None:
        y = y + b
    return y.transpose(0, 2, 1).reshape((batch,) + spec.out_dims)


def _conv_backward(spec: LayerSpec, W: np.ndarray, cols: np.ndarray, geom, g: np.ndarray,
                   with_bias: bool):
    pads, padded, idx = geom
    batch = g.shape[0]
    c_out, c_in = spec.out_dims[0], spec.in_dims[0]
    positions, taps = idx.shape
    g2 = g.reshape(batch, c_out, positions).transpose(0, 2, 1)
    grads = {"W": (g2.reshape(-1, c_out).T @ cols.reshape(-1, c_in * taps)).reshape(W.shape)}
    if with_bias:
        grads["b"] = g2.sum(axis=(0, 1))
    dcols = (g2 @ W.reshape(c_out, -1)).reshape(batch, positions, c_in, taps).transpose(0, 2, 1, 3)
    dxp = np.zeros((batch, c_in, math.prod(padded)))
    for t in range(taps):
        dxp[:, :, idx[:, t]] += dcols[:, :, :, t]
    dxp = dxp.reshape((batch, c_in) + padded)
    crop = tuple(slice(l, l + n) for (l, _), n in zip(pads, spec.in_dims[1:]))
    return dxp[(slice(None), slice(None)) + crop], grads


# ── per-layer primal and tangent passes ─────────────────────────────────

def layer_forward(spec: LayerSpec, params: dict, x: np.ndarray):
    """Batched forward. Returns (y, cache)."""
    if spec.kind == "dense":
        x2 = x.reshape(x.shape[0], -1)
        y = x2 @ params["W"].T
        if "b" in params:
            y = y + params["b"]
        return y.reshape((x.shape[0],) + spec.out_dims), x2
    if spec.is_conv:
        cols, geom = _im2col(spec, x)
        return _conv_apply(spec, params["W"], cols, params.get("b")), (cols, geom)
    return _act(spec.activation_kind, x), x


def layer_backward(spec: LayerSpec, params: dict, cache, g: np.ndarray):
    """Returns (input gradient, parameter gradients) for upstream ``g``."""
    batch = g.shape[0]
    if spec.kind == "dense":
        x2 = cache
        g2 = g.reshape(batch, -1)
        grads = {"W": g2.T @ x2}
        if "b" in params:
            grads["b"] = g2.sum(axis=0)
        return (g2 @ params["W"]).reshape((batch,) + spec.in_dims), grads
    if spec.is_conv:
        cols, geom = cache
        return _conv_backward(spec, params["W"], cols, geom, g, "b" in params)
    return _act_d1(spec.activation_kind, cache) * g, {}


def layer_tangent(spec: LayerSpec, params: dict, cache, t: np.ndarray):
    """Forward-mode tangent through the layer at the cached point: (J t, tangent cache)."""
    if spec.kind == "dense":
        t2 = t.reshape(t.shape[0], -1)
        return (t2 @ params["W"].T).reshape((t.shape[0],) + spec.out_dims), t2
    if spec.is_conv:
        tcols, _ = _im2col(spec, t)
        return _conv_apply(spec, params["W"], tcols, None), tcols
    return _act_d1(spec.activation_kind, cache) * t, t


def layer_tangent_backward(spec: LayerSpec, params: dict, cache, tcache, gt: np.ndarray):
    """Reverse pass of the tangent map.

    Returns (grad wrt tangent input, parameter grads, extra grad wrt the primal
    layer input or None). The extra term carries the activation curvature.
    """
    batch = gt.shape[0]
    if spec.kind == "dense":
        g2 = gt.reshape(batch, -1)
        return (g2 @ params["W"]).reshape((batch,) + spec.in_dims), {"W": g2.T @ tcache}, None
    if spec.is_conv:
        _, geom = cache
        dt, grads = _conv_backward(spec, params["W"], tcache, geom, gt, False)
        return dt, grads, None
    a = cache
    extra = gt * tcache * _act_d2(spec.activation_kind, a)
    return _act_d1(spec.activation_kind, a) * gt, {}, extra
