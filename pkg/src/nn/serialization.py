"""Network JSON documents.

Format::

    {
      "format": "liplab-network/1",
      "name": "compute",
      "seed": 7,
      "layers": [LayerSpec fields ...],
      "params": [{"W": {"shape": [...], "dtype": "<f8", "base64": "..."}}, ...]
    }

Arrays are little-endian float64 bytes, so load(save(net)) is bit-exact.
"""

import base64
import json
import os

import numpy as np

from .layers import LayerSpec
from .network import Network, check_composes

FORMAT = "liplab-network/1"


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8",
            "base64": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    if d.get("dtype", "<f8") != "<f8":
        raise ValueError(f"Unsupported dtype {d.get('dtype')}")
    raw = base64.b64decode(d["base64"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def to_document(net: Network) -> dict:
    return {
        "format": FORMAT,
        "name": net.name,
        "seed": net.rng_seed,
        "layers": [spec.to_dict() for spec in net.layers],
        "params": [{k: encode_array(a) for k, a in p.items()} for p in net.params],
    }


def from_document(doc: dict) -> Network:
    if doc.get("format") != FORMAT:
        raise ValueError(f"Not a network document (format={doc.get('format')!r})")
    layers = [LayerSpec.from_dict(d) for d in doc["layers"]]
    check_composes(layers)
    params = [{k: decode_array(v) for k, v in p.items()} for p in doc["params"]]
    if len(params) != len(layers):
        raise ValueError("params list length differs from layers")
    for spec, p in zip(layers, params):
        expected = spec.param_shapes()
        got = {k: a.shape for k, a in p.items()}
        if {k: tuple(v) for k, v in expected.items()} != got:
            raise ValueError(f"parameter shapes {got} do not match layer {spec.kind} {expected}")
    return Network(layers, params, int(doc.get("seed", 0)), doc.get("name", "net"))


def save_network(net: Network, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_document(net), f, ensure_ascii=False, indent=2)
    return path


def load_network(path: str) -> Network:
    with open(path, "r", encoding="utf-8") as f:
        return from_document(json.load(f))
