"""The ``.mmds`` multimodal dataset container.

Layout (all integers little-endian)::

    b"MMDS1\\n"                      6-byte magic
    u64 header_length
    header_length bytes of UTF-8 JSON:
        {"format": "mmds/1", "count": n, "image_shape": [1, H, W],
         "sensor_dims": d, "state_fields": [...], "dtype": "<f8",
         "record_bytes": 8 * (H*W + d + 5), "seed": ..., "meta": {...}}
    n records, each:
        u32 payload_length
        payload: image float64[H*W] | sensor float64[d] | state float64[5]
"""

import json
import os
from typing import Optional

import numpy as np

from .scene import IMAGE_SIZE, SENSOR_DIMS, MultimodalSample, SceneState

MAGIC = b"MMDS1\n"
FORMAT = "mmds/1"
STATE_FIELDS = ["u", "v", "radius", "du", "dv"]


class ContainerError(ValueError):
    def __init__(self, message: str, record_index: Optional[int] = None, offset: int = 0):
        where = f"record {record_index}" if record_index is not None else "header"
        super().__init__(f"{where} at offset {offset}: {message}")
        self.record_index = record_index
        self.offset = offset


def save(dataset: list, path: str, seed: Optional[int] = None, meta: Optional[dict] = None) -> str:
    if dataset:
        image_shape = list(dataset[0].image.shape)
        sensor_dims = int(dataset[0].sensor.size)
    else:
        image_shape, sensor_dims = [1, IMAGE_SIZE, IMAGE_SIZE], SENSOR_DIMS
    record_bytes = 8 * (int(np.prod(image_shape)) + sensor_dims + len(STATE_FIELDS))
    header = {
        "format": FORMAT,
        "count": len(dataset),
        "image_shape": image_shape,
        "sensor_dims": sensor_dims,
        "state_fields": STATE_FIELDS,
        "dtype": "<f8",
        "record_bytes": record_bytes,
        "seed": seed,
        "meta": meta or {},
    }
    head = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(head).to_bytes(8, "little"))
        f.write(head)
        for i, s in enumerate(dataset):
            if list(s.image.shape) != image_shape or s.sensor.size != sensor_dims:
                raise ContainerError("sample shape differs from the first sample", i, f.tell())
            state = s.state.to_array() if s.state is not None else np.full(5, np.nan)
            payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                               for a in (s.image.ravel(), s.sensor.ravel(), state))
            f.write(len(payload).to_bytes(4, "little"))
            f.write(payload)
    return path


def _read_header(buf: bytes) -> tuple[dict, int]:
    if buf[:len(MAGIC)] != MAGIC:
        raise ContainerError("bad magic, not an .mmds container", None, 0)
    pos = len(MAGIC)
    if len(buf) < pos + 8:
        raise ContainerError("truncated header length", None, pos)
    n = int.from_bytes(buf[pos:pos + 8], "little")
    pos += 8
    if len(buf) < pos + n:
        raise ContainerError("truncated header", None, pos)
    try:
        header = json.loads(buf[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"unreadable header JSON ({e})", None, pos)
    if header.get("format") != FORMAT:
        raise ContainerError(f"unknown format {header.get('format')!r}", None, pos)
    return header, pos + n


def read_header(path: str) -> dict:
    with open(path, "rb") as f:
        return _read_header(f.read())[0]


def load(path: str) -> list:
    with open(path, "rb") as f:
        buf = f.read()
    header, pos = _read_header(buf)
    image_shape = tuple(header["image_shape"])
    n_img = int(np.prod(image_shape))
    n_sen = int(header["sensor_dims"])
    expected = int(header["record_bytes"])
    dataset = []
    for i in range(int(header["count"])):
        if len(buf) < pos + 4:
            raise ContainerError("record truncated before its length prefix", i, pos)
        size = int.from_bytes(buf[pos:pos + 4], "little")
        if size != expected:
            raise ContainerError(f"record length {size} != {expected}", i, pos)
        pos += 4
        if len(buf) < pos + size:
            raise ContainerError(f"record truncated ({len(buf) - pos} of {size} bytes)", i, pos)
        values = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).astype(np.float64)
        pos += size
        state = values[n_img + n_sen:]
        dataset.append(MultimodalSample(
            values[:n_img].reshape(image_shape).copy(),
            values[n_img:n_img + n_sen].copy(),
            None if np.all(np.isnan(state)) else SceneState.from_array(state),
        ))
    if pos != len(buf):
        raise ContainerError(f"{len(buf) - pos} trailing bytes after last record", None, pos)
    return dataset
