"""Standalone DFIW container I/O.

This is the exporter's own implementation of the weight-file format and
deliberately shares no code with the consumer engine; agreeing on bytes is
the whole point.

Layout (little-endian):
    magic "DFIW" | version u32=1
    channel-order byte (0=RGB, 1=BGR) | 3 x f32 channel means
    layer count u32
    per conv layer: name len u16 + UTF-8, dims 4 x u32 (out,in,kh,kw),
                    f32 weights row-major, bias len u32, f32 bias
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"DFIW"
VERSION = 1

CHANNEL_ORDER = {"rgb": 0, "bgr": 1}


class DfiwError(ValueError):
    pass


@dataclass
class ConvEntry:
    name: str
    weights: np.ndarray  # (out, in, kh, kw) float32
    bias: np.ndarray  # (out,) float32


@dataclass
class DfiwFile:
    channel_order: int
    means: np.ndarray  # (3,) float32, in network channel order
    layers: list[ConvEntry]


def write_dfiw(model: DfiwFile, path: str) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(struct.pack("<B", model.channel_order))
    parts.append(np.asarray(model.means, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", len(model.layers)))
    for entry in model.layers:
        name = entry.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<4I", *entry.weights.shape))
        parts.append(np.ascontiguousarray(entry.weights, dtype="<f4").tobytes())
        parts.append(struct.pack("<I", entry.bias.shape[0]))
        parts.append(np.ascontiguousarray(entry.bias, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_dfiw(path: str) -> DfiwFile:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise DfiwError(f"{path}: truncated while reading {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise DfiwError(f"{path}: bad magic")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != VERSION:
        raise DfiwError(f"{path}: unsupported version {version}")
    order = take(1, "channel order")[0]
    means = np.frombuffer(take(12, "means"), dtype="<f4").copy()
    count = struct.unpack("<I", take(4, "layer count"))[0]
    layers = []
    for i in range(count):
        name_len = struct.unpack("<H", take(2, f"name length {i}"))[0]
        name = take(name_len, f"name {i}").decode("utf-8")
        dims = struct.unpack("<4I", take(16, f"dims of {name}"))
        w = np.frombuffer(
            take(4 * int(np.prod(dims)), f"weights of {name}"), dtype="<f4"
        ).reshape(dims).copy()
        bias_len = struct.unpack("<I", take(4, f"bias length of {name}"))[0]
        b = np.frombuffer(take(4 * bias_len, f"bias of {name}"), dtype="<f4").copy()
        layers.append(ConvEntry(name, w, b))
    if pos != len(data):
        raise DfiwError(f"{path}: trailing bytes")
    return DfiwFile(order, means, layers)
