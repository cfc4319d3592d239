"""Binary weight files.

Layout (all integers little-endian)::

    b"SMLW"                   magic
    u16 version               currently 1
    u16 layer count
    u8 rank, u32 * rank       network input shape
    per layer:
        u8  kind tag
        u8  rank, u32 * rank  layer configuration extents
        f64 * n               parameters (weight then bias, row-major)

The configuration extents are ``(in, out, kernel, stride, padding)`` for
Conv2D, ``(window, stride)`` for MaxPool, ``(in, out)`` for Dense and empty
for the parameter-free layers.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .layers import Conv2D, Dense, Flatten, GlobalAvgPool, MaxPool2D, ReLU, ShapeError
from .network import Network

MAGIC = b"SMLW"
VERSION = 1

KIND_TAGS = {Conv2D: 1, ReLU: 2, MaxPool2D: 3, GlobalAvgPool: 4, Flatten: 5, Dense: 6}
_TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


class WeightFileError(ValueError):
    pass


def _extents(layer):
    if isinstance(layer, Conv2D):
        return (layer.in_channels, layer.out_channels, layer.kernel_size, layer.stride, layer.padding)
    if isinstance(layer, MaxPool2D):
        return (layer.window, layer.stride)
    if isinstance(layer, Dense):
        return (layer.in_features, layer.out_features)
    return ()


def dumps(network):
    out = [MAGIC, struct.pack("<HH", VERSION, len(network.layers))]
    shape = network.input_shape
    out.append(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
    for layer, params in zip(network.layers, network.params):
        ext = _extents(layer)
        out.append(struct.pack(f"<BB{len(ext)}I", KIND_TAGS[type(layer)], len(ext), *ext))
        for name in layer.param_shapes():
            out.append(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return b"".join(out)


def save_weights(network, path):
    Path(path).write_bytes(dumps(network))


class _Reader:
    def __init__(self, data, source):
        self.data, self.pos, self.source = data, 0, source

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise WeightFileError(f"{self.source}: truncated file at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def floats(self, count):
        size = 8 * count
        if self.pos + size > len(self.data):
            raise WeightFileError(
                f"{self.source}: truncated parameter payload at byte {self.pos} "
                f"(need {size} bytes, {len(self.data) - self.pos} left)"
            )
        arr = np.frombuffer(self.data, dtype="<f8", count=count, offset=self.pos).astype(np.float64)
        self.pos += size
        return arr


def loads(data, source="<bytes>"):
    r = _Reader(bytes(data), source)
    if len(data) < 4 or data[:4] != MAGIC:
        raise WeightFileError(f"{source}: bad magic {bytes(data[:4])!r}, expected {MAGIC!r}")
    r.pos = 4
    version, n_layers = r.take("<HH")
    if version != VERSION:
        raise WeightFileError(f"{source}: unsupported format version {version}")
    (rank,) = r.take("<B")
    input_shape = r.take(f"<{rank}I")
    layers, params = [], []
    for i in range(n_layers):
        tag, rank = r.take("<BB")
        if tag not in _TAG_KINDS:
            raise WeightFileError(f"{source}: unknown layer kind tag {tag} for layer {i}")
        ext = r.take(f"<{rank}I")
        try:
            layer = _TAG_KINDS[tag](*ext)
        except (TypeError, ValueError) as exc:
            raise WeightFileError(f"{source}: layer {i} has invalid extents {ext}: {exc}") from None
        p = {}
        for name, shape in layer.param_shapes().items():
            p[name] = r.floats(int(np.prod(shape))).reshape(shape)
        layers.append(layer)
        params.append(p)
    if r.pos != len(r.data):
        raise WeightFileError(
            f"{source}: {len(r.data) - r.pos} trailing bytes after layer {n_layers - 1}; header does not match payload"
        )
    try:
        return Network(tuple(layers), tuple(params), tuple(input_shape))
    except (ShapeError, ValueError) as exc:
        raise WeightFileError(f"{source}: header describes an inconsistent network: {exc}") from None


def load_weights(path):
    path = Path(path)
    return loads(path.read_bytes(), source=str(path))
