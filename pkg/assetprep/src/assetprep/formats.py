"""Writers and readers for the S2FW / S2FM binary formats.

These are this tool's half of the interchange contract: the trainer on
the consuming side has its own independent reader and writer, and the
parity tests hold the two implementations against each other. Layouts,
both little-endian, rejected on truncation or trailing bytes:

S2FW: "S2FW", u32 version, u32 n_layers, then per layer a u8 kind and
  kind 0 (conv): u32 out,in,kh,kw,stride,pad; f32 weights (OIHW), f32 biases
  kind 1 (relu): nothing
  kind 2 (avgpool): u32 window size
S2FM: "S2FM", u32 version, u32 h, u32 w, u32 c, f32 values row-major
  channel-minor.
"""

import io
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ContractViolation, FormatError
from .images import write_bytes

WEIGHTS_MAGIC = b"S2FW"
FEATURES_MAGIC = b"S2FM"
FORMAT_VERSION = 1

_KIND_CONV = 0
_KIND_RELU = 1
_KIND_POOL = 2


@dataclass
class Conv:
    weight: np.ndarray  # (out,in,kh,kw) float32
    bias: np.ndarray  # (out,) float32
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float32)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float32)
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ContractViolation("conv weight must be (out,in,kh,kw) with matching bias")
        if self.stride < 1 or self.pad < 0:
            raise ContractViolation("conv stride must be >= 1 and pad >= 0")


@dataclass
class Relu:
    pass


@dataclass
class Pool:
    size: int = 2

    def __post_init__(self):
        if self.size < 1:
            raise ContractViolation("pool size must be >= 1")


Layer = Union[Conv, Relu, Pool]


def write_weights(layers, path) -> None:
    """Serialize a conv/relu/avgpool chain to an S2FW file."""
    if not layers:
        raise ContractViolation("weight chain is empty")
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(layers)))
    for layer in layers:
        if isinstance(layer, Conv):
            o, i, kh, kw = layer.weight.shape
            buf.write(struct.pack("<BIIIIII", _KIND_CONV, o, i, kh, kw, layer.stride, layer.pad))
            buf.write(layer.weight.astype("<f4").tobytes())
            buf.write(layer.bias.astype("<f4").tobytes())
        elif isinstance(layer, Relu):
            buf.write(struct.pack("<B", _KIND_RELU))
        else:
            buf.write(struct.pack("<BI", _KIND_POOL, layer.size))
    write_bytes(path, buf.getvalue())


def _take(f, n: int, what: str) -> bytes:
    chunk = f.read(n)
    if len(chunk) != n:
        raise FormatError(f"weight file truncated while reading {what}")
    return chunk


def read_weights(path) -> list:
    """Parse an S2FW file back into a layer chain."""
    layers = []
    with open(path, "rb") as f:
        if _take(f, 4, "magic") != WEIGHTS_MAGIC:
            raise FormatError("bad magic, not a weight file")
        version, n_layers = struct.unpack("<II", _take(f, 8, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported weight file version {version}")
        for li in range(n_layers):
            (kind,) = struct.unpack("<B", _take(f, 1, f"layer {li} kind"))
            if kind == _KIND_CONV:
                o, i, kh, kw, stride, pad = struct.unpack(
                    "<IIIIII", _take(f, 24, f"layer {li} conv shape")
                )
                w = np.frombuffer(
                    _take(f, 4 * o * i * kh * kw, f"layer {li} weights"), dtype="<f4"
                ).reshape(o, i, kh, kw)
                b = np.frombuffer(_take(f, 4 * o, f"layer {li} biases"), dtype="<f4")
                layers.append(Conv(w.copy(), b.copy(), int(stride), int(pad)))
            elif kind == _KIND_RELU:
                layers.append(Relu())
            elif kind == _KIND_POOL:
                (size,) = struct.unpack("<I", _take(f, 4, f"layer {li} pool size"))
                layers.append(Pool(int(size)))
            else:
                raise FormatError(f"unknown layer kind {kind} at layer {li}")
        if f.read(1):
            raise FormatError("trailing bytes after weight payload")
    return layers


def write_features(values, path) -> None:
    """(H,W,C) float array -> S2FM file."""
    values = np.ascontiguousarray(values, dtype=np.float32)
    if values.ndim != 3:
        raise ContractViolation(f"feature map must be (H,W,C), got {values.shape}")
    h, w, c = values.shape
    buf = io.BytesIO()
    buf.write(FEATURES_MAGIC)
    buf.write(struct.pack("<IIII", FORMAT_VERSION, h, w, c))
    buf.write(values.astype("<f4").tobytes())
    write_bytes(path, buf.getvalue())


def read_features(path) -> np.ndarray:
    """S2FM file -> (H,W,C) float32."""
    with open(path, "rb") as f:
        if _take(f, 4, "magic") != FEATURES_MAGIC:
            raise FormatError("bad magic, not a feature file")
        version, h, w, c = struct.unpack("<IIII", _take(f, 16, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported feature file version {version}")
        vals = np.frombuffer(_take(f, 4 * h * w * c, "values"), dtype="<f4")
        if f.read(1):
            raise FormatError("trailing bytes after feature payload")
    return vals.reshape(h, w, c).copy()


__all__ = [
    "Conv",
    "Relu",
    "Pool",
    "Layer",
    "write_weights",
    "read_weights",
    "write_features",
    "read_features",
    "WEIGHTS_MAGIC",
    "FEATURES_MAGIC",
    "FORMAT_VERSION",
]
