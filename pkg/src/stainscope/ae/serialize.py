"""Binary model files.

Layout (all integers little-endian):

    magic   4 bytes  b"SAE1"
    version u16      currently 1
    nlayers u16
    then per layer a kind tag (u8) followed by its payload:

    kind 0  Conv2d           u32 c_out, c_in, k, k, stride, padding;
                             weight then bias as raw float32
    kind 1  ConvTranspose2d  u32 c_in, c_out, k, k, stride, padding,
                             output_padding; weight then bias
    kind 2  BatchNorm2d      u32 num_features; f64 momentum, eps;
                             gamma, beta, running_mean, running_var
    kind 3  LeakyReLU        f64 negative_slope
    kind 4  Sigmoid          (no payload)

Anything that does not parse exactly raises :class:`CorruptModelError`.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import CorruptModelError
from .layers import Autoencoder, BatchNorm2d, Conv2d, ConvTranspose2d, LeakyReLU, Sigmoid

MAGIC = b"SAE1"
VERSION = 1

_KINDS = {Conv2d: 0, ConvTranspose2d: 1, BatchNorm2d: 2, LeakyReLU: 3, Sigmoid: 4}


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_model(path, model: Autoencoder) -> None:
    """Write a model to ``path`` in the SAE1 format."""
    chunks = [MAGIC, struct.pack("<HH", VERSION, len(model.layers))]
    for layer in model.layers:
        kind = _KINDS.get(type(layer))
        if kind is None:
            raise CorruptModelError(f"cannot serialize layer type {type(layer).__name__}")
        chunks.append(struct.pack("<B", kind))
        if kind == 0:
            chunks.append(
                struct.pack(
                    "<6I",
                    layer.out_channels,
                    layer.in_channels,
                    layer.kernel_size,
                    layer.kernel_size,
                    layer.stride,
                    layer.padding,
                )
            )
            chunks.append(_f32_bytes(layer.w))
            chunks.append(_f32_bytes(layer.b))
        elif kind == 1:
            chunks.append(
                struct.pack(
                    "<7I",
                    layer.in_channels,
                    layer.out_channels,
                    layer.kernel_size,
                    layer.kernel_size,
                    layer.stride,
                    layer.padding,
                    layer.output_padding,
                )
            )
            chunks.append(_f32_bytes(layer.w))
            chunks.append(_f32_bytes(layer.b))
        elif kind == 2:
            chunks.append(struct.pack("<I", layer.num_features))
            chunks.append(struct.pack("<2d", layer.momentum, layer.eps))
            for arr in (layer.gamma, layer.beta, layer.running_mean, layer.running_var):
                chunks.append(_f32_bytes(arr))
        elif kind == 3:
            chunks.append(struct.pack("<d", layer.negative_slope))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptModelError("model file is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f32(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def load_model(path) -> Autoencoder:
    """Read a model written by :func:`save_model`."""
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4) != MAGIC:
        raise CorruptModelError(f"{path}: bad magic, not a model file")
    version, nlayers = rd.unpack("<HH")
    if version != VERSION:
        raise CorruptModelError(f"{path}: unsupported model version {version}")
    layers = []
    for _ in range(nlayers):
        (kind,) = rd.unpack("<B")
        if kind == 0:
            co, ci, kh, kw, stride, padding = rd.unpack("<6I")
            if kh != kw:
                raise CorruptModelError(f"{path}: non-square kernel {kh}x{kw}")
            layer = Conv2d(ci, co, kh, stride, padding)
            layer.w = rd.f32((co, ci, kh, kw))
            layer.b = rd.f32((co,))
        elif kind == 1:
            ci, co, kh, kw, stride, padding, outp = rd.unpack("<7I")
            if kh != kw:
                raise CorruptModelError(f"{path}: non-square kernel {kh}x{kw}")
            layer = ConvTranspose2d(ci, co, kh, stride, padding, outp)
            layer.w = rd.f32((ci, co, kh, kw))
            layer.b = rd.f32((co,))
        elif kind == 2:
            (nf,) = rd.unpack("<I")
            momentum, eps = rd.unpack("<2d")
            layer = BatchNorm2d(nf, momentum=momentum, eps=eps)
            layer.gamma = rd.f32((nf,))
            layer.beta = rd.f32((nf,))
            layer.running_mean = rd.f32((nf,))
            layer.running_var = rd.f32((nf,))
        elif kind == 3:
            (slope,) = rd.unpack("<d")
            layer = LeakyReLU(slope)
        elif kind == 4:
            layer = Sigmoid()
        else:
            raise CorruptModelError(f"{path}: unknown layer kind {kind}")
        layers.append(layer)
    if rd.pos != len(rd.data):
        raise CorruptModelError(f"{path}: {len(rd.data) - rd.pos} trailing bytes")
    return Autoencoder(layers)
