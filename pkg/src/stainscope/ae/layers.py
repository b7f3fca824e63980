"""Layer objects and the reconstruction autoencoder built from them.

Layers cache whatever their backward pass needs during ``forward`` and
release it again after ``backward``.  Parameters and gradients are exposed
as ordered ``(name, array)`` pairs so the optimizer and the serializer can
walk a model without knowing layer internals.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from ..imaging import PATCH_SIZE
from . import tensorops as T


class Layer:
    """Base class; parameter-free layers inherit the empty dicts."""

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _he_init(shape, fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    # He/Kaiming normal, fan-in mode: suits the LeakyReLU blocks.
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Conv2d(Layer):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: int = 0,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if rng is None:
            self.w = np.zeros(shape, dtype=dtype)
        else:
            self.w = _he_init(shape, in_channels * kernel_size**2, rng, dtype)
        self.b = np.zeros(out_channels, dtype=dtype)
        self.dw = None
        self.db = None
        self._x = None

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}

    def forward(self, x, training):
        if training:
            self._x = x
        return T.conv2d(x, self.w, self.b, self.stride, self.padding)

    def backward(self, dout):
        dx, self.dw, self.db = T.conv2d_backward(dout, self._x, self.w, self.stride, self.padding)
        self._x = None
        return dx


class ConvTranspose2d(Layer):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: int = 0,
        output_padding: int = 0,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        shape = (in_channels, out_channels, kernel_size, kernel_size)
        if rng is None:
            self.w = np.zeros(shape, dtype=dtype)
        else:
            self.w = _he_init(shape, in_channels * kernel_size**2, rng, dtype)
        self.b = np.zeros(out_channels, dtype=dtype)
        self.dw = None
        self.db = None
        self._x = None

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}

    def forward(self, x, training):
        if training:
            self._x = x
        return T.transposed_conv2d(
            x, self.w, self.b, self.stride, self.padding, self.output_padding
        )

    def backward(self, dout):
        dx, self.dw, self.db = T.transposed_conv2d_backward(
            dout, self._x, self.w, self.stride, self.padding, self.output_padding
        )
        self._x = None
        return dx


class BatchNorm2d(Layer):
    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(num_features, dtype=dtype)
        self.beta = np.zeros(num_features, dtype=dtype)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.dgamma = None
        self.dbeta = None
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.dgamma, "beta": self.dbeta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, training):
        out, cache = T.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training,
            self.momentum,
            self.eps,
        )
        self._cache = cache if training else None
        return out

    def backward(self, dout):
        if self._cache is None:
            raise InvalidInputError("backward called without a training forward pass")
        dx, self.dgamma, self.dbeta = T.batch_norm_backward(dout, self._cache)
        self._cache = None
        return dx


class LeakyReLU(Layer):
    def __init__(self, negative_slope: float = 0.01):
        self.negative_slope = negative_slope
        self._neg = None

    def forward(self, x, training):
        if training:
            self._neg = x < 0
        return T.leaky_relu(x, self.negative_slope)

    def backward(self, dout):
        slope = np.asarray(self.negative_slope, dtype=dout.dtype)
        dx = np.where(self._neg, dout * slope, dout)
        self._neg = None
        return dx


class Sigmoid(Layer):
    def __init__(self):
        self._y = None

    def forward(self, x, training):
        y = T.sigmoid(x)
        if training:
            self._y = y
        return y

    def backward(self, dout):
        dx = T.sigmoid_backward(dout, self._y)
        self._y = None
        return dx


class Autoencoder:
    """A plain layer stack trained to reproduce its input."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out.append((f"{i}.{type(layer).__name__}.{name}", arr))
        return out

    def named_grads(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.grads().items():
                out.append((f"{i}.{type(layer).__name__}.{name}", arr))
        return out

    def state_arrays(self) -> list[np.ndarray]:
        arrs = []
        for layer in self.layers:
            arrs.extend(layer.params().values())
            arrs.extend(layer.buffers().values())
        return arrs

    def snapshot(self) -> list[np.ndarray]:
        return [a.copy() for a in self.state_arrays()]

    def restore(self, snapshot: list[np.ndarray]) -> None:
        for arr, saved in zip(self.state_arrays(), snapshot, strict=True):
            arr[...] = saved


ENCODER_CHANNELS = (32, 64, 64)
ENCODER_STRIDES = (1, 2, 2)
KERNEL_SIZE = 3


def latent_size(patch_size: int = PATCH_SIZE) -> int:
    """Number of latent elements the encoder produces for a square input."""
    extent = patch_size
    for stride in ENCODER_STRIDES:
        extent = T.conv2d_output_shape(extent, KERNEL_SIZE, stride, KERNEL_SIZE // 2)
    return ENCODER_CHANNELS[-1] * extent * extent


def build_autoencoder(
    seed: int = 0,
    negative_slope: float = 0.01,
    dtype=np.float32,
) -> Autoencoder:
    """Construct the shallow convolutional autoencoder.

    Encoder: three conv+BN+LeakyReLU blocks with channels (32, 64, 64) and
    strides (1, 2, 2).  Decoder: two transposed-conv blocks undoing the
    downsampling, then a 3-channel conv with a sigmoid.  The latent tensor is
    intentionally at least as large as the input (no bottleneck): anomaly
    signal comes from what the filters learned to pass, not from capacity.
    """
    if latent_size() < 3 * PATCH_SIZE * PATCH_SIZE:
        raise AssertionError("autoencoder latent must not be smaller than its input")
    rng = np.random.default_rng(seed)
    k, p = KERNEL_SIZE, KERNEL_SIZE // 2
    c1, c2, c3 = ENCODER_CHANNELS
    s1, s2, s3 = ENCODER_STRIDES
    layers: list[Layer] = [
        Conv2d(3, c1, k, s1, p, rng=rng, dtype=dtype),
        BatchNorm2d(c1, dtype=dtype),
        LeakyReLU(negative_slope),
        Conv2d(c1, c2, k, s2, p, rng=rng, dtype=dtype),
        BatchNorm2d(c2, dtype=dtype),
        LeakyReLU(negative_slope),
        Conv2d(c2, c3, k, s3, p, rng=rng, dtype=dtype),
        BatchNorm2d(c3, dtype=dtype),
        LeakyReLU(negative_slope),
        ConvTranspose2d(c3, c2, k, s3, p, output_padding=s3 - 1, rng=rng, dtype=dtype),
        BatchNorm2d(c2, dtype=dtype),
        LeakyReLU(negative_slope),
        ConvTranspose2d(c2, c1, k, s2, p, output_padding=s2 - 1, rng=rng, dtype=dtype),
        BatchNorm2d(c1, dtype=dtype),
        LeakyReLU(negative_slope),
        Conv2d(c1, 3, k, 1, p, rng=rng, dtype=dtype),
        Sigmoid(),
    ]
    return Autoencoder(layers)


def patches_to_batch(images, dtype=np.float32) -> np.ndarray:
    """Stack uint8 HWC patch images into a (n, 3, h, w) float batch in [0, 1]."""
    arr = np.stack([np.asarray(im) for im in images])
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise InvalidInputError(f"expected (n, h, w, 3) patches, got {arr.shape}")
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2)).astype(dtype) / np.asarray(
        255.0, dtype=dtype
    )


def batch_to_images(batch: np.ndarray) -> np.ndarray:
    """Quantize a (n, 3, h, w) float batch in [0, 1] back to uint8 HWC images."""
    arr = np.clip(batch, 0.0, 1.0).transpose(0, 2, 3, 1)
    return np.round(arr * 255.0).astype(np.uint8)
