"""Differentiable layer kernels.

Every layer works on batched, channels-first float64 arrays: a spatial
activation has shape ``(N, C, H, W)`` and a flat one ``(N, F)``. Layers are
immutable descriptions; parameters live outside them (see
:class:`saliencykit.network.Network`) so the same layer can be evaluated
against several parameter sets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when an array does not have the shape a layer expects."""


def _positive(name, value):
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")


def softmax(logits):
    """Numerically stable softmax over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0 or logits.shape[-1] == 0:
        raise ValueError("softmax of an empty vector is undefined")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class Conv2D:
    """2-D cross-correlation with zero padding."""

    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0

    kind: ClassVar[str] = "conv2d"
    spatial: ClassVar[bool] = True

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_size", "stride"):
            _positive(name, getattr(self, name))
        if int(self.padding) != self.padding or self.padding < 0:
            raise ValueError(f"padding must be a non-negative integer, got {self.padding!r}")

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ShapeError(
                f"Conv2D expects ({self.in_channels}, H, W) input, got {tuple(shape)}"
            )
        _, h, w = shape
        hp, wp = h + 2 * self.padding, w + 2 * self.padding
        if self.kernel_size > min(hp, wp):
            raise ShapeError(
                f"Conv2D kernel {self.kernel_size} exceeds padded input {hp}x{wp}"
            )
        return (
            self.out_channels,
            (hp - self.kernel_size) // self.stride + 1,
            (wp - self.kernel_size) // self.stride + 1,
        )

    def param_shapes(self):
        k = self.kernel_size
        return {
            "weight": (self.out_channels, self.in_channels, k, k),
            "bias": (self.out_channels,),
        }

    @property
    def fan_in(self):
        return self.in_channels * self.kernel_size**2

    def _windows(self, x):
        p, s = self.padding, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (self.kernel_size, self.kernel_size), axis=(2, 3))
        return win[:, :, ::s, ::s]  # (N, C, Ho, Wo, k, k)

    def forward(self, x, params):
        cols = self._windows(x)
        out = np.tensordot(cols, params["weight"], axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2)
        return out + params["bias"][None, :, None, None]

    def backward(self, x, out, params, grad_out, need_params=True, need_input=True):
        k, s, p = self.kernel_size, self.stride, self.padding
        n, _, ho, wo = grad_out.shape
        grads = None
        if need_params:
            cols = self._windows(x)
            grads = {
                "weight": np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3])),
                "bias": grad_out.sum(axis=(0, 2, 3)),
            }
        if not need_input:
            return None, grads
        dcols = np.tensordot(grad_out, params["weight"], axes=([1], [0]))  # (N,Ho,Wo,C,k,k)
        h, w = x.shape[2], x.shape[3]
        dxp = np.zeros((n, self.in_channels, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp, grads


@dataclass(frozen=True)
class ReLU:
    kind: ClassVar[str] = "relu"
    spatial: ClassVar[bool] = False

    def output_shape(self, shape):
        return tuple(shape)

    def param_shapes(self):
        return {}

    def forward(self, x, params=None):
        return np.maximum(x, 0.0)

    def backward(self, x, out, params, grad_out, need_params=True, need_input=True):
        # subgradient at exactly 0 is 0
        return np.where(x > 0.0, grad_out, 0.0), None


@dataclass(frozen=True)
class MaxPool2D:
    """Max pooling; ties route the gradient to the first maximum in row-major order."""

    window: int
    stride: int | None = None

    kind: ClassVar[str] = "maxpool"
    spatial: ClassVar[bool] = True

    def __post_init__(self):
        _positive("window", self.window)
        if self.stride is None:
            object.__setattr__(self, "stride", self.window)
        _positive("stride", self.stride)

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"MaxPool expects (C, H, W) input, got {tuple(shape)}")
        c, h, w = shape
        if self.window > min(h, w):
            raise ShapeError(f"MaxPool window {self.window} exceeds input {h}x{w}")
        return (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)

    def param_shapes(self):
        return {}

    def _windows(self, x):
        win = sliding_window_view(x, (self.window, self.window), axis=(2, 3))
        return win[:, :, :: self.stride, :: self.stride]

    def forward(self, x, params=None):
        return self._windows(x).max(axis=(4, 5))

    def backward(self, x, out, params, grad_out, need_params=True, need_input=True):
        k, s = self.window, self.stride
        win = self._windows(x)
        n, c, ho, wo = win.shape[:4]
        first = win.reshape(n, c, ho, wo, k * k).argmax(axis=-1)
        dx = np.zeros_like(x)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dx[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += np.where(
                first == idx, grad_out, 0.0
            )
        return dx, None


@dataclass(frozen=True)
class GlobalAvgPool:
    """Per-channel spatial mean, ``g_k = (1/Z) sum_ij A_k[i, j]``."""

    kind: ClassVar[str] = "gap"
    spatial: ClassVar[bool] = False

    def output_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"GlobalAvgPool expects (C, H, W) input, got {tuple(shape)}")
        return (shape[0],)

    def param_shapes(self):
        return {}

    def forward(self, x, params=None):
        return x.mean(axis=(2, 3))

    def backward(self, x, out, params, grad_out, need_params=True, need_input=True):
        z = x.shape[2] * x.shape[3]
        return np.broadcast_to((grad_out / z)[:, :, None, None], x.shape).copy(), None


@dataclass(frozen=True)
class Flatten:
    kind: ClassVar[str] = "flatten"
    spatial: ClassVar[bool] = False

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def param_shapes(self):
        return {}

    def forward(self, x, params=None):
        return x.reshape(x.shape[0], -1)

    def backward(self, x, out, params, grad_out, need_params=True, need_input=True):
        return grad_out.reshape(x.shape), None


@dataclass(frozen=True)
class Dense:
    """Affine map ``y = W x + b`` with ``W`` of shape ``(out_features, in_features)``."""

    in_features: int
    out_features: int

    kind: ClassVar[str] = "dense"
    spatial: ClassVar[bool] = False

    def __post_init__(self):
        _positive("in_features", self.in_features)
        _positive("out_features", self.out_features)

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.in_features:
            raise ShapeError(
                f"Dense expects ({self.in_features},) input, got {tuple(shape)}"
            )
        return (self.out_features,)

    def param_shapes(self):
        return {
            "weight": (self.out_features, self.in_features),
            "bias": (self.out_features,),
        }

    @property
    def fan_in(self):
        return self.in_features

    def forward(self, x, params):
        return x @ params["weight"].T + params["bias"]

    def backward(self, x, out, params, grad_out, need_params=True, need_input=True):
        grads = None
        if need_params:
            grads = {"weight": grad_out.T @ x, "bias": grad_out.sum(axis=0)}
        return grad_out @ params["weight"], grads


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, ReLU, MaxPool2D, GlobalAvgPool, Flatten, Dense)}


def layer_forward(layer, x, params=None):
    """Apply one layer to a single, unbatched input.

    Raises :class:`ShapeError` when ``x`` does not fit the layer.
    """
    x = np.asarray(x, dtype=np.float64)
    layer.output_shape(x.shape)
    return layer.forward(x[None], params)[0]
