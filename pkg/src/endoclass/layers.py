"""Minimal CNN layer zoo in numpy with explicit forward/backward passes.

Every layer caches what its backward pass needs only when called with
``train=True``; evaluation-mode forwards keep no state beyond batch-norm
running statistics.  Gradients accumulate into ``Param.grad`` so a whole
model can be backpropagated once per batch and stepped by the optimizer.

All math is float64: desk-scale models are small enough that the extra
precision is free, and it keeps finite-difference gradient checks tight.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeMismatch


class Param:
    """A named trainable array with an accumulated gradient."""

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name}, shape={self.data.shape})"


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int,
            pad_value: float = 0.0):
    """Unfold (B,C,H,W) into (B, C*kh*kw, OH*OW) patches."""
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                   mode="constant", constant_values=pad_value)
    hp, wp = x.shape[2], x.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"input {h}x{w} too small for {kh}x{kw}/{stride} window")
    s0, s1, s2, s3 = x.strides
    windows = as_strided(
        x, shape=(b, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    cols = windows.reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int):
    """Scatter-add (B, C*kh*kw, OH*OW) patch grads back onto (B,C,H,W)."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    dcols = dcols.reshape(b, c, kh, kw, oh, ow)
    dx = np.zeros((b, c, hp, wp), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx


class Layer:
    """Base layer: subclasses implement forward/backward and list params."""

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list:
        return []

    def buffers(self) -> list:
        """(name, array) pairs of non-trainable state (batch-norm stats)."""
        return []


class Conv2d(Layer):
    def __init__(self, name: str, in_channels: int, out_channels: int,
                 kernel_size: int, stride: int = 1, pad: int = 0,
                 bias: bool = False, rng: np.random.Generator = None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.stride = stride
        self.pad = pad
        fan_in = in_channels * kernel_size * kernel_size
        if rng is None:
            rng = np.random.default_rng(0)
        self.weight = Param(f"{name}.weight",
                            he_uniform(rng, (out_channels, in_channels,
                                             kernel_size, kernel_size), fan_in))
        self.bias = Param(f"{name}.bias", np.zeros(out_channels)) if bias else None
        self._cache = None

    def forward(self, x, train):
        if x.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"{self.weight.name}: expected {self.in_channels} input "
                f"channels, got {x.shape[1]}")
        cols, oh, ow = _im2col(x, self.k, self.k, self.stride, self.pad)
        w2d = self.weight.data.reshape(self.out_channels, -1)
        out = np.matmul(w2d, cols)                       # (B, F, OH*OW)
        if self.bias is not None:
            out += self.bias.data[None, :, None]
        out = out.reshape(x.shape[0], self.out_channels, oh, ow)
        self._cache = (cols, x.shape) if train else None
        return out

    def backward(self, dout):
        cols, x_shape = self._cache
        b = dout.shape[0]
        dout2d = dout.reshape(b, self.out_channels, -1)
        w2d = self.weight.data.reshape(self.out_channels, -1)
        self.weight.grad += np.einsum("bfl,bkl->fk", dout2d, cols).reshape(
            self.weight.data.shape)
        if self.bias is not None:
            self.bias.grad += dout2d.sum(axis=(0, 2))
        dcols = np.matmul(w2d.T, dout2d)                 # (B, C*k*k, OH*OW)
        self._cache = None
        return _col2im(dcols, x_shape, self.k, self.k, self.stride, self.pad)

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class BatchNorm2d(Layer):
    """Per-channel batch normalization with running statistics."""

    def __init__(self, name: str, channels: int, momentum: float = 0.1,
                 eps: float = 1e-5):
        self.name = name
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Param(f"{name}.gamma", np.ones(channels))
        self.beta = Param(f"{name}.beta", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._cache = None

    def forward(self, x, train):
        if x.shape[1] != self.channels:
            raise ShapeMismatch(f"{self.name}: expected {self.channels} "
                                f"channels, got {x.shape[1]}")
        if train:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))                  # biased, used to normalize
            unbiased = var * n / max(n - 1, 1)
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mean)
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * unbiased)
        else:
            mean = self.running_mean
            var = self.running_var
        istd = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * istd[None, :, None, None]
        out = (self.gamma.data[None, :, None, None] * xhat
               + self.beta.data[None, :, None, None])
        self._cache = (xhat, istd) if train else None
        return out

    def backward(self, dout):
        xhat, istd = self._cache
        n = dout.shape[0] * dout.shape[2] * dout.shape[3]
        dbeta = dout.sum(axis=(0, 2, 3))
        dgamma = (dout * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dbeta
        self.gamma.grad += dgamma
        coeff = (self.gamma.data * istd / n)[None, :, None, None]
        dx = coeff * (n * dout
                      - dbeta[None, :, None, None]
                      - xhat * dgamma[None, :, None, None])
        self._cache = None
        return dx

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]

    def set_buffers(self, running_mean, running_var):
        self.running_mean = np.asarray(running_mean, dtype=np.float64).copy()
        self.running_var = np.asarray(running_var, dtype=np.float64).copy()


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x, train):
        self._mask = (x > 0) if train else None
        return np.maximum(x, 0.0)

    def backward(self, dout):
        dx = dout * self._mask
        self._mask = None
        return dx


class MaxPool2d(Layer):
    """Max pooling; padded positions are -inf so they never win."""

    def __init__(self, kernel_size: int, stride: int, pad: int = 0):
        self.k = kernel_size
        self.stride = stride
        self.pad = pad
        self._cache = None

    def forward(self, x, train):
        cols, oh, ow = _im2col(x, self.k, self.k, self.stride, self.pad,
                               pad_value=-np.inf)
        b, c = x.shape[0], x.shape[1]
        windows = cols.reshape(b, c, self.k * self.k, oh * ow)
        argmax = windows.argmax(axis=2)
        out = np.take_along_axis(windows, argmax[:, :, None, :], axis=2)
        out = out[:, :, 0, :].reshape(b, c, oh, ow)
        self._cache = (argmax, x.shape, oh, ow) if train else None
        return out

    def backward(self, dout):
        argmax, x_shape, oh, ow = self._cache
        b, c, h, w = x_shape
        hp, wp = h + 2 * self.pad, w + 2 * self.pad
        dx = np.zeros((b, c, hp, wp), dtype=np.float64)
        # Recover padded input coordinates from window-local argmax.
        l_idx = np.arange(oh * ow)
        ih = (argmax // self.k) + (l_idx // ow)[None, None, :] * self.stride
        iw = (argmax % self.k) + (l_idx % ow)[None, None, :] * self.stride
        b_idx = np.arange(b)[:, None, None]
        c_idx = np.arange(c)[None, :, None]
        np.add.at(dx, (b_idx, c_idx, ih, iw), dout.reshape(b, c, -1))
        if self.pad:
            dx = dx[:, :, self.pad:-self.pad, self.pad:-self.pad]
        self._cache = None
        return dx


class AvgPool2d(Layer):
    """Non-overlapping average pooling; H and W must divide by the kernel."""

    def __init__(self, kernel_size: int):
        self.k = kernel_size
        self._in_shape = None

    def forward(self, x, train):
        b, c, h, w = x.shape
        if h % self.k or w % self.k:
            raise ShapeMismatch(f"avg pool {self.k}x{self.k} needs divisible "
                                f"spatial dims, got {h}x{w}")
        self._in_shape = x.shape
        return x.reshape(b, c, h // self.k, self.k, w // self.k, self.k).mean(axis=(3, 5))

    def backward(self, dout):
        b, c, h, w = self._in_shape
        scale = 1.0 / (self.k * self.k)
        dx = np.repeat(np.repeat(dout, self.k, axis=2), self.k, axis=3) * scale
        self._in_shape = None
        return dx


class GlobalAvgPool(Layer):
    """(B,C,H,W) -> (B,C) spatial mean."""

    def __init__(self):
        self._in_shape = None

    def forward(self, x, train):
        self._in_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        b, c, h, w = self._in_shape
        dx = np.broadcast_to(dout[:, :, None, None], (b, c, h, w)) / (h * w)
        self._in_shape = None
        return np.ascontiguousarray(dx)


class Linear(Layer):
    def __init__(self, name: str, in_features: int, out_features: int,
                 rng: np.random.Generator = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_features = in_features
        self.weight = Param(f"{name}.weight",
                            he_uniform(rng, (out_features, in_features), in_features))
        self.bias = Param(f"{name}.bias", np.zeros(out_features))
        self._x = None

    def forward(self, x, train):
        if x.shape[1] != self.in_features:
            raise ShapeMismatch(f"{self.weight.name}: expected {self.in_features} "
                                f"features, got {x.shape[1]}")
        self._x = x if train else None
        return x @ self.weight.data.T + self.bias.data

    def backward(self, dout):
        self.weight.grad += dout.T @ self._x
        self.bias.grad += dout.sum(axis=0)
        dx = dout @ self.weight.data
        self._x = None
        return dx

    def params(self):
        return [self.weight, self.bias]


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def buffers(self):
        out = []
        for layer in self.layers:
            out.extend(layer.buffers())
        return out
