"""Dense layers with explicit forward/backward passes.

Every layer caches what its backward needs during a train-mode forward;
there is no autograd graph. Layers are built from plain-dict specs
(`build_layer`) so architectures round-trip through checkpoints.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Input shape incompatible with a layer's expectation."""


def _check_4d(x, layer):
    if x.ndim != 4:
        raise ShapeError(f"{layer} expects NCHW input, got shape {x.shape}")


class Layer:
    """Base layer: params/grads are name -> ndarray dicts of live arrays."""

    kind = "base"

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    def grads(self) -> dict:
        return {}

    def buffers(self) -> dict:
        """Non-trainable state (e.g. batch-norm running statistics)."""
        return {}

    def out_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def macs(self, in_shape: tuple) -> int:
        """Multiply-accumulate count for one sample of `in_shape` input."""
        return 0

    def spec(self) -> dict:
        return {"kind": self.kind}

    def _require_cache(self):
        if getattr(self, "_cache", None) is None:
            raise RuntimeError(
                f"{type(self).__name__}.backward called without a train-mode forward")
        return self._cache


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1,
                 padding=0, rng=None, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        k = kernel_size
        fan_in = in_channels * k * k
        if rng is None:
            w = np.zeros((out_channels, in_channels, k, k))
        else:
            # He init, suited to the conv-BN-ReLU stacks built here
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=(out_channels, in_channels, k, k))
        self.weight = w.astype(dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)
        self._grads = {}
        self._cache = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return self._grads

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(
                f"conv2d expects {self.in_channels} input channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d kernel {k} too large for input {in_shape}")
        return (self.out_channels, ho, wo)

    def macs(self, in_shape):
        co, ho, wo = self.out_shape(in_shape)
        k = self.kernel_size
        return self.in_channels * co * k * k * ho * wo

    def _im2col(self, x):
        k, s, p = self.kernel_size, self.stride, self.padding
        n, c, h, w = x.shape
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n_, c_, ho, wo = win.shape[:4]
        col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        return np.ascontiguousarray(col), (ho, wo)

    def forward(self, x, train=False):
        _check_4d(x, "conv2d")
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(
                f"conv2d expects {self.in_channels} input channels, got {c}"
                f" (input shape {x.shape})")
        col, (ho, wo) = self._im2col(x)
        wmat = self.weight.reshape(self.out_channels, -1)
        out = col @ wmat.T
        out += self.bias
        y = out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        if train:
            self._cache = (col, x.shape, (ho, wo))
        return np.ascontiguousarray(y)

    def backward(self, grad_out):
        col, xshape, (ho, wo) = self._require_cache()
        n, c, h, w = xshape
        k, s, p = self.kernel_size, self.stride, self.padding
        g = grad_out.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        self._grads = {
            "weight": (g.T @ col).reshape(self.weight.shape),
            "bias": g.sum(axis=0),
        }
        gcol = g @ self.weight.reshape(self.out_channels, -1)
        gcol = gcol.reshape(n, ho, wo, c, k, k)
        gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += \
                    gcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        self._cache = None
        return gxp[:, :, p:p + h, p:p + w] if p else gxp

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels,
                "kernel_size": self.kernel_size,
                "stride": self.stride, "padding": self.padding}


class BatchNorm2d(Layer):
    kind = "batchnorm2d"

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.weight = np.ones(channels, dtype=dtype)
        self.bias = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._grads = {}
        self._cache = None
        # When set (by BN adaptation), train-mode forwards append
        # (batch_mean, batch_var) here instead of updating running stats.
        self.stat_sink = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return self._grads

    def buffers(self):
        return {"running_mean": self.running_mean,
                "running_var": self.running_var}

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeError(
                f"batchnorm2d expects {self.channels} channels, got {in_shape[0]}")
        return in_shape

    def forward(self, x, train=False):
        _check_4d(x, "batchnorm2d")
        if x.shape[1] != self.channels:
            raise ShapeError(
                f"batchnorm2d expects {self.channels} channels, got shape {x.shape}")
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if self.stat_sink is not None:
                self.stat_sink.append((mean.copy(), var.copy()))
            else:
                m = self.momentum
                self.running_mean += m * (mean - self.running_mean)
                self.running_var += m * (var - self.running_var)
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = self.weight[None, :, None, None] * xhat + self.bias[None, :, None, None]
        if train:
            self._cache = (xhat, inv_std)
        return y

    def backward(self, grad_out):
        xhat, inv_std = self._require_cache()
        n, c, h, w = grad_out.shape
        m = n * h * w
        self._grads = {
            "weight": (grad_out * xhat).sum(axis=(0, 2, 3)),
            "bias": grad_out.sum(axis=(0, 2, 3)),
        }
        gxhat = grad_out * self.weight[None, :, None, None]
        sum_g = gxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gx = (inv_std[None, :, None, None] / m) * (
            m * gxhat - sum_g - xhat * sum_gx)
        self._cache = None
        return gx

    def spec(self):
        return {"kind": self.kind, "channels": self.channels,
                "eps": self.eps, "momentum": self.momentum}


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        self._cache = None

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, train=False):
        y = np.maximum(x, 0)
        if train:
            self._cache = x > 0
        return y

    def backward(self, grad_out):
        mask = self._require_cache()
        self._cache = None
        return grad_out * mask


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, kernel_size, stride=None):
        self.kernel_size = kernel_size
        self.stride = stride if stride is not None else kernel_size
        self._cache = None

    def out_shape(self, in_shape):
        c, h, w = in_shape
        k, s = self.kernel_size, self.stride
        if h < k or w < k:
            raise ShapeError(f"pool window {k} exceeds input {in_shape}")
        return (c, (h - k) // s + 1, (w - k) // s + 1)

    def _windows(self, x):
        k, s = self.kernel_size, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        return win.reshape(n, c, ho, wo, k * k), (ho, wo)

    def forward(self, x, train=False):
        _check_4d(x, "maxpool2d")
        flat, (ho, wo) = self._windows(x)
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if train:
            self._cache = (idx, x.shape)
        return y

    def backward(self, grad_out):
        idx, xshape = self._require_cache()
        n, c, h, w = xshape
        k, s = self.kernel_size, self.stride
        ho, wo = idx.shape[2], idx.shape[3]
        di, dj = np.divmod(idx, k)
        ni, ci, oi, oj = np.indices((n, c, ho, wo), sparse=False)
        gx = np.zeros(xshape, dtype=grad_out.dtype)
        np.add.at(gx, (ni, ci, oi * s + di, oj * s + dj), grad_out)
        self._cache = None
        return gx

    def spec(self):
        return {"kind": self.kind, "kernel_size": self.kernel_size,
                "stride": self.stride}


class AvgPool2d(Layer):
    kind = "avgpool2d"

    def __init__(self, kernel_size, stride=None):
        self.kernel_size = kernel_size
        self.stride = stride if stride is not None else kernel_size
        self._cache = None

    def out_shape(self, in_shape):
        c, h, w = in_shape
        k, s = self.kernel_size, self.stride
        if h < k or w < k:
            raise ShapeError(f"pool window {k} exceeds input {in_shape}")
        return (c, (h - k) // s + 1, (w - k) // s + 1)

    def forward(self, x, train=False):
        _check_4d(x, "avgpool2d")
        k, s = self.kernel_size, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        y = win.mean(axis=(-2, -1))
        if train:
            self._cache = x.shape
        return y

    def backward(self, grad_out):
        xshape = self._require_cache()
        k, s = self.kernel_size, self.stride
        ho, wo = grad_out.shape[2], grad_out.shape[3]
        g = grad_out / (k * k)
        gx = np.zeros(xshape, dtype=grad_out.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + s * ho:s, j:j + s * wo:s] += g
        self._cache = None
        return gx

    def spec(self):
        return {"kind": self.kind, "kernel_size": self.kernel_size,
                "stride": self.stride}


class Flatten(Layer):
    kind = "flatten"

    def __init__(self):
        self._cache = None

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        xshape = self._require_cache()
        self._cache = None
        return grad_out.reshape(xshape)


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            w = np.zeros((out_features, in_features))
        else:
            bound = np.sqrt(1.0 / in_features)
            w = rng.uniform(-bound, bound, size=(out_features, in_features))
        self.weight = w.astype(dtype)
        self.bias = np.zeros(out_features, dtype=dtype)
        self._grads = {}
        self._cache = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return self._grads

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ShapeError(
                f"linear expects ({self.in_features},) input, got {in_shape}")
        return (self.out_features,)

    def macs(self, in_shape):
        return self.in_features * self.out_features

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"linear expects (N, {self.in_features}) input, got {x.shape}")
        y = x @ self.weight.T + self.bias
        if train:
            self._cache = x
        return y

    def backward(self, grad_out):
        x = self._require_cache()
        self._grads = {"weight": grad_out.T @ x, "bias": grad_out.sum(axis=0)}
        self._cache = None
        return grad_out @ self.weight

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features,
                "out_features": self.out_features}


class ResidualBlock(Layer):
    """Two 3x3 conv-BN units with identity (or 1x1-projected) shortcut."""

    kind = "residual-block"

    def __init__(self, in_channels, out_channels, rng=None, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = Conv2d(in_channels, out_channels, 3, padding=1,
                            rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_channels, dtype=dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(out_channels, out_channels, 3, padding=1,
                            rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_channels, dtype=dtype)
        self.relu_out = ReLU()
        if in_channels != out_channels:
            self.proj = Conv2d(in_channels, out_channels, 1, rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm2d(out_channels, dtype=dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def _children(self):
        kids = {"conv1": self.conv1, "bn1": self.bn1, "conv2": self.conv2,
                "bn2": self.bn2}
        if self.proj is not None:
            kids["proj"] = self.proj
            kids["proj_bn"] = self.proj_bn
        return kids

    def params(self):
        out = {}
        for cname, child in self._children().items():
            for pname, p in child.params().items():
                out[f"{cname}.{pname}"] = p
        return out

    def grads(self):
        out = {}
        for cname, child in self._children().items():
            for pname, g in child.grads().items():
                out[f"{cname}.{pname}"] = g
        return out

    def buffers(self):
        out = {}
        for cname, child in self._children().items():
            for bname, b in child.buffers().items():
                out[f"{cname}.{bname}"] = b
        return out

    def out_shape(self, in_shape):
        if in_shape[0] != self.in_channels:
            raise ShapeError(
                f"residual-block expects {self.in_channels} channels, got {in_shape[0]}")
        return (self.out_channels, in_shape[1], in_shape[2])

    def macs(self, in_shape):
        total = self.conv1.macs(in_shape)
        mid = self.conv1.out_shape(in_shape)
        total += self.conv2.macs(mid)
        if self.proj is not None:
            total += self.proj.macs(in_shape)
        return total

    def forward(self, x, train=False):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, train), train), train)
        h = self.bn2.forward(self.conv2.forward(h, train), train)
        if self.proj is not None:
            sc = self.proj_bn.forward(self.proj.forward(x, train), train)
        else:
            sc = x
        return self.relu_out.forward(h + sc, train)

    def backward(self, grad_out):
        g = self.relu_out.backward(grad_out)
        gh = self.conv2.backward(self.bn2.backward(g))
        gx = self.conv1.backward(self.bn1.backward(self.relu1.backward(gh)))
        if self.proj is not None:
            gx = gx + self.proj.backward(self.proj_bn.backward(g))
        else:
            gx = gx + g
        return gx

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels}


_LAYER_KINDS = {
    "conv2d": Conv2d,
    "batchnorm2d": BatchNorm2d,
    "relu": ReLU,
    "maxpool2d": MaxPool2d,
    "avgpool2d": AvgPool2d,
    "flatten": Flatten,
    "linear": Linear,
    "residual-block": ResidualBlock,
}


def build_layer(spec: dict, rng=None, dtype=np.float32) -> Layer:
    """Instantiate a layer from its plain-dict spec."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in _LAYER_KINDS:
        raise ValueError(f"unknown layer kind: {kind!r}")
    cls = _LAYER_KINDS[kind]
    if kind in ("conv2d", "linear", "residual-block"):
        return cls(rng=rng, dtype=dtype, **spec)
    return cls(**spec)


def layer_kinds() -> tuple:
    return tuple(_LAYER_KINDS)
