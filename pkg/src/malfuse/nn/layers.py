"""Layers with explicit forward/backward passes over NCHW numpy arrays.

Weight init is fan-in-scaled uniform, U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
biases zero. Batchnorm uses eps 1e-5 and running-stat momentum 0.1 (biased
variance inside the normalization, unbiased in the running update).
"""

from __future__ import annotations

import numpy as np

from ..errors import BatchTooSmall, ShapeMismatch


class Parameter:
    __slots__ = ("name", "data", "grad")

    def __init__(self, name, data):
        self.name = name
        self.data = data
        self.grad = np.zeros_like(data)


def _uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _im2col(xp, k, s, oh, ow):
    # (N, C, Hp, Wp) -> (N, C*k*k, oh*ow) patch matrix
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, oh, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + s * oh:s, j:j + s * ow:s]
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im(cols, out_shape, k, s, oh, ow):
    # scatter-add inverse of _im2col; out_shape = (N, C, Hp, Wp)
    n, c = out_shape[:2]
    cols = cols.reshape(n, c, k, k, oh, ow)
    out = np.zeros(out_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * oh:s, j:j + s * ow:s] += cols[:, :, i, j]
    return out


class Layer:
    kind = "layer"

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def params(self):
        return []

    def state(self):
        # persisted tensors: learnable params plus any running statistics
        return [(p.name, p.data) for p in self.params()]

    def load_state(self, arrays):
        for p, arr in zip(self.params(), arrays):
            if p.data.shape != arr.shape:
                raise ShapeMismatch(f"{p.name}: {p.data.shape} != {arr.shape}")
            p.data = arr.astype(p.data.dtype)

    def hyper(self):
        return {}

    def out_shape(self, in_shape):
        return in_shape

    def cast(self, dtype):
        for p in self.params():
            p.data = p.data.astype(dtype)
            p.grad = p.grad.astype(dtype)


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 rng=None, dtype=np.float64):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter("weight", _uniform_init(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype))
        self.bias = Parameter("bias", np.zeros(out_channels, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def hyper(self):
        return dict(in_channels=self.in_channels, out_channels=self.out_channels,
                    kernel_size=self.kernel_size, stride=self.stride, padding=self.padding)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeMismatch(f"conv2d expects {self.in_channels} channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        if (h + 2 * p - k) % s or (w + 2 * p - k) % s:
            raise ShapeMismatch(f"conv2d geometry {in_shape} with k={k} s={s} p={p}")
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def forward(self, x, training=False):
        n, c, h, w = x.shape
        _, oh, ow = self.out_shape((c, h, w))
        k, s, p = self.kernel_size, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = _im2col(xp, k, s, oh, ow)
        w2 = self.weight.data.reshape(self.out_channels, -1)
        out = np.matmul(w2, cols) + self.bias.data[None, :, None]
        self._cache = (cols, xp.shape, (oh, ow))
        return out.reshape(n, self.out_channels, oh, ow)

    def backward(self, grad_out):
        cols, xp_shape, (oh, ow) = self._cache
        n = grad_out.shape[0]
        k, s, p = self.kernel_size, self.stride, self.padding
        g2 = grad_out.reshape(n, self.out_channels, oh * ow)
        self.weight.grad += np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0) \
            .reshape(self.weight.data.shape)
        self.bias.grad += grad_out.sum(axis=(0, 2, 3))
        w2 = self.weight.data.reshape(self.out_channels, -1)
        dcols = np.matmul(w2.T, g2)
        dxp = _col2im(dcols, xp_shape, k, s, oh, ow)
        if p:
            return dxp[:, :, p:-p, p:-p]
        return dxp


class ConvTranspose2d(Layer):
    kind = "conv_transpose2d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1,
                 rng=None, dtype=np.float64):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter("weight", _uniform_init(
            rng, (in_channels, out_channels, kernel_size, kernel_size), fan_in, dtype))
        self.bias = Parameter("bias", np.zeros(out_channels, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def hyper(self):
        return dict(in_channels=self.in_channels, out_channels=self.out_channels,
                    kernel_size=self.kernel_size, stride=self.stride)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeMismatch(f"conv_transpose2d expects {self.in_channels} channels, got {c}")
        k, s = self.kernel_size, self.stride
        return (self.out_channels, (h - 1) * s + k, (w - 1) * s + k)

    def forward(self, x, training=False):
        n, c, h, w = x.shape
        _, oh, ow = self.out_shape((c, h, w))
        k, s = self.kernel_size, self.stride
        x2 = x.reshape(n, c, h * w)
        w2 = self.weight.data.reshape(self.in_channels, -1)  # (Cin, Cout*k*k)
        cols = np.matmul(w2.T, x2)
        out = _col2im(cols, (n, self.out_channels, oh, ow), k, s, h, w)
        out += self.bias.data[None, :, None, None]
        self._cache = (x2, (h, w), (oh, ow))
        return out

    def backward(self, grad_out):
        x2, (h, w), (oh, ow) = self._cache
        n = grad_out.shape[0]
        k, s = self.kernel_size, self.stride
        dcols = _im2col(grad_out, k, s, h, w)  # (N, Cout*k*k, h*w)
        self.weight.grad += np.matmul(x2, dcols.transpose(0, 2, 1)).sum(axis=0) \
            .reshape(self.weight.data.shape)
        self.bias.grad += grad_out.sum(axis=(0, 2, 3))
        w2 = self.weight.data.reshape(self.in_channels, -1)
        dx = np.matmul(w2, dcols)
        return dx.reshape(n, self.in_channels, h, w)


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, kernel_size=2, stride=None):
        self.kernel_size = kernel_size
        self.stride = stride if stride is not None else kernel_size
        if self.stride != self.kernel_size:
            raise ShapeMismatch("maxpool2d supports stride == kernel_size only")
        self._cache = None

    def hyper(self):
        return dict(kernel_size=self.kernel_size, stride=self.stride)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        k = self.kernel_size
        if h % k or w % k:
            raise ShapeMismatch(f"maxpool2d needs extents divisible by {k}, got {in_shape}")
        return (c, h // k, w // k)

    def forward(self, x, training=False):
        n, c, h, w = x.shape
        _, oh, ow = self.out_shape((c, h, w))
        k = self.kernel_size
        windows = x.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5) \
            .reshape(n, c, oh, ow, k * k)
        # argmax picks the first occurrence on ties (row-major window order)
        idx = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        self._cache = (idx, x.shape)
        return out

    def backward(self, grad_out):
        idx, x_shape = self._cache
        n, c, h, w = x_shape
        k = self.kernel_size
        oh, ow = h // k, w // k
        dw = np.zeros((n, c, oh, ow, k * k), dtype=grad_out.dtype)
        np.put_along_axis(dw, idx[..., None], grad_out[..., None], axis=-1)
        return dw.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5) \
            .reshape(n, c, h, w)


class BatchNorm2d(Layer):
    kind = "batchnorm2d"
    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, channels, dtype=np.float64):
        self.channels = channels
        self.gamma = Parameter("gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter("beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def state(self):
        return [("gamma", self.gamma.data), ("beta", self.beta.data),
                ("running_mean", self.running_mean), ("running_var", self.running_var)]

    def load_state(self, arrays):
        gamma, beta, rmean, rvar = arrays
        self.gamma.data = gamma.astype(self.gamma.data.dtype)
        self.beta.data = beta.astype(self.beta.data.dtype)
        self.running_mean = rmean.astype(self.running_mean.dtype)
        self.running_var = rvar.astype(self.running_var.dtype)

    def hyper(self):
        return dict(channels=self.channels)

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeMismatch(f"batchnorm2d expects {self.channels} channels, got {in_shape[0]}")
        return in_shape

    def forward(self, x, training=False):
        if training:
            if x.shape[0] < 2:
                raise BatchTooSmall("batchnorm2d needs batch >= 2 in train mode")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            count = x.shape[0] * x.shape[2] * x.shape[3]
            self.running_mean = (1 - self.MOMENTUM) * self.running_mean + self.MOMENTUM * mean
            self.running_var = (1 - self.MOMENTUM) * self.running_var \
                + self.MOMENTUM * var * count / max(count - 1, 1)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.EPS)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, training)
        return self.gamma.data[None, :, None, None] * xhat + self.beta.data[None, :, None, None]

    def backward(self, grad_out):
        xhat, inv_std, training = self._cache
        axes = (0, 2, 3)
        self.gamma.grad += (grad_out * xhat).sum(axis=axes)
        self.beta.grad += grad_out.sum(axis=axes)
        g = self.gamma.data[None, :, None, None] * inv_std[None, :, None, None]
        if not training:
            return grad_out * g
        m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
        sum_dy = grad_out.sum(axis=axes, keepdims=True)
        sum_dy_xhat = (grad_out * xhat).sum(axis=axes, keepdims=True)
        return g * (grad_out - sum_dy / m - xhat * sum_dy_xhat / m)


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope=0.01):
        self.slope = slope
        self._cache = None

    def hyper(self):
        return dict(slope=self.slope)

    def forward(self, x, training=False):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, self.slope * x)

    def backward(self, grad_out):
        mask = self._cache
        return np.where(mask, grad_out, self.slope * grad_out)


class ReLU(LeakyReLU):
    kind = "relu"

    def __init__(self):
        super().__init__(slope=0.0)

    def hyper(self):
        return {}


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float64):
        self.in_features = in_features
        self.out_features = out_features
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter("weight", _uniform_init(
            rng, (in_features, out_features), in_features, dtype))
        self.bias = Parameter("bias", np.zeros(out_features, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def hyper(self):
        return dict(in_features=self.in_features, out_features=self.out_features)

    def out_shape(self, in_shape):
        flat = int(np.prod(in_shape))
        if flat != self.in_features:
            raise ShapeMismatch(f"linear expects {self.in_features} inputs, got {flat}")
        return (self.out_features,)

    def forward(self, x, training=False):
        shape = x.shape
        flat = x.reshape(shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise ShapeMismatch(f"linear expects {self.in_features} inputs, got {flat.shape[1]}")
        self._cache = (flat, shape)
        return flat @ self.weight.data + self.bias.data

    def backward(self, grad_out):
        flat, shape = self._cache
        self.weight.grad += flat.T @ grad_out
        self.bias.grad += grad_out.sum(axis=0)
        return (grad_out @ self.weight.data.T).reshape(shape)


class Softmax(Layer):
    kind = "softmax"

    def __init__(self):
        self._cache = None

    def forward(self, x, training=False):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        self._cache = y
        return y

    def backward(self, grad_out):
        y = self._cache
        return y * (grad_out - (grad_out * y).sum(axis=-1, keepdims=True))


_LAYER_KINDS = {cls.kind: cls for cls in
                (Conv2d, ConvTranspose2d, MaxPool2d, BatchNorm2d, LeakyReLU, ReLU,
                 Linear, Softmax)}


class Sequential:
    """Ordered layer stack with explicit logits access for stable training."""

    def __init__(self, layers, dtype=np.float64):
        self.layers = list(layers)
        self.dtype = dtype

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=self.dtype)
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def forward_logits(self, x, training=False):
        """Forward pass that stops before a trailing Softmax layer."""
        x = np.asarray(x, dtype=self.dtype)
        for layer in self._body():
            x = layer.forward(x, training)
        return x

    def backward(self, grad, from_logits=False):
        layers = self._body() if from_logits else self.layers
        for layer in reversed(layers):
            grad = layer.backward(grad)
        return grad

    def _body(self):
        if self.layers and isinstance(self.layers[-1], Softmax):
            return self.layers[:-1]
        return self.layers

    def parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            for p in layer.params():
                out.append((f"{i}.{layer.kind}.{p.name}", p))
        return out

    def zero_grad(self):
        for _, p in self.parameters():
            p.grad[...] = 0.0

    def state_arrays(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.state():
                out.append((f"{i}.{layer.kind}.{name}", arr))
        return out

    def load_state_arrays(self, arrays):
        it = iter(arrays)
        for layer in self.layers:
            need = len(layer.state())
            layer.load_state([next(it) for _ in range(need)])

    def descriptor(self):
        return [dict(kind=layer.kind, **layer.hyper()) for layer in self.layers]

    def cast(self, dtype):
        self.dtype = dtype
        for layer in self.layers:
            layer.cast(dtype)
            if isinstance(layer, BatchNorm2d):
                layer.running_mean = layer.running_mean.astype(dtype)
                layer.running_var = layer.running_var.astype(dtype)
        return self


def build_from_descriptor(descriptor, dtype=np.float64):
    layers = []
    for entry in descriptor:
        entry = dict(entry)
        cls = _LAYER_KINDS[entry.pop("kind")]
        if cls in (Conv2d, ConvTranspose2d, Linear):
            layers.append(cls(**entry, dtype=dtype))
        else:
            layers.append(cls(**entry))
    return Sequential(layers, dtype=dtype)


def shape_chain(model: Sequential, in_shape):
    """Analytic (kind, in, out) shape walk for one sample, no data needed."""
    chain = []
    shape = tuple(in_shape)
    for layer in model.layers:
        out = layer.out_shape(shape)
        chain.append((layer.kind, shape, out))
        shape = out
    return chain


def hwc(shape):
    """Format a (C,H,W) or (F,) shape the way architecture tables list them."""
    if len(shape) == 3:
        c, h, w = shape
        return f"{h}x{w}x{c}"
    return str(shape[0])
