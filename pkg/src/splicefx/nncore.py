"""Small dense-tensor network layers with hand-derived backward passes.

Tensors are plain numpy arrays laid out (batch, channels, height, width)
or (batch, features). Layers cache what their backward pass needs during
``forward`` and write parameter gradients into ``self.grads`` during
``backward``. Training runs in float32; :meth:`Sequential.astype` switches
a network to float64 for finite-difference checks.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    pass


class DegenerateBatch(ValueError):
    pass


def kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base layer: no parameters, no buffers."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        self.grads = {}
        return self

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


def _unfold(x, k, pad):
    """(N, C, H, W) -> zero-padded sliding windows (N, C, Ho, Wo, k, k)."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(xp, (k, k), axis=(2, 3))


def _fold(dwin, shape, k, pad):
    """Adjoint of :func:`_unfold`: sum window gradients back onto the input."""
    n, c, h, w = shape
    ho, wo = dwin.shape[2:4]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dwin.dtype)
    for u in range(k):
        for v in range(k):
            dxp[:, :, u:u + ho, v:v + wo] += dwin[..., u, v]
    return dxp[:, :, pad:pad + h, pad:pad + w]


class Conv2d(Layer):
    """Stride-1 cross-correlation with zero padding."""

    def __init__(self, in_channels, out_channels, kernel_size=3, padding=1,
                 rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.params["weight"] = kaiming_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(f"conv expects (N, {self.in_channels}, H, W), got {x.shape}")
        n = x.shape[0]
        win = _unfold(x, self.k, self.padding)
        ho, wo = win.shape[2:4]
        if ho < 1 or wo < 1:
            raise ShapeMismatch("kernel larger than padded input")
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        w = self.params["weight"].reshape(self.out_channels, -1)
        out = cols @ w.T + self.params["bias"]
        self._cache = (x.shape, cols)
        return out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad):
        shape, cols = self._cache
        n, o, ho, wo = grad.shape
        g = grad.transpose(0, 2, 3, 1).reshape(-1, o)
        self.grads["weight"] = (g.T @ cols).reshape(self.params["weight"].shape)
        self.grads["bias"] = g.sum(axis=0)
        dcols = g @ self.params["weight"].reshape(o, -1)
        dwin = dcols.reshape(n, ho, wo, shape[1], self.k, self.k).transpose(0, 3, 1, 2, 4, 5)
        return _fold(dwin, shape, self.k, self.padding)


class Involution2d(Layer):
    """Involution with one kernel group (stride 1, zero padding).

    At every pixel a K x K kernel is generated from that pixel's channel
    vector by two pointwise maps (C -> C/r, ReLU, C/r -> K*K) and the same
    kernel is applied to every channel.
    """

    def __init__(self, channels, kernel_size=3, reduction=4, rng=None, dtype=np.float32):
        super().__init__()
        if channels % reduction:
            raise ShapeMismatch(f"channels ({channels}) not divisible by reduction ({reduction})")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.k = kernel_size
        hidden = channels // reduction
        kk = kernel_size * kernel_size
        self.params["w_reduce"] = kaiming_uniform(rng, (hidden, channels), channels, dtype)
        self.params["b_reduce"] = np.zeros(hidden, dtype=dtype)
        self.params["w_span"] = kaiming_uniform(rng, (kk, hidden), hidden, dtype)
        self.params["b_span"] = np.zeros(kk, dtype=dtype)

    def kernels(self, x):
        """Generated per-pixel kernels, shape (N, K*K, H, W)."""
        p = self.params
        t = np.einsum("rc,nchw->nrhw", p["w_reduce"], x, optimize=True)
        t += p["b_reduce"][None, :, None, None]
        a = np.maximum(t, 0)
        ker = np.einsum("jr,nrhw->njhw", p["w_span"], a, optimize=True)
        ker += p["b_span"][None, :, None, None]
        return t, a, ker

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"involution expects (N, {self.channels}, H, W), got {x.shape}")
        n, c, h, w = x.shape
        t, a, ker = self.kernels(x)
        win = _unfold(x, self.k, self.k // 2).reshape(n, c, h, w, self.k * self.k)
        out = np.einsum("nchwj,njhw->nchw", win, ker, optimize=True)
        self._cache = (x, t, a, ker, win)
        return out

    def backward(self, grad):
        x, t, a, ker, win = self._cache
        p = self.params
        n, c, h, w = x.shape
        dker = np.einsum("nchw,nchwj->njhw", grad, win, optimize=True)
        dwin = np.einsum("nchw,njhw->nchwj", grad, ker, optimize=True)
        dx = _fold(dwin.reshape(n, c, h, w, self.k, self.k), x.shape, self.k, self.k // 2)
        self.grads["b_span"] = dker.sum(axis=(0, 2, 3))
        self.grads["w_span"] = np.einsum("njhw,nrhw->jr", dker, a, optimize=True)
        dt = np.einsum("jr,njhw->nrhw", p["w_span"], dker, optimize=True) * (t > 0)
        self.grads["b_reduce"] = dt.sum(axis=(0, 2, 3))
        self.grads["w_reduce"] = np.einsum("nrhw,nchw->rc", dt, x, optimize=True)
        dx += np.einsum("rc,nrhw->nchw", p["w_reduce"], dt, optimize=True)
        return dx


class BatchNorm(Layer):
    """Batch normalization over axis 1 for (N, C) or (N, C, H, W) input."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def _view(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x, train=False):
        if x.ndim not in (2, 4) or x.shape[1] != self.channels:
            raise ShapeMismatch(f"batchnorm expects (N, {self.channels}, ...), got {x.shape}")
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        if train:
            if x.shape[0] < 2:
                raise DegenerateBatch("batch norm needs at least 2 samples in train mode")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // self.channels
            mom = self.momentum
            self.buffers["running_mean"] = ((1 - mom) * self.buffers["running_mean"]
                                            + mom * mean).astype(x.dtype)
            self.buffers["running_var"] = ((1 - mom) * self.buffers["running_var"]
                                           + mom * var * m / max(m - 1, 1)).astype(x.dtype)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._view(mean, x.ndim)) * self._view(inv_std, x.ndim)
        self._cache = (xhat, inv_std, axes, train)
        return (self._view(self.params["gamma"], x.ndim) * xhat
                + self._view(self.params["beta"], x.ndim))

    def backward(self, grad):
        xhat, inv_std, axes, train = self._cache
        nd = grad.ndim
        self.grads["gamma"] = (grad * xhat).sum(axis=axes)
        self.grads["beta"] = grad.sum(axis=axes)
        dxhat = grad * self._view(self.params["gamma"], nd)
        if not train:
            return dxhat * self._view(inv_std, nd)
        m = grad.size // self.channels
        s1 = self._view(dxhat.sum(axis=axes), nd)
        s2 = self._view((dxhat * xhat).sum(axis=axes), nd)
        return self._view(inv_std, nd) / m * (m * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class MaxPool2(Layer):
    """2x2 / stride 2 max pooling; gradient goes to the first maximal element."""

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeMismatch(f"max pool needs even spatial dims, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        (n, c, h, w), idx = self._cache
        onehot = (np.arange(4) == idx[..., None]) * grad[..., None]
        return (onehot.reshape(n, c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._shape
        return np.broadcast_to(grad[:, :, None, None] / (h * w), self._shape).copy()


class Linear(Layer):
    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.params["weight"] = kaiming_uniform(rng, (out_features, in_features),
                                                in_features, dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatch(f"linear expects (N, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        self.grads["weight"] = grad.T @ self._x
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"]


class Sequential(Layer):
    def __init__(self, layers, debug=False):
        super().__init__()
        self.layers = list(layers)
        self.debug = debug

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
            if self.debug and not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite output from {type(layer).__name__}")
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def named_tensors(self, kind="params"):
        """(name, layer, key) for every parameter or buffer, in declaration order."""
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Sequential):
                out += [(f"{i}.{n}", l, k) for n, l, k in layer.named_tensors(kind)]
            else:
                for key in getattr(layer, kind):
                    out.append((f"{i}.{key}", layer, key))
        return out

    def param_count(self):
        return sum(l.params[k].size for _, l, k in self.named_tensors("params"))


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; returns (loss, d loss / d logits)."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, applied in place to ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


@dataclass(frozen=True)
class StepLrSchedule:
    initial_lr: float
    decay_factor: float = 1.0
    step_size_epochs: int = 1

    def __post_init__(self):
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.step_size_epochs < 1:
            raise ValueError("step_size_epochs must be >= 1")


def lr_at(schedule, epoch):
    return schedule.initial_lr * schedule.decay_factor ** (epoch // schedule.step_size_epochs)
