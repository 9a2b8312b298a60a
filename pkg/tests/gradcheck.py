"""Central finite-difference gradient checks in float64."""

import numpy as np

from splicefx import nncore as nn

EPS = 1e-6


def _rel(a, b):
    a, b = np.ravel(a), np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def _numeric(f, arr, idx):
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        old = arr.flat[i]
        arr.flat[i] = old + EPS
        hi = f()
        arr.flat[i] = old - EPS
        lo = f()
        arr.flat[i] = old
        out[j] = (hi - lo) / (2 * EPS)
    return out


def _probe(arr, rng, limit):
    n = arr.size
    return np.arange(n) if n <= limit else rng.choice(n, limit, replace=False)


def check_layer(layer, x, rng, train=True, limit=60):
    """Max relative error between analytic and numeric gradients of
    L = sum(w * layer(x)) for a random projection w, over the input and
    every parameter."""
    layer.astype(np.float64)
    x = np.asarray(x, dtype=np.float64).copy()
    w = rng.standard_normal(layer.forward(x, train).shape)

    def loss():
        return float(np.sum(w * layer.forward(x, train)))

    layer.forward(x, train)
    dx = layer.backward(w)
    analytic = {"input": (x, dx)}
    for k, p in layer.params.items():
        analytic[k] = (p, layer.grads[k].copy())
    errors = {}
    for name, (arr, grad) in analytic.items():
        idx = _probe(arr, rng, limit)
        errors[name] = _rel(grad.flat[idx], _numeric(loss, arr, idx))
    return errors


def check_softmax_ce(logits, labels, rng):
    logits = np.asarray(logits, dtype=np.float64).copy()
    _, grad = nn.softmax_cross_entropy(logits, labels)
    idx = np.arange(logits.size)
    num = _numeric(lambda: nn.softmax_cross_entropy(logits, labels)[0], logits, idx)
    return _rel(grad.ravel(), num)


def random_case(kind, rng):
    """(layer, input, train flag) for one randomized trial of a layer type."""
    n = int(rng.integers(2, 4))
    if kind == "conv2d":
        cin, cout = rng.integers(1, 4, 2)
        k = int(rng.choice([1, 3]))
        h, w = rng.integers(3, 7, 2)
        layer = nn.Conv2d(int(cin), int(cout), k, k // 2, rng=rng)
        layer.params["bias"] = rng.standard_normal(int(cout)).astype(np.float32)
        return layer, rng.standard_normal((n, cin, h, w)), True
    if kind == "involution2d":
        c = 4 * int(rng.integers(1, 3))
        h, w = rng.integers(3, 6, 2)
        layer = nn.Involution2d(c, 3, 4, rng=rng)
        for key in ("b_reduce", "b_span"):
            layer.params[key] = 0.3 * rng.standard_normal(layer.params[key].shape)
        return layer, rng.standard_normal((n, c, h, w)), True
    if kind == "batchnorm2d":
        c = int(rng.integers(1, 4))
        layer = nn.BatchNorm(c)
        layer.params["gamma"] = rng.uniform(0.5, 1.5, c)
        layer.params["beta"] = rng.standard_normal(c)
        h, w = rng.integers(2, 5, 2)
        return layer, rng.standard_normal((n + 1, c, h, w)) * 2 + 1, True
    if kind == "batchnorm1d":
        c = int(rng.integers(1, 6))
        layer = nn.BatchNorm(c)
        layer.params["gamma"] = rng.uniform(0.5, 1.5, c)
        layer.params["beta"] = rng.standard_normal(c)
        return layer, rng.standard_normal((n + 3, c)) * 3 - 1, True
    if kind == "batchnorm_eval":
        c = int(rng.integers(1, 4))
        layer = nn.BatchNorm(c)
        layer.buffers["running_mean"] = rng.standard_normal(c)
        layer.buffers["running_var"] = rng.uniform(0.5, 2, c)
        return layer, rng.standard_normal((n, c, 3, 3)), False
    if kind == "maxpool2":
        c = int(rng.integers(1, 3))
        h, w = 2 * rng.integers(1, 4, 2)
        size = n * c * h * w
        # distinct values spaced far beyond the finite-difference step
        x = (rng.permutation(size) * 0.01).reshape(n, c, h, w)
        return nn.MaxPool2(), x, True
    if kind == "linear":
        fin, fout = rng.integers(1, 7, 2)
        layer = nn.Linear(int(fin), int(fout), rng=rng)
        layer.params["bias"] = rng.standard_normal(int(fout))
        return layer, rng.standard_normal((n, fin)), True
    if kind == "relu":
        x = rng.standard_normal((n, 7))
        x[np.abs(x) < 1e-3] = 0.5
        return nn.ReLU(), x, True
    raise KeyError(kind)


LAYER_KINDS = ("conv2d", "involution2d", "batchnorm2d", "batchnorm1d", "batchnorm_eval",
               "maxpool2", "linear", "relu")
