"""Minimal layer library with explicit forward/backward passes.

All tensors are float64 NCHW numpy arrays. Each layer caches what it needs
during forward and accumulates parameter gradients during backward; call
zero_grad() between steps. Convolutions route through kernels.py and pick
up the numba/numpy backend from there.
"""

import numpy as np

from . import kernels


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grad(self):
        for k in self.grads:
            self.grads[k][...] = 0.0


class Conv2d(Layer):
    def __init__(self, ci, co, k=3, stride=1, pad=None, dilation=1, rng=None):
        super().__init__()
        self.stride = stride
        self.dilation = dilation
        self.pad = pad if pad is not None else dilation * (k - 1) // 2
        rng = rng or np.random.default_rng(0)
        fan_in = ci * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(co, ci, k, k))
        self.params = {"w": w, "b": np.zeros(co)}
        self.grads = {"w": np.zeros_like(w), "b": np.zeros(co)}
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return kernels.conv_forward(x, self.params["w"], self.params["b"],
                                    self.stride, self.pad, self.dilation)

    def backward(self, dy):
        dw, db = kernels.conv_backward_weights(dy, self._x, self.params["w"].shape,
                                               self.stride, self.pad, self.dilation)
        self.grads["w"] += dw
        self.grads["b"] += db
        return kernels.conv_backward_input(dy, self.params["w"], self._x.shape,
                                           self.stride, self.pad, self.dilation)


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class LeakyReLU(Layer):
    def __init__(self, slope=0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, dy):
        return np.where(self._mask, dy, self.slope * dy)


class Sigmoid(Layer):
    def forward(self, x, train=False):
        self._y = 1.0 / (1.0 + np.exp(-x))
        return self._y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


class UpsampleNearest(Layer):
    def __init__(self, factor=2):
        super().__init__()
        self.f = factor

    def forward(self, x, train=False):
        f = self.f
        return np.repeat(np.repeat(x, f, axis=2), f, axis=3)

    def backward(self, dy):
        f = self.f
        n, c, h, w = dy.shape
        return dy.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))


class AvgPool(Layer):
    def __init__(self, factor):
        super().__init__()
        self.f = factor

    def forward(self, x, train=False):
        f = self.f
        n, c, h, w = x.shape
        self._in_shape = x.shape
        return x.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))

    def backward(self, dy):
        f = self.f
        g = np.repeat(np.repeat(dy, f, axis=2), f, axis=3) / (f * f)
        return g


class Dropout(Layer):
    """Inverted dropout. The mask RNG must be seeded by the caller
    (seed_rng) for reproducible training; eval mode is the identity."""

    def __init__(self, p):
        super().__init__()
        self.p = p
        self._rng = np.random.default_rng(0)
        self._mask = None

    def seed_rng(self, seed):
        self._rng = np.random.default_rng(seed)

    def forward(self, x, train=False):
        if not train or self.p <= 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.p
        self._mask = (self._rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for l in self.layers:
            x = l.forward(x, train=train)
        return x

    def backward(self, dy):
        for l in reversed(self.layers):
            dy = l.backward(dy)
        return dy

    def zero_grad(self):
        for l in self.layers:
            l.zero_grad()

    def named_params(self, prefix=""):
        out = {}
        for i, l in enumerate(self.layers):
            if hasattr(l, "named_params"):
                out.update(l.named_params(f"{prefix}{i}."))
            else:
                for k, v in l.params.items():
                    out[f"{prefix}{i}.{k}"] = v
        return out

    def named_grads(self, prefix=""):
        out = {}
        for i, l in enumerate(self.layers):
            if hasattr(l, "named_grads"):
                out.update(l.named_grads(f"{prefix}{i}."))
            else:
                for k, v in l.grads.items():
                    out[f"{prefix}{i}.{k}"] = v
        return out


class Adam:
    """Adam over a dict of named parameter arrays updated in place."""

    def __init__(self, params, lr=4e-4, beta1=0.9, beta2=0.99, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v,
                "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def load_state(self, st):
        self.t = int(st["t"])
        self.lr = float(st["lr"])
        self.beta1 = float(st["beta1"])
        self.beta2 = float(st["beta2"])
        self.eps = float(st["eps"])
        for k in self.m:
            self.m[k][...] = st["m"][k]
            self.v[k][...] = st["v"][k]
