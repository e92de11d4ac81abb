"""Minimal neural network stack on numpy arrays.

Layers implement batched forward/backward passes with exact reverse-mode
gradients of the MSE loss; the optimizer is Adam with bias correction.
Only the layer kinds needed by the surrogate architectures exist: dense,
valid 2-D convolution, max/average pooling, ReLU, inverted dropout, a
Gaussian RBF layer with frozen centers, plus reshape/flatten plumbing.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(Exception):
    pass


class NonFiniteGradient(Exception):
    pass


class EmptyInput(Exception):
    pass


def _glorot_uniform(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# layers

class Layer:
    trainable = ()

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def params(self):
        return [getattr(self, name) for name in self.trainable]

    def grads(self):
        return [getattr(self, "d_" + name) for name in self.trainable]

    def spec(self) -> dict:
        raise NotImplementedError

    def weight_dict(self) -> dict:
        return {name: getattr(self, name).tolist() for name in self.trainable}

    def load_weights(self, weights: dict):
        for name in self.trainable:
            arr = np.array(weights[name], float)
            if arr.shape != getattr(self, name).shape:
                raise ShapeMismatch(f"{type(self).__name__}.{name}: shape {arr.shape}")
            setattr(self, name, arr)


class Dense(Layer):
    trainable = ("w", "b")

    def __init__(self, n_in, n_out, rng=None):
        rng = rng or np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.w = _glorot_uniform(rng, n_in, n_out, (n_out, n_in))
        self.b = np.zeros(n_out)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeMismatch(f"dense expects (N, {self.n_in}), got {x.shape}")
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, grad, need_dx=True):
        self.d_w = grad.T @ self._x
        self.d_b = grad.sum(axis=0)
        return grad @ self.w if need_dx else None

    def spec(self):
        return {"kind": "dense", "n_in": self.n_in, "n_out": self.n_out}


class Conv2D(Layer):
    """Valid (no padding, stride 1) 2-D convolution over (N, maps, h, w)."""

    trainable = ("k", "b")

    def __init__(self, in_maps, filters, k1, k2, rng=None):
        rng = rng or np.random.default_rng(0)
        self.in_maps, self.filters = in_maps, filters
        self.k1, self.k2 = k1, k2
        fan_in = in_maps * k1 * k2
        fan_out = filters * k1 * k2
        self.k = _glorot_uniform(rng, fan_in, fan_out, (filters, in_maps, k1, k2))
        self.b = np.zeros(filters)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_maps:
            raise ShapeMismatch(f"conv expects (N, {self.in_maps}, h, w), got {x.shape}")
        if x.shape[2] < self.k1 or x.shape[3] < self.k2:
            raise ShapeMismatch(f"conv kernel {self.k1}x{self.k2} larger than input {x.shape}")
        n, _, h, w = x.shape
        ho, wo = h - self.k1 + 1, w - self.k2 + 1
        self._out_hw = (n, ho, wo)
        # im2col: one BLAS matmul instead of a windowed contraction
        win = sliding_window_view(x, (self.k1, self.k2), axis=(2, 3))
        self._col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        out = self._col @ self.k.reshape(self.filters, -1).T + self.b
        return out.reshape(n, ho, wo, self.filters).transpose(0, 3, 1, 2)

    def backward(self, grad, need_dx=True):
        n, ho, wo = self._out_hw
        gm = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.filters)
        self.d_k = (gm.T @ self._col).reshape(self.k.shape)
        self.d_b = gm.sum(axis=0)
        if not need_dx:
            return None
        pad = ((0, 0), (0, 0), (self.k1 - 1, self.k1 - 1), (self.k2 - 1, self.k2 - 1))
        gpad = np.pad(grad, pad)
        gwin = sliding_window_view(gpad, (self.k1, self.k2), axis=(2, 3))
        kflip = self.k[:, :, ::-1, ::-1]
        return np.einsum("nfhwij,fdij->ndhw", gwin, kflip, optimize=True)

    def spec(self):
        return {"kind": "conv", "in_maps": self.in_maps, "filters": self.filters,
                "k1": self.k1, "k2": self.k2}


class Pool2D(Layer):
    def __init__(self, m1, m2, mode="max"):
        if mode not in ("max", "avg"):
            raise ValueError(f"bad pool mode {mode!r}")
        self.m1, self.m2, self.mode = m1, m2, mode

    def forward(self, x, train=False):
        n, d, h, w = x.shape
        if h % self.m1 or w % self.m2:
            raise ShapeMismatch(f"pool {self.m1}x{self.m2} needs divisible input, got {h}x{w}")
        ho, wo = h // self.m1, w // self.m2
        xr = x.reshape(n, d, ho, self.m1, wo, self.m2)
        xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, d, ho, wo, self.m1 * self.m2)
        self._shape = (n, d, h, w)
        if self.mode == "avg":
            return xr.mean(axis=-1)
        self._arg = xr.argmax(axis=-1)
        return np.take_along_axis(xr, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, d, h, w = self._shape
        ho, wo = h // self.m1, w // self.m2
        win = self.m1 * self.m2
        gr = np.zeros((n, d, ho, wo, win))
        if self.mode == "avg":
            gr[...] = grad[..., None] / win
        else:
            np.put_along_axis(gr, self._arg[..., None], grad[..., None], axis=-1)
        gr = gr.reshape(n, d, ho, wo, self.m1, self.m2).transpose(0, 1, 2, 4, 3, 5)
        return gr.reshape(n, d, h, w)

    def spec(self):
        return {"kind": "pool", "m1": self.m1, "m2": self.m2, "mode": self.mode}


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask

    def spec(self):
        return {"kind": "relu"}


class Dropout(Layer):
    """Inverted dropout: train mode zeroes units with probability p and
    rescales survivors; eval mode is the identity."""

    def __init__(self, p, seed=0):
        if not (0.0 <= p < 1.0):
            raise ValueError("dropout p must be in [0, 1)")
        self.p = p
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def forward(self, x, train=False):
        if not train or self.p == 0.0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self._mask

    def backward(self, grad):
        if self._mask is None:
            return grad
        return grad * self._mask

    def spec(self):
        return {"kind": "dropout", "p": self.p, "seed": self.seed}


class PadReshape(Layer):
    """Flat vector -> single-map image, zero-padding the tail slots."""

    def __init__(self, n_in, h, w):
        if h * w < n_in:
            raise ShapeMismatch(f"reshape {h}x{w} too small for {n_in} inputs")
        self.n_in, self.h, self.w = n_in, h, w

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeMismatch(f"reshape expects (N, {self.n_in}), got {x.shape}")
        n = x.shape[0]
        out = np.zeros((n, self.h * self.w))
        out[:, : self.n_in] = x
        return out.reshape(n, 1, self.h, self.w)

    def backward(self, grad):
        return grad.reshape(grad.shape[0], -1)[:, : self.n_in]

    def spec(self):
        return {"kind": "reshape", "n_in": self.n_in, "h": self.h, "w": self.w}


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)

    def spec(self):
        return {"kind": "flatten"}


class RBFLayer(Layer):
    """Gaussian similarity against frozen prototype centers."""

    trainable = ()  # centers/sigmas are fixed by clustering, not trained

    def __init__(self, centers, sigmas):
        self.centers = np.asarray(centers, float)
        self.sigmas = np.asarray(sigmas, float)
        if np.any(self.sigmas <= 0):
            raise ValueError("sigmas must be positive")

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.centers.shape[1]:
            raise ShapeMismatch(f"rbf expects (N, {self.centers.shape[1]}), got {x.shape}")
        diff = x[:, None, :] - self.centers[None, :, :]
        self._diff = diff
        d2 = np.einsum("nkd,nkd->nk", diff, diff)
        self._phi = np.exp(-d2 / (2.0 * self.sigmas ** 2))
        return self._phi

    def backward(self, grad):
        coeff = grad * self._phi / (self.sigmas ** 2)
        return -np.einsum("nk,nkd->nd", coeff, self._diff)

    def spec(self):
        return {"kind": "rbf", "centers": self.centers.tolist(),
                "sigmas": self.sigmas.tolist()}


def layer_from_spec(spec: dict, rng=None) -> Layer:
    kind = spec["kind"]
    if kind == "dense":
        return Dense(spec["n_in"], spec["n_out"], rng=rng)
    if kind == "conv":
        return Conv2D(spec["in_maps"], spec["filters"], spec["k1"], spec["k2"], rng=rng)
    if kind == "pool":
        return Pool2D(spec["m1"], spec["m2"], spec["mode"])
    if kind == "relu":
        return ReLU()
    if kind == "dropout":
        return Dropout(spec["p"], seed=spec.get("seed", 0))
    if kind == "reshape":
        return PadReshape(spec["n_in"], spec["h"], spec["w"])
    if kind == "flatten":
        return Flatten()
    if kind == "rbf":
        return RBFLayer(np.array(spec["centers"], float), np.array(spec["sigmas"], float))
    raise ValueError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# network

class Network:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad):
        # layers below the first parameterized one never need an input
        # gradient, so stop propagating there
        first = next((i for i, l in enumerate(self.layers) if l.params()), 0)
        for i in range(len(self.layers) - 1, first - 1, -1):
            layer = self.layers[i]
            if i == first and isinstance(layer, (Dense, Conv2D)):
                layer.backward(grad, need_dx=False)
                return None
            grad = layer.backward(grad)
        return grad

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]

    def predict(self, x):
        return self.forward(np.asarray(x, float), train=False)

    def train_step_gradients(self, x, y):
        """Forward + backward of the MSE loss; returns (loss, grads)."""
        pred = self.forward(x, train=True)
        if pred.shape != y.shape:
            raise ShapeMismatch(f"prediction {pred.shape} vs target {y.shape}")
        err = pred - y
        loss = float(np.mean(err ** 2))
        self.backward(2.0 * err / err.size)
        grads = self.grads()
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient("non-finite gradient encountered")
        return loss, grads


# ---------------------------------------------------------------------------
# losses

def mse(pred, gt) -> float:
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"mse: {pred.shape} vs {gt.shape}")
    return float(np.mean((pred - gt) ** 2))


def mae(pred, gt) -> float:
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"mae: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.abs(pred - gt)))


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Adam with bias correction; beta1 plays the momentum role."""

    def __init__(self, params, lr=1e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ShapeMismatch("gradient list does not match parameter list")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient shape {g.shape} vs param {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# K-means clustering for RBF centers

SIGMA_FLOOR = 1e-6


def kmeans(data, k, tol=1e-6, seed=0, max_iter=300):
    """Seeded K-means returning cluster centers and per-cluster spreads.

    Centers initialize from distinct data points.  The spread of a cluster
    is the rms distance of its members to the center; clusters with at most
    one point fall back to the mean spread of the well-populated clusters.
    Converges when the largest center movement drops below ``tol``.
    """
    data = np.asarray(data, float)
    if data.ndim == 1:
        data = data[:, None]
    n = data.shape[0]
    if n == 0:
        raise EmptyInput("kmeans needs at least one data point")
    if not (1 <= k <= n):
        raise ValueError(f"k must be in [1, {n}]")

    rng = np.random.default_rng(seed)
    centers = data[rng.choice(n, size=k, replace=False)].copy()
    x2 = (data ** 2).sum(axis=1)

    def distances_sq(c):
        # |x - c|^2 = |x|^2 - 2 x.c + |c|^2, via one matmul
        d2 = x2[:, None] - 2.0 * (data @ c.T) + (c ** 2).sum(axis=1)
        return np.maximum(d2, 0.0)

    def cluster_means(assign, fallback):
        counts = np.bincount(assign, minlength=k)
        sums = np.empty((k, data.shape[1]))
        for col in range(data.shape[1]):
            sums[:, col] = np.bincount(assign, weights=data[:, col],
                                       minlength=k)
        means = fallback.copy()
        nz = counts > 0
        means[nz] = sums[nz] / counts[nz, None]
        return means, counts

    for _ in range(max_iter):
        assign = distances_sq(centers).argmin(axis=1)
        new_centers, _ = cluster_means(assign, centers)
        movement = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        if movement < tol:
            break

    d2 = distances_sq(centers)
    assign = d2.argmin(axis=1)
    counts = np.bincount(assign, minlength=k)
    own = np.bincount(assign, weights=d2[np.arange(n), assign], minlength=k)
    sigmas = np.zeros(k)
    multi = counts >= 2
    sigmas[multi] = np.sqrt(own[multi] / counts[multi])
    good = sigmas[multi]
    fallback = good.mean() if len(good) else 1.0
    sigmas[~multi] = fallback
    return centers, np.maximum(sigmas, SIGMA_FLOOR)
