"""Small dense-numerics toolkit: tanh MLPs with analytic backprop, Adam, PCA.

Everything is float64 and driven by explicitly passed numpy Generators so that
runs are bit-reproducible on one platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def make_rng(seed) -> np.random.Generator:
    """Seeded generator; ``seed`` may also be an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class Mlp:
    """Fully connected net: tanh on hidden layers, identity on the output."""

    sizes: tuple
    weights: list = field(default_factory=list)  # (fan_in, fan_out) each
    biases: list = field(default_factory=list)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or any(s <= 0 for s in self.sizes):
            raise ValueError(f"invalid layer sizes {self.sizes}")
        if not self.weights:
            self.weights = [np.zeros((a, b)) for a, b in zip(self.sizes[:-1], self.sizes[1:])]
            self.biases = [np.zeros(b) for b in self.sizes[1:]]
        for (a, b), w, bias in zip(zip(self.sizes[:-1], self.sizes[1:]), self.weights, self.biases):
            if w.shape != (a, b) or bias.shape != (b,):
                raise ValueError("parameter shapes inconsistent with layer sizes")

    @classmethod
    def init(cls, sizes, rng) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        rng = make_rng(rng)
        net = cls(sizes)
        for w in net.weights:
            limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            w[...] = rng.uniform(-limit, limit, size=w.shape)
        return net

    @property
    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> list:
        return np.concatenate([p.ravel() for p in self.params]).tolist()

    @classmethod
    def from_flat(cls, sizes, values) -> "Mlp":
        net = cls(sizes)
        values = np.asarray(values, dtype=float)
        if values.size != net.n_params:
            raise ValueError(f"expected {net.n_params} parameters, got {values.size}")
        pos = 0
        for p in net.params:
            p[...] = values[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        return net

    def __call__(self, x):
        return mlp_forward(self, x)[0]


@dataclass
class MlpCache:
    net: Mlp
    inputs: list  # input to every layer
    batched: bool


def mlp_forward(net: Mlp, x):
    """Evaluate ``net`` on a vector or a (batch, in) array.

    Returns ``(output, cache)``; the cache is what :func:`mlp_backward` needs.
    """
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    h = x if batched else x[None, :]
    if h.shape[1] != net.sizes[0]:
        raise ValueError(f"input has {h.shape[1]} features, net expects {net.sizes[0]}")
    inputs = []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
    return (h if batched else h[0]), MlpCache(net, inputs, batched)


def mlp_backward(net: Mlp, cache: MlpCache, grad_out):
    """Backpropagate ``grad_out`` (dL/doutput) through the cached forward pass.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` aligned to
    ``net.params``.
    """
    if cache.net is not net or len(cache.inputs) != len(net.weights):
        raise ValueError("cache does not belong to this network")
    g = np.asarray(grad_out, dtype=float)
    if not cache.batched:
        g = g[None, :]
    if g.shape != (cache.inputs[0].shape[0], net.sizes[-1]):
        raise ValueError("output gradient shape does not match cached forward pass")
    grads = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        a_in = cache.inputs[i]
        grads[2 * i] = a_in.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i].T
        if i > 0:
            # a_in = tanh(pre) for every layer input except the first
            g = g * (1.0 - a_in * a_in)
    return grads, (g if cache.batched else g[0])


class Adam:
    """Bias-corrected Adam acting in place on a list of arrays."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient at Adam step {self.t + 1}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def _fix_sign(v):
    i = int(np.argmax(np.abs(v)))  # argmax returns the lowest index on ties
    return -v if v[i] < 0 else v


def power_iteration(cov, max_iter=500, tol=1e-10):
    """Leading unit eigenvector of a symmetric PSD matrix.

    Error shrinks like (lambda_2 / lambda_1) ** k, so a top pair closer than
    about 5% does not converge in 500 iterations and raises RuntimeError.
    """
    n = cov.shape[0]
    # deterministic start that is rarely orthogonal to the top eigenvector
    v = np.ones(n) + np.arange(n) / n
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            raise ValueError("power iteration collapsed onto the null space")
        w = _fix_sign(w / norm)
        if np.linalg.norm(w - v) < tol:
            return w
        v = w
    raise RuntimeError(f"power iteration did not converge in {max_iter} iterations")


def pca_first_component(points, max_iter=500, tol=1e-10):
    """Mean and first principal axis of ``points`` (n, d).

    The axis sign is fixed so its largest-magnitude entry is positive.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two points of equal dimension")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    if not np.any(cov):
        raise ValueError("all points are identical; covariance is zero")
    return mean, power_iteration(cov, max_iter, tol)


def pca_components(points, n_components=2, max_iter=500, tol=1e-10):
    """Top principal axes by power iteration with deflation."""
    x = np.asarray(points, dtype=float)
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    axes = []
    for _ in range(n_components):
        axis = power_iteration(cov, max_iter, tol)
        axes.append(axis)
        cov = cov - (axis @ cov @ axis) * np.outer(axis, axis)
    return mean, np.array(axes)


def finite_diff_check(params, loss_fn, analytic_grads, h=1e-5, floor=1e-6):
    """Max relative error between analytic gradients and central differences.

    ``loss_fn()`` is re-evaluated after each in-place perturbation of an
    entry of ``params``; entries are restored afterwards. The error of one
    entry is ``|a - n| / max(|a|, |n|, floor)``, so entries below ``floor``
    are compared in absolute terms.
    """
    worst = 0.0
    for p, g in zip(params, analytic_grads):
        flat_p = p.reshape(-1)
        flat_g = np.asarray(g).reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = loss_fn()
            flat_p[i] = orig - h
            down = loss_fn()
            flat_p[i] = orig
            numeric = (up - down) / (2 * h)
            err = abs(flat_g[i] - numeric) / max(abs(flat_g[i]), abs(numeric), floor)
            worst = max(worst, err)
    return worst


def kmeans(points, k, n_iter=50, rng=None):
    """Lloyd's algorithm seeded with ``k`` distinct data points.

    Empty clusters keep their previous center. Returns ``(centers, labels)``.
    """
    x = np.asarray(points, dtype=float)
    distinct = np.unique(x, axis=0)
    if distinct.shape[0] < k:
        raise ValueError(f"need at least {k} distinct points, got {distinct.shape[0]}")
    rng = make_rng(rng)
    centers = distinct[rng.permutation(distinct.shape[0])[:k]].copy()
    labels = np.zeros(x.shape[0], dtype=int)
    for _ in range(n_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        new = centers.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        if np.array_equal(new, centers):
            break
        centers = new
    labels = np.argmin(((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2), axis=1)
    return centers, labels
