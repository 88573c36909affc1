"""Fully-connected leaky-ReLU networks with hand-written reverse mode.

Networks act on batches (rows are samples).  Besides the usual backward
pass there is a second-order pass for scalar-output nets that returns the
parameter gradient of ``sum_b c * ||dD/dz_b||^2``, which is what the R1
penalty needs.
"""
from dataclasses import dataclass, field
from itertools import count

import numpy as np

from .errors import NonFiniteGradient, NonFiniteLoss, RangeError, ShapeMismatch, StaleCache

_versions = count(1)


@dataclass
class DenseNet:
    weights: list
    biases: list
    alpha: float = 0.2
    output: str = "identity"  # or "logit" (raw scalar logit, squashed by the loss)
    version: int = field(default_factory=lambda: next(_versions), compare=False)

    def __post_init__(self):
        if not self.weights:
            raise ShapeMismatch("a DenseNet needs at least one layer")
        if len(self.weights) != len(self.biases):
            raise ShapeMismatch("weights and biases must pair up")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeMismatch(f"layer {k}: weight {w.shape} / bias {b.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeMismatch(f"layer {k} input {w.shape[1]} != previous output "
                                    f"{self.weights[k - 1].shape[0]}")

    @property
    def depth(self):
        return len(self.weights)

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def sizes(self):
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def params(self):
        """Parameter arrays in declared order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def touch(self):
        """Mark parameters as changed so old caches are rejected."""
        self.version = next(_versions)

    def copy(self):
        return DenseNet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.alpha, self.output)

    def all_finite(self):
        return all(np.isfinite(p).all() for p in self.params())

    def __call__(self, x):
        return mlp_forward(self, x)[0]


@dataclass
class Cache:
    inputs: list  # input to each layer
    pre: list  # pre-activation of each layer
    slopes: list  # leaky-ReLU derivative at each hidden pre-activation
    version: int
    vector: bool  # caller passed a single vector


@dataclass
class GradBundle:
    weights: list
    biases: list
    inputs: np.ndarray = None

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def scaled(self, s):
        return GradBundle([s * w for w in self.weights], [s * b for b in self.biases],
                          None if self.inputs is None else s * self.inputs)

    def __add__(self, other):
        if other is None:
            return self
        return GradBundle([a + b for a, b in zip(self.weights, other.weights)],
                          [a + b for a, b in zip(self.biases, other.biases)],
                          None)

    __radd__ = __add__


def zero_grads(net):
    return GradBundle([np.zeros_like(w) for w in net.weights],
                      [np.zeros_like(b) for b in net.biases])


def leaky_relu(h, alpha):
    return np.where(h > 0, h, alpha * h)


def leaky_slope(h, alpha):
    return np.where(h > 0, 1.0, alpha)


def mlp_forward(net, x):
    x = np.asarray(x, dtype=np.float64)
    vector = x.ndim == 1
    a = x[None, :] if vector else x
    if a.ndim != 2 or a.shape[1] != net.in_dim:
        raise ShapeMismatch(f"input of shape {x.shape} for a net expecting {net.in_dim} features")
    inputs, pre, slopes = [], [], []
    last = net.depth - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(a)
        h = a @ w.T
        h += b
        pre.append(h)
        if k < last:
            s = leaky_slope(h, net.alpha)
            slopes.append(s)
            a = h * s
        else:
            a = h
    cache = Cache(inputs, pre, slopes, net.version, vector)
    return (a[0] if vector else a), cache


def mlp_backward(net, cache, dy):
    """Gradients of sum(dy * y) with respect to every parameter and the input."""
    if cache.version != net.version:
        raise StaleCache("cache was recorded against different parameters")
    dy = np.asarray(dy, dtype=np.float64)
    if cache.vector:
        dy = dy[None, :]
    if dy.shape != cache.pre[-1].shape:
        raise ShapeMismatch(f"dy shape {dy.shape} != output shape {cache.pre[-1].shape}")
    dws, dbs = [None] * net.depth, [None] * net.depth
    delta = dy
    for k in range(net.depth - 1, -1, -1):
        dws[k] = delta.T @ cache.inputs[k]
        dbs[k] = delta.sum(axis=0)
        da = delta @ net.weights[k]
        if k:
            delta = da * cache.slopes[k - 1]
    return GradBundle(dws, dbs, da[0] if cache.vector else da)


def input_gradient(net, x):
    """Per-row gradient of a scalar-output net with respect to its input.

    Returns (y, g, trace) where trace feeds :func:`input_gradient_norm_backward`.
    """
    if net.out_dim != 1:
        raise ShapeMismatch("input_gradient needs a scalar-output net")
    y, cache = mlp_forward(net, np.atleast_2d(x))
    deltas = [None] * net.depth
    slopes = cache.slopes
    delta = np.ones_like(cache.pre[-1])
    for k in range(net.depth - 1, -1, -1):
        deltas[k] = delta
        da = delta @ net.weights[k]
        if k:
            delta = da * slopes[k - 1]
    return y, da, (deltas, slopes, net.version)


def input_gradient_norm_backward(net, trace, dg):
    """Parameter gradient of sum(dg * g) where g is the input gradient.

    The input gradient of a leaky-ReLU net is piecewise linear in the weights
    and locally constant in the biases, so bias gradients are zero.
    """
    deltas, slopes, version = trace
    if version != net.version:
        raise StaleCache("trace was recorded against different parameters")
    dws = [None] * net.depth
    lam = dg
    for k in range(net.depth):
        dws[k] = deltas[k].T @ lam
        if k == net.depth - 1:
            break
        lam = (lam @ net.weights[k].T) * slopes[k]
    return GradBundle(dws, [np.zeros_like(b) for b in net.biases])


def init_net(rng, layer_sizes, alpha=0.2, output="identity"):
    """He-style init for leaky ReLU: N(0, 2 / (fan_in * (1 + alpha^2))), zero biases."""
    if len(layer_sizes) < 2 or any(int(s) < 1 for s in layer_sizes):
        raise RangeError(f"bad layer sizes {layer_sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        std = np.sqrt(2.0 / (fan_in * (1.0 + alpha**2)))
        weights.append(rng.normal((fan_out, fan_in)) * std)
        biases.append(np.zeros(fan_out))
    return DenseNet(weights, biases, alpha, output)


def mlp_sizes(d_in, d_out, depth, width):
    """Layer sizes for ``depth`` affine layers with ``width`` hidden units."""
    if depth < 1:
        raise RangeError("depth must be >= 1")
    return [d_in] + [width] * (depth - 1) + [d_out]


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls([np.zeros_like(p) for p in net.params()],
                   [np.zeros_like(p) for p in net.params()], 0, lr, beta1, beta2, eps)


def adam_step(params, grads, state):
    """Bias-corrected Adam update applied in place.

    ``params`` is a DenseNet or a list of arrays; ``grads`` a GradBundle or a
    matching list.  Returns (params, state).
    """
    net = params if isinstance(params, DenseNet) else None
    plist = net.params() if net is not None else list(params)
    glist = grads.params() if isinstance(grads, GradBundle) else list(grads)
    if len(plist) != len(glist) or len(plist) != len(state.m):
        raise ShapeMismatch("parameter, gradient and optimizer state counts differ")
    for p, g in zip(plist, glist):
        if p.shape != np.shape(g):
            raise ShapeMismatch(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient("non-finite gradient passed to adam_step")
    if state.lr < 0:
        raise RangeError("learning rate must be >= 0")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(plist, glist, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    if net is not None:
        net.touch()
    return params, state


def grad_check(loss, params, h=1e-5, rng=None, max_coords=None):
    """Max relative error between analytic and central-difference gradients.

    ``loss(params)`` returns ``(value, grads)`` with grads matching ``params``.
    Parameters are perturbed in place and restored.  With ``max_coords`` only a
    random subset of coordinates per array is checked.
    """
    if not 1e-7 <= h <= 1e-3:
        raise RangeError("step h must lie in [1e-7, 1e-3]")
    value, grads = loss(params)
    if not np.isfinite(value):
        raise NonFiniteLoss("loss is not finite at the base point")
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g, dtype=np.float64).reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, max_coords, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = loss(params)[0]
            flat[i] = old - h
            down = loss(params)[0]
            flat[i] = old
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteLoss(f"loss not finite near coordinate {i}")
            numeric = (up - down) / (2 * h)
            analytic = gflat[i]
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
    return worst
