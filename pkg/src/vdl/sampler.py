"""Cone-constrained sampling on the sphere, plus the baseline samplers.

``svdl_sample(base, net, r)`` moves ``base`` by ``r`` along the unit direction
``net(base)`` and projects back onto the sphere.  Whatever the net outputs,
the result stays within the cone ``cos >= sqrt(1 - r^2)`` around ``base``.
"""
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import EmptyPool, RangeError, ShapeMismatch
from .net import DenseNet, init_net, mlp_backward, mlp_forward, mlp_sizes


@dataclass(frozen=True)
class SvdlConfig:
    r: float = 0.7

    def __post_init__(self):
        check_radius(self.r)


def check_radius(r):
    if not 0.0 <= r < 1.0:
        raise RangeError(f"radius r must lie in [0, 1), got {r}")
    return r


@dataclass
class SvdlCache:
    base: np.ndarray
    net_cache: object
    direction: np.ndarray  # net output scaled to unit length (zero rows when degenerate)
    out_norm: np.ndarray  # ||net(base)||
    shifted_norm: np.ndarray  # ||base + r * direction||
    out: np.ndarray
    degenerate: np.ndarray  # bool mask
    r: float
    vector: bool


def svdl_forward(base, net, r):
    """Batched sampler returning (samples, cache for :func:`svdl_backward`)."""
    check_radius(r)
    base = np.asarray(base, dtype=np.float64)
    vector = base.ndim == 1
    b = base[None, :] if vector else base
    if net.in_dim != b.shape[1] or net.out_dim != b.shape[1]:
        raise ShapeMismatch(f"net maps {net.in_dim}->{net.out_dim}, base has dim {b.shape[1]}")
    g, net_cache = mlp_forward(net, b)
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    degenerate = gn[:, 0] <= nx.ZERO_NORM
    safe = np.where(degenerate[:, None], 1.0, gn)
    direction = np.where(degenerate[:, None], 0.0, g / safe)
    if r == 0.0:
        out = b.copy()
        sn = np.ones_like(gn)
    else:
        s = b + r * direction
        sn = np.linalg.norm(s, axis=1, keepdims=True)
        out = np.where(degenerate[:, None], b, s / sn)
    cache = SvdlCache(b, net_cache, direction, gn, sn, out, degenerate, r, vector)
    return (out[0] if vector else out), cache


def svdl_sample(base, net, r):
    return svdl_forward(base, net, r)[0]


def svdl_backward(net, cache, d_out):
    """Exact reverse pass through both normalizations and the net.

    Returns (GradBundle for the net's parameters, gradient w.r.t. base).
    """
    d_out = np.asarray(d_out, dtype=np.float64)
    if cache.vector:
        d_out = d_out[None, :]
    out, r = cache.out, cache.r
    if r == 0.0:
        g = mlp_backward(net, cache.net_cache, np.zeros_like(d_out))
        return g, (d_out[0] if cache.vector else d_out.copy())
    # out = s / ||s||,  s = base + r * u,  u = g / ||g||
    ds = (d_out - np.sum(d_out * out, axis=1, keepdims=True) * out) / cache.shifted_norm
    du = r * ds
    u = cache.direction
    safe = np.where(cache.degenerate[:, None], 1.0, cache.out_norm)
    dg = (du - np.sum(du * u, axis=1, keepdims=True) * u) / safe
    dg[cache.degenerate] = 0.0
    ds[cache.degenerate] = d_out[cache.degenerate]
    grads = mlp_backward(net, cache.net_cache, dg)
    d_base = ds + grads.inputs
    grads.inputs = None
    return grads, (d_base[0] if cache.vector else d_base)


def prop1_bound(r):
    """Lower bound on cos(sample, base) for radius r."""
    check_radius(r)
    return float(np.sqrt(1.0 - r * r))


@dataclass
class Prop1Report:
    trials: int
    violations: int
    min_slack: float
    worst: dict

    @property
    def passed(self):
        return self.violations == 0


def verify_prop1(rng, trials=10_000, dims=(4, 16, 64), rs=(0.1, 0.3, 0.5, 0.7, 0.9),
                 depth=3, width=16, tol=1e-9):
    """Randomized check of the cone bound over fresh nets and bases.

    Trials are spread round-robin over every (dim, r) pair.  Slack is
    ``cos(sample, base) - sqrt(1 - r^2)``; a violation is slack < -tol.
    """
    if trials < 1:
        raise RangeError("trials must be >= 1")
    combos = [(int(d), float(r)) for d in dims for r in rs]
    violations = 0
    min_slack = np.inf
    worst = {}
    for t in range(trials):
        d, r = combos[t % len(combos)]
        net = init_net(rng, mlp_sizes(d, d, depth, width))
        # random biases so outputs are not tied to the init scheme
        for b in net.biases:
            b[:] = rng.normal(b.shape)
        base = nx.sample_unit(rng, d)
        out = svdl_sample(base, net, r)
        slack = float(np.dot(out, base)) - prop1_bound(r)
        if slack < -tol:
            violations += 1
        if slack < min_slack:
            min_slack = slack
            worst = {"trial": t, "d": d, "r": r, "slack": slack}
    return Prop1Report(trials, violations, float(min_slack), worst)


def direction_net(direction, base):
    """Single linear layer whose output at ``base`` is exactly ``direction``."""
    direction = np.asarray(direction, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    w = np.outer(direction, base) / np.dot(base, base)
    return DenseNet([w], [np.zeros(len(direction))])


def prop1_tight_slack(rng, d, r):
    """Slack of the equality case: direction with ``base . direction = -r``."""
    check_radius(r)
    base = nx.sample_unit(rng, d)
    t = nx.normalize(nx.tangent_project(rng.normal(d), base))
    direction = -r * base + np.sqrt(1.0 - r * r) * t
    out = svdl_sample(base, direction_net(direction, base), r)
    return float(np.dot(out, base)) - prop1_bound(r)


def prior_sample(pool, rng, n=None):
    """Uniformly random row(s) of the text prior pool."""
    pool = np.asarray(pool)
    if pool.ndim != 2 or len(pool) == 0:
        raise EmptyPool("prior pool is empty")
    if n is None:
        return pool[rng.integers(len(pool))].copy()
    return pool[rng.integers(len(pool), size=n)]


def lafite_sample(z_img, xi, rng, eps=None):
    """Image embedding pushed by xi * ||z_img|| along a random Gaussian direction."""
    if xi < 0:
        raise RangeError("xi must be >= 0")
    z = np.asarray(z_img, dtype=np.float64)
    if xi == 0:
        return z.copy()
    if eps is None:
        eps = rng.normal(z.shape)
    eps = np.asarray(eps, dtype=np.float64)
    scale = xi * np.linalg.norm(z, axis=-1, keepdims=True)
    return nx.normalize(z + scale * eps / np.linalg.norm(eps, axis=-1, keepdims=True))


def clipgen_sample(z_img):
    """Identity proxy: the image embedding stands in for the text embedding."""
    return np.array(z_img, dtype=np.float64, copy=True)
