"""Vector primitives on the unit hypersphere and the seeded random source.

Everything works in float64.  Vectors are plain numpy arrays; a batch is a
2-D array with one embedding per row.
"""
import hashlib

import numpy as np

from .errors import RangeError, ZeroVector

ZERO_NORM = 1e-12
UNIT_TOL = 1e-9

RNG_ALGORITHM = "pcg64"


def label_key(label):
    """Stable 64-bit integer for a stream label (str or int)."""
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Seeded, splittable random stream.

    Backed by numpy's PCG64 (128-bit state plus 128-bit increment).  Child
    streams are derived from the parent's seed and a path of labels, so
    ``Rng(7).child("data")`` is the same stream on every run and platform no
    matter how much the parent has been consumed.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed, path=()):
        if not 0 <= int(seed) < 2**64:
            raise RangeError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, label):
        return Rng(self.seed, self.path + (label_key(label),))

    # state ------------------------------------------------------------
    def get_state(self):
        s = self._gen.bit_generator.state
        return {
            "algorithm": self.algorithm,
            "seed": self.seed,
            "path": list(self.path),
            "state": int(s["state"]["state"]),
            "inc": int(s["state"]["inc"]),
            "has_uint32": int(s["has_uint32"]),
            "uinteger": int(s["uinteger"]),
        }

    def set_state(self, state):
        if state["algorithm"] != self.algorithm:
            raise ValueError(f"cannot restore {state['algorithm']!r} state into {self.algorithm}")
        self.seed = int(state["seed"])
        self.path = tuple(state["path"])
        self._gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(state["state"]), "inc": int(state["inc"])},
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    @classmethod
    def from_state(cls, state):
        rng = cls(state["seed"], state["path"])
        rng.set_state(state)
        return rng

    # draws ------------------------------------------------------------
    def normal(self, size):
        return self._gen.standard_normal(size)

    def uniform(self, size=None):
        return self._gen.random(size)

    def integers(self, high, size=None):
        return self._gen.integers(0, high, size=size)

    def uint64(self, size):
        return self._gen.integers(0, 2**64, size=size, dtype=np.uint64, endpoint=False)

    def choice(self, n, size, replace=True):
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def as_rng(rng):
    return rng if isinstance(rng, Rng) else Rng(rng)


def norms(x):
    x = np.asarray(x, dtype=np.float64)
    return np.linalg.norm(x, axis=-1)


def normalize(v):
    """Divide a vector (or every row of a batch) by its Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n <= ZERO_NORM):
        raise ZeroVector("cannot normalize a vector with norm <= 1e-12")
    return v / n


def cosine(u, v):
    """Cosine similarity; row-wise when given batches."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    if np.any(nu <= ZERO_NORM) or np.any(nv <= ZERO_NORM):
        raise ZeroVector("cosine of a zero vector is undefined")
    c = np.sum(u * v, axis=-1) / (nu * nv)
    return float(c) if c.ndim == 0 else c


def is_unit(x, tol=UNIT_TOL):
    return bool(np.all(np.abs(norms(x) - 1.0) <= tol))


def check_unit(x, tol=UNIT_TOL, what="embedding"):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise RangeError(f"{what} dimension must be >= 2")
    if not is_unit(x, tol):
        worst = float(np.max(np.abs(norms(x) - 1.0)))
        raise ValueError(f"{what} rows are not unit-norm (max deviation {worst:.3g})")
    return x


def sample_gaussian(rng, d):
    if d < 1:
        raise RangeError("d must be >= 1")
    return rng.normal(d)


def sample_unit(rng, d, n=None):
    """Uniform draw(s) on the unit sphere in R^d (one vector, or n rows)."""
    if d < 2:
        raise RangeError("d must be >= 2")
    shape = d if n is None else (n, d)
    x = rng.normal(shape)
    nrm = np.linalg.norm(x, axis=-1, keepdims=True)
    # a near-zero Gaussian draw is redrawn; probability is ~0 for d >= 2
    bad = (nrm <= ZERO_NORM).reshape(-1)
    while bad.any():
        if n is None:
            x = rng.normal(d)
        else:
            x[bad] = rng.normal((int(bad.sum()), d))
        nrm = np.linalg.norm(x, axis=-1, keepdims=True)
        bad = (nrm <= ZERO_NORM).reshape(-1)
    return x / nrm


def tangent_project(v, u):
    """Component of each row of v orthogonal to the matching unit row of u."""
    return v - np.sum(v * u, axis=-1, keepdims=True) * u


def random_rotation(rng, d):
    """Haar-distributed orthogonal matrix."""
    q, r = np.linalg.qr(rng.normal((d, d)))
    return q * np.sign(np.diag(r))
