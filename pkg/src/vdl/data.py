"""Synthetic two-modality world and the on-disk formats.

The world stands in for a CLIP-like encoder pair.  Content ``u`` is uniform
on the sphere; its image embedding is ``u`` itself and its text embedding
sits at a fixed angle from ``u`` along a hidden direction field::

    n(u)  = Normalize(P_perp(u) M u)
    z_txt = Normalize(gap_cos * u + sqrt(1 - gap_cos^2) * n(u) + kappa * noise)

where ``noise`` is tangent Gaussian noise with expected norm ~1.

Embedding files (``.vdle``)::

    "VDLE" | version u16 | dim u32 | count u64 | count*dim float64, all little-endian

Checkpoint files (``.vdlc``)::

    "VDLC" | version u16 | n u32 | n named tensors | rng block | config JSON

with each tensor stored as ``name_len u16, name, rank u8, dims u32..., float64
payload`` and the config as ``len u32, UTF-8 JSON``.
"""
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import BadMagic, CorruptLength, RangeError, ShapeMismatch, VersionMismatch

EMB_MAGIC = b"VDLE"
EMB_VERSION = 1
CKPT_MAGIC = b"VDLC"
CKPT_VERSION = 1
_EMB_HEADER = struct.Struct("<4sHIQ")

IoError = OSError


@dataclass
class SyntheticWorld:
    seed: int
    d: int
    gap_cos: float
    kappa: float
    M: np.ndarray
    render_w: np.ndarray
    render_b: np.ndarray

    @property
    def d_x(self):
        return self.render_w.shape[0]

    def params(self):
        return {"seed": self.seed, "d": self.d, "gap_cos": self.gap_cos, "kappa": self.kappa,
                "d_x": self.d_x}

    def render(self, content):
        """Toy image of each content row: tanh(A u + c)."""
        return np.tanh(np.atleast_2d(content) @ self.render_w.T + self.render_b)


@dataclass
class PairedDataset:
    z_img: np.ndarray
    z_txt: np.ndarray
    labeled: np.ndarray
    content: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.z_img)
        if self.z_txt is not None and len(self.z_txt) != n:
            raise ShapeMismatch("image and text row counts differ")
        if len(self.labeled) != n:
            raise ShapeMismatch("labeled mask length differs from row count")

    def __len__(self):
        return len(self.z_img)

    @property
    def d(self):
        return self.z_img.shape[1]

    def subset(self, idx):
        return PairedDataset(self.z_img[idx],
                             None if self.z_txt is None else self.z_txt[idx],
                             self.labeled[idx],
                             None if self.content is None else self.content[idx],
                             dict(self.meta))


def make_world(seed, d, gap_cos, kappa=0.0, d_x=64):
    if d < 2:
        raise RangeError("d must be >= 2")
    if not 0.0 < gap_cos <= 1.0:
        raise RangeError(f"gap_cos must lie in (0, 1], got {gap_cos}")
    if kappa < 0:
        raise RangeError("kappa must be >= 0")
    if d_x < 1:
        raise RangeError("d_x must be >= 1")
    root = nx.Rng(seed).child("world")
    M = root.child("direction").normal((d, d))
    rr = root.child("render")
    render_w = rr.normal((d_x, d)) * (1.5 / np.sqrt(d))
    render_b = rr.normal(d_x) * 0.1
    return SyntheticWorld(int(seed), int(d), float(gap_cos), float(kappa), M, render_w, render_b)


def direction_field(world, u):
    """Unit tangent direction n(u) for each content row, plus a degeneracy mask."""
    m = u @ world.M.T
    t = nx.tangent_project(m, u)
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    bad = tn[:, 0] <= 1e-12 * np.maximum(1.0, np.linalg.norm(m, axis=1))
    return t / np.where(bad[:, None], 1.0, tn), bad


def _contents_and_text(world, n, rng):
    u = nx.sample_unit(rng, world.d, n)
    nd, bad = direction_field(world, u)
    retries = 0
    while bad.any():
        # M u parallel to u: nudge the content and try again
        retries += int(bad.sum())
        u[bad] = nx.normalize(u[bad] + 1e-3 * rng.normal((int(bad.sum()), world.d)))
        nd, bad = direction_field(world, u)
    s = np.sqrt(max(0.0, 1.0 - world.gap_cos**2))
    z = world.gap_cos * u + s * nd
    if world.kappa > 0:
        noise = nx.tangent_project(rng.normal((n, world.d)) / np.sqrt(world.d), u)
        z = z + world.kappa * noise
    return u, nx.normalize(z), retries


def sample_pairs(world, n, rng, semi_ratio=0.0):
    if n < 1:
        raise RangeError("n must be >= 1")
    if not 0.0 <= semi_ratio <= 1.0:
        raise RangeError("semi_ratio must lie in [0, 1]")
    u, z_txt, retries = _contents_and_text(world, n, rng)
    labeled = np.zeros(n, dtype=bool)
    n_lab = int(round(semi_ratio * n))
    if n_lab:
        labeled[rng.choice(n, n_lab, replace=False)] = True
    meta = {"world": world.params(), "semi_ratio": semi_ratio, "degenerate_retries": retries}
    return PairedDataset(u.copy(), z_txt, labeled, u, meta)


def make_prior_pool(world, m, rng):
    """Unpaired text embeddings from fresh content (the 'text corpus')."""
    if m < 1:
        raise RangeError("m must be >= 1")
    return _contents_and_text(world, m, rng)[1]


# embedding files --------------------------------------------------------------

def write_embeddings(path, batch, meta=None):
    batch = np.ascontiguousarray(np.atleast_2d(batch), dtype="<f8")
    count, dim = batch.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, dim, count))
        fh.write(batch.tobytes())
    if meta is not None:
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_embeddings(path):
    raw = Path(path).read_bytes()
    if len(raw) < _EMB_HEADER.size:
        raise CorruptLength(f"{path}: file shorter than the header")
    magic, version, dim, count = _EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != EMB_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {EMB_VERSION}")
    if dim < 1:
        raise CorruptLength(f"{path}: zero dimension")
    if len(raw) - _EMB_HEADER.size != count * dim * 8:
        raise CorruptLength(f"{path}: payload is {len(raw) - _EMB_HEADER.size} bytes, "
                            f"header promises {count * dim * 8}")
    data = np.frombuffer(raw, dtype="<f8", offset=_EMB_HEADER.size).reshape(count, dim)
    return data.astype(np.float64)


def read_metadata(path):
    p = Path(str(path) + ".json")
    return json.loads(p.read_text()) if p.exists() else {}


DATASET_FILES = {"img": "img.vdle", "txt": "txt.vdle", "labeled": "labeled.vdle",
                 "prior": "prior.vdle"}


def write_dataset(out_dir, data, pool, meta):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(out / DATASET_FILES["img"], data.z_img, {"role": "z_img"})
    write_embeddings(out / DATASET_FILES["txt"], data.z_txt, {"role": "z_txt"})
    write_embeddings(out / DATASET_FILES["labeled"], data.labeled.astype(np.float64)[:, None],
                     {"role": "labeled_mask"})
    write_embeddings(out / DATASET_FILES["prior"], pool, {"role": "z_txt_prior"})
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_dataset(in_dir):
    """Load (PairedDataset, prior pool, metadata) from a gen-data directory."""
    src = Path(in_dir)
    meta = json.loads((src / "metadata.json").read_text())
    z_img = read_embeddings(src / DATASET_FILES["img"])
    z_txt = read_embeddings(src / DATASET_FILES["txt"])
    mask = read_embeddings(src / DATASET_FILES["labeled"])
    if mask.shape[1] != 1 or not np.isin(mask, (0.0, 1.0)).all():
        raise CorruptLength(f"{src}: labeled mask must be one 0/1 column")
    pool = read_embeddings(src / DATASET_FILES["prior"])
    for name, arr in (("img", z_img), ("txt", z_txt), ("prior", pool)):
        nx.check_unit(arr, what=name)
    data = PairedDataset(z_img, z_txt, mask[:, 0] > 0.5, None, meta)
    return data, pool, meta


def generate(seed, d, count, gap_cos, kappa, semi_ratio=0.0, pool_size=4096, d_x=64):
    """Training pairs and prior pool for a seed, each from its own stream."""
    world = make_world(seed, d, gap_cos, kappa, d_x)
    root = nx.Rng(seed)
    data = sample_pairs(world, count, root.child("train"), semi_ratio)
    pool = make_prior_pool(world, pool_size, root.child("prior"))
    return world, data, pool


def heldout(world, n, seed=None):
    """Held-out pairs on a stream never used for training data."""
    seed = world.seed if seed is None else seed
    return sample_pairs(world, n, nx.Rng(seed).child("heldout"))


def world_from_meta(meta):
    w = meta["world"]
    return make_world(w["seed"], w["d"], w["gap_cos"], w["kappa"], w.get("d_x", 64))


# checkpoints ------------------------------------------------------------------

def _pack_u128(x):
    return int(x).to_bytes(16, "little")


def save_checkpoint(path, tensors, rng_state=None, config=None):
    """Write named tensors, an optional PRNG state and a JSON config echo."""
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    if rng_state is None:
        parts.append(b"\x00")
    else:
        alg = rng_state["algorithm"].encode("ascii")
        path_keys = rng_state["path"]
        parts.append(b"\x01" + struct.pack("<H", len(alg)) + alg)
        parts.append(struct.pack("<QH", rng_state["seed"], len(path_keys)))
        parts.append(struct.pack(f"<{len(path_keys)}Q", *path_keys))
        parts.append(_pack_u128(rng_state["state"]) + _pack_u128(rng_state["inc"]))
        parts.append(struct.pack("<BI", rng_state["has_uint32"], rng_state["uinteger"]))
    cfg = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)) + cfg)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CorruptLength(f"{self.path}: truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))


def load_checkpoint(path):
    """Returns (tensors dict, rng state dict or None, config dict)."""
    rd = _Reader(Path(path).read_bytes(), path)
    if rd.take(4) != CKPT_MAGIC:
        raise BadMagic(f"{path}: not a checkpoint")
    version, count = rd.unpack("HI")
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    tensors = {}
    for _ in range(count):
        (nlen,) = rd.unpack("H")
        name = rd.take(nlen).decode("utf-8")
        (rank,) = rd.unpack("B")
        dims = rd.unpack(f"{rank}I")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(rd.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
        tensors[name] = arr
    (has_rng,) = rd.unpack("B")
    rng_state = None
    if has_rng == 1:
        (alen,) = rd.unpack("H")
        alg = rd.take(alen).decode("ascii")
        seed, plen = rd.unpack("QH")
        path_keys = list(rd.unpack(f"{plen}Q"))
        state = int.from_bytes(rd.take(16), "little")
        inc = int.from_bytes(rd.take(16), "little")
        has_uint32, uinteger = rd.unpack("BI")
        rng_state = {"algorithm": alg, "seed": seed, "path": path_keys, "state": state,
                     "inc": inc, "has_uint32": has_uint32, "uinteger": uinteger}
    elif has_rng != 0:
        raise CorruptLength(f"{path}: bad rng flag {has_rng}")
    (clen,) = rd.unpack("I")
    try:
        config = json.loads(rd.take(clen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptLength(f"{path}: unreadable config block ({exc})") from exc
    if rd.pos != len(rd.raw):
        raise CorruptLength(f"{path}: {len(rd.raw) - rd.pos} trailing bytes")
    return tensors, rng_state, config


def net_tensors(prefix, net):
    out = {}
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.W{k}"] = w
        out[f"{prefix}.b{k}"] = b
    return out


def net_from_tensors(prefix, tensors, alpha=0.2, output="identity"):
    from .net import DenseNet

    weights, biases = [], []
    k = 0
    while f"{prefix}.W{k}" in tensors:
        weights.append(tensors[f"{prefix}.W{k}"].copy())
        biases.append(tensors[f"{prefix}.b{k}"].copy())
        k += 1
    if not weights:
        raise ShapeMismatch(f"checkpoint has no tensors for {prefix!r}")
    return DenseNet(weights, biases, alpha, output)
