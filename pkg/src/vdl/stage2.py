"""Toy second stage: a conditional generator trained by reconstruction.

The generator produces ``h([s; g([z_txt; z_img])])`` where ``s`` is Gaussian
noise and ``g`` builds a conditioning code from the text/image pair.  During
training the text half comes from the frozen stage-1 encoder; at inference
the image half comes from the stage-1 decoder, so true image embeddings are
never needed.
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import data as vdata
from .errors import NonFiniteLoss, RangeError, ShapeMismatch, VersionMismatch
from .net import AdamState, adam_step, init_net, mlp_backward, mlp_forward, mlp_sizes
from .numerics import Rng
from .sampler import svdl_sample

CHECKPOINT_KIND = "vdl-stage2"


@dataclass
class Stage2Config:
    iters: int = 2000
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0
    noise_dim: int = 8
    d_c: int = None  # defaults to the embedding dim
    g_width: int = 64
    h_depth: int = 3
    h_width: int = 128
    zero_condition: bool = False

    def __post_init__(self):
        if self.iters < 0 or self.batch < 1 or self.lr <= 0:
            raise RangeError("iters >= 0, batch >= 1 and lr > 0 required")
        if self.noise_dim < 0 or self.h_depth < 1:
            raise RangeError("noise_dim >= 0 and h_depth >= 1 required")


@dataclass
class ToyGenerator:
    g: object
    h: object
    noise_dim: int
    zero_condition: bool = False

    @property
    def d_c(self):
        return self.g.out_dim

    @property
    def d_x(self):
        return self.h.out_dim

    def nets(self):
        return {"g": self.g, "h": self.h}


def make_generator(rng, d, d_x, config):
    d_c = config.d_c or d
    if d_x < 1:
        raise RangeError("d_x must be >= 1")
    g = init_net(rng.child("g"), [2 * d, config.g_width, d_c])
    h = init_net(rng.child("h"), mlp_sizes(config.noise_dim + d_c, d_x, config.h_depth,
                                           config.h_width))
    return ToyGenerator(g, h, config.noise_dim, config.zero_condition)


def generate(gen, z_txt, z_img, noise):
    """Forward pass; returns (images, caches for :func:`_generator_backward`)."""
    cond_in = np.concatenate([np.atleast_2d(z_txt), np.atleast_2d(z_img)], axis=1)
    if cond_in.shape[1] != gen.g.in_dim:
        raise ShapeMismatch(f"conditioning input has {cond_in.shape[1]} features, "
                            f"g expects {gen.g.in_dim}")
    c, g_cache = mlp_forward(gen.g, cond_in)
    if gen.zero_condition:
        c = np.zeros_like(c)
    x, h_cache = mlp_forward(gen.h, np.concatenate([noise, c], axis=1))
    return x, (g_cache, h_cache)


def _generator_backward(gen, caches, dx):
    g_cache, h_cache = caches
    gh = mlp_backward(gen.h, h_cache, dx)
    dc = gh.inputs[:, gen.noise_dim:]
    if gen.zero_condition:
        dc = np.zeros_like(dc)
    gg = mlp_backward(gen.g, g_cache, dc)
    gh.inputs = gg.inputs = None
    return gg, gh


def _content(data):
    return data.content if data.content is not None else data.z_img


def mse(a, b):
    return float(np.mean((a - b) ** 2))


def train_stage2(model, gen, world, data, config):
    """Fit the generator by MSE to rendered toy images; the stage-1 model stays frozen."""
    if data.d != model.G.in_dim:
        raise ShapeMismatch("dataset and stage-1 model dims differ")
    rng = Rng(config.seed).child("stage2")
    opt = {k: AdamState.for_net(n, config.lr) for k, n in gen.nets().items()}
    content = _content(data)
    losses = []
    for it in range(config.iters):
        idx = rng.choice(len(data), config.batch, replace=config.batch > len(data))
        z_img = data.z_img[idx]
        target = world.render(content[idx])
        z_txt_hat = svdl_sample(z_img, model.G, model.r_txt)
        noise = rng.normal((len(idx), gen.noise_dim))
        x, caches = generate(gen, z_txt_hat, z_img, noise)
        loss = mse(x, target)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"non-finite stage-2 loss at iteration {it}", it)
        gg, gh = _generator_backward(gen, caches, 2.0 * (x - target) / x.size)
        adam_step(gen.g, gg, opt["g"])
        adam_step(gen.h, gh, opt["h"])
        losses.append(loss)
    return gen, losses


def heldout_mse(model, gen, world, data, seed=0):
    """MSE on held-out pairs, conditioning exactly as in training."""
    rng = Rng(seed).child("stage2-eval")
    z_txt_hat = svdl_sample(data.z_img, model.G, model.r_txt)
    noise = rng.normal((len(data), gen.noise_dim))
    x, _ = generate(gen, z_txt_hat, data.z_img, noise)
    return mse(x, world.render(_content(data)))


def infer_t2i(model, gen, z_txt, rng, return_latent=False):
    """Toy image from text alone: the image half comes from the decoder F."""
    z_txt = np.asarray(z_txt, dtype=np.float64)
    vector = z_txt.ndim == 1
    zt = np.atleast_2d(z_txt)
    z_img_hat = svdl_sample(zt, model.F, model.r_img)
    noise = rng.normal((len(zt), gen.noise_dim))
    x, _ = generate(gen, zt, z_img_hat, noise)
    if vector:
        x, z_img_hat = x[0], z_img_hat[0]
    return (x, z_img_hat) if return_latent else x


def save_generator(path, gen, config):
    tensors = {}
    for name, net in gen.nets().items():
        tensors.update(vdata.net_tensors(f"gen.{name}", net))
    cfg = {"kind": CHECKPOINT_KIND, "stage2_config": asdict(config), "noise_dim": gen.noise_dim,
           "zero_condition": gen.zero_condition}
    vdata.save_checkpoint(path, tensors, None, cfg)


def load_generator(path):
    tensors, _, cfg = vdata.load_checkpoint(path)
    if cfg.get("kind") != CHECKPOINT_KIND:
        raise VersionMismatch(f"{path} is not a stage-2 generator")
    g = vdata.net_from_tensors("gen.g", tensors)
    h = vdata.net_from_tensors("gen.h", tensors)
    return ToyGenerator(g, h, cfg["noise_dim"], cfg["zero_condition"]), Stage2Config(**cfg["stage2_config"])
