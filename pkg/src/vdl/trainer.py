"""Stage-1 training: alternating critic ascent and encoder/decoder descent."""
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import data as vdata
from . import losses as L
from .errors import EmptyPool, NonFiniteGradient, NonFiniteLoss, RangeError, ShapeMismatch, VersionMismatch
from .metrics import MetricsReport, sim_img, sim_txt
from .net import AdamState, adam_step, init_net, mlp_sizes
from .numerics import RNG_ALGORITHM, Rng
from .sampler import check_radius, prior_sample, svdl_forward, svdl_sample

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "vdl-stage1"


@dataclass
class TrainConfig:
    d: int = 32
    batch: int = 64
    iters: int = 5000
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 250
    d_steps_per_g_step: int = 1
    semi_ratio: float = 0.0
    deterministic: bool = True
    depth: int = 4
    width: int = 128
    alpha: float = 0.2
    r: float = 0.95
    r_txt: float = None
    r_img: float = None
    gen_loss: str = "nonsaturating"
    r1_every: int = 1
    dv_ema_decay: float = 0.99
    n_eval: int = 1024
    eval_loss_rows: int = 256
    sim_img_from_sampled: bool = False

    def __post_init__(self):
        if self.batch < 4:
            raise RangeError("batch must be >= 4 (RKD needs triplets)")
        if self.iters < 0:
            raise RangeError("iters must be >= 0")
        if not 0.0 <= self.semi_ratio <= 1.0:
            raise RangeError("semi_ratio must lie in [0, 1]")
        if self.lr <= 0:
            raise RangeError("lr must be > 0")
        if min(self.eval_every, self.d_steps_per_g_step, self.r1_every, self.depth,
               self.width) < 1:
            raise RangeError("eval_every, d_steps_per_g_step, r1_every, depth, width must be >= 1")
        if self.gen_loss not in L.GEN_LOSSES:
            raise RangeError(f"gen_loss must be one of {L.GEN_LOSSES}")
        check_radius(self.radius_txt)
        check_radius(self.radius_img)

    @property
    def radius_txt(self):
        return self.r if self.r_txt is None else self.r_txt

    @property
    def radius_img(self):
        return self.r if self.r_img is None else self.r_img


@dataclass
class VdlModel:
    G: object
    F: object
    D: object
    T: object = None
    r_txt: float = 0.7
    r_img: float = 0.7
    weights: L.LossWeights = field(default_factory=L.LossWeights)

    @property
    def critic(self):
        return self.T if self.weights.divergence == "dv" else self.D

    def nets(self):
        out = {"G": self.G, "F": self.F, "D": self.D}
        if self.T is not None:
            out["T"] = self.T
        return out

    def all_finite(self):
        return all(n.all_finite() for n in self.nets().values())


def build_model(config, weights, rng):
    """Fresh G, F (d -> d), D and, in DV mode, T (d -> 1)."""
    d, depth, width, a = config.d, config.depth, config.width, config.alpha
    G = init_net(rng.child("G"), mlp_sizes(d, d, depth, width), a)
    F = init_net(rng.child("F"), mlp_sizes(d, d, depth, width), a)
    D = init_net(rng.child("D"), mlp_sizes(d, 1, depth, width), a, output="logit")
    T = None
    if weights.divergence == "dv":
        T = init_net(rng.child("T"), mlp_sizes(d, 1, depth, width), a, output="logit")
    return VdlModel(G, F, D, T, config.radius_txt, config.radius_img, weights)


def eval_model(model, heldout, iteration=0, priors=None, counters=None, from_sampled=False,
               loss_rows=256):
    """Sim_txt, Sim_img and every loss component on a held-out batch."""
    zt_hat = svdl_sample(heldout.z_img, model.G, model.r_txt)
    report = {"iteration": int(iteration),
              "sim_txt": sim_txt(zt_hat, heldout.z_txt),
              "sim_img": sim_img(model, heldout, from_sampled)}
    rows = min(len(heldout), loss_rows)
    sub = heldout.subset(np.arange(rows))
    if priors is None:
        priors = sub.z_txt
    priors = priors[:rows]
    triplets = L.sample_triplets(Rng(0).child("eval-triplets"), rows)
    batch = L.Stage1Batch(sub.z_img, priors, triplets, sub.z_txt, sub.labeled)
    res = L.stage1_total(model, batch, model.weights)
    critic = model.critic
    logits_p = critic(priors)[:, 0]
    logits_f = critic(res.z_txt_hat)[:, 0]
    report.update(
        loss_adv_d=res.components["adv"],
        loss_adv_g=res.components["adv_g"],
        loss_recon=res.components["recon"],
        loss_rkd=res.components["rkd"],
        loss_semi=L.semi_loss(res.z_txt_hat, sub.z_txt),
        loss_r1=L.r1_penalty(critic, priors, model.weights.gamma_r1),
        d_mean_real=float(np.mean(1.0 / (1.0 + np.exp(-logits_p)))),
        d_mean_fake=float(np.mean(1.0 / (1.0 + np.exp(-logits_f)))),
    )
    for k, v in (counters or {}).items():
        report[k] = int(v)
    return MetricsReport(**report)


class Trainer:
    """Holds the full mutable training state so runs can stop and resume."""

    def __init__(self, config, data, prior_pool, weights=None, heldout=None, use_labels=None):
        self.config = config
        self.weights = weights or L.LossWeights()
        if data.d != config.d or prior_pool.shape[1] != config.d:
            raise ShapeMismatch(f"data dim {data.d} / pool dim {prior_pool.shape[1]} "
                                f"!= config d {config.d}")
        if len(prior_pool) == 0:
            raise EmptyPool("prior pool is empty")
        self.data = data
        self.pool = prior_pool
        self.heldout = heldout
        self.use_labels = config.semi_ratio > 0 if use_labels is None else use_labels
        if self.use_labels and not np.any(data.labeled):
            raise RangeError("semi-supervised training needs at least one labeled pair")
        root = Rng(config.seed)
        self.model = build_model(config, self.weights, root.child("init"))
        self.rng = root.child("loop")
        self.opt = {name: AdamState.for_net(net, config.lr) for name, net in self.model.nets().items()}
        self.ema = L.LogPartitionEMA(config.dv_ema_decay)
        self.iteration = 0
        self.history = []
        self.counters = {"degenerate_txt": 0, "degenerate_img": 0, "skipped_triplets": 0}

    # one iteration -------------------------------------------------------
    def _critic_step(self, z_img, priors, fakes):
        m, w, cfg = self.model, self.weights, self.config
        apply_r1 = w.gamma_r1 > 0 and self.iteration % cfg.r1_every == 0
        gamma = w.gamma_r1 * cfg.r1_every
        if w.divergence == "js":
            _, g_adv, _ = L.adv_d_grad(m.D, priors, fakes)
            grads = g_adv.scaled(-1.0)
            net, opt = m.D, self.opt["D"]
        else:
            lme = L.log_mean_exp(m.T(priors)[:, 0])
            log_z = self.ema.update(lme)
            _, g_adv, _, _ = L.dv_grad(m.T, fakes, priors, log_partition=log_z)
            grads = g_adv.scaled(-1.0)
            net, opt = m.T, self.opt["T"]
        if apply_r1:
            _, g_r1 = L.r1_grad(net, priors, gamma)
            grads = grads + g_r1
        adam_step(net, grads, opt)

    def step(self):
        try:
            return self._step()
        except NonFiniteGradient as exc:
            raise NonFiniteLoss(f"non-finite gradient at iteration {self.iteration}",
                                self.iteration) from exc

    def _step(self):
        cfg, m = self.config, self.model
        n = len(self.data)
        idx = self.rng.choice(n, cfg.batch, replace=cfg.batch > n)
        z_img = self.data.z_img[idx]
        priors = prior_sample(self.pool, self.rng, cfg.batch)
        for _ in range(cfg.d_steps_per_g_step):
            fakes = svdl_sample(z_img, m.G, m.r_txt)
            self._critic_step(z_img, priors, fakes)
        triplets = L.sample_triplets(self.rng, cfg.batch)
        labeled = self.data.labeled[idx] if self.use_labels else None
        z_txt = self.data.z_txt[idx] if self.use_labels else None
        batch = L.Stage1Batch(z_img, priors, triplets, z_txt, labeled)
        res = L.stage1_total(m, batch, self.weights, cfg.gen_loss)
        if not np.isfinite(res.value):
            raise NonFiniteLoss(f"non-finite stage-1 objective at iteration {self.iteration}",
                                self.iteration)
        adam_step(m.G, res.grads_g, self.opt["G"])
        adam_step(m.F, res.grads_f, self.opt["F"])
        for k, v in res.counters.items():
            self.counters[k] += v
        self.iteration += 1
        if not m.all_finite():
            raise NonFiniteLoss(f"non-finite parameters after iteration {self.iteration - 1}",
                                self.iteration - 1)
        return res

    def evaluate(self):
        if self.heldout is None:
            return None
        priors = self.pool[: self.config.eval_loss_rows]
        rep = eval_model(self.model, self.heldout, self.iteration, priors, self.counters,
                         self.config.sim_img_from_sampled, self.config.eval_loss_rows)
        self.history.append(rep)
        return rep

    def run(self, until=None):
        """Train up to iteration ``until`` (default: config.iters)."""
        until = self.config.iters if until is None else until
        if self.iteration == 0 and not self.history:
            self.evaluate()
        while self.iteration < until:
            self.step()
            if self.iteration % self.config.eval_every == 0 or self.iteration == self.config.iters:
                rep = self.evaluate()
                if rep is not None:
                    log.info("iter %d sim_txt %.4f sim_img %.4f", rep.iteration, rep.sim_txt,
                             rep.sim_img)
        return self.model, self.history

    # persistence ---------------------------------------------------------
    def state_config(self):
        return {
            "kind": CHECKPOINT_KIND,
            "rng_algorithm": RNG_ALGORITHM,
            "train_config": asdict(self.config),
            "loss_weights": asdict(self.weights),
            "iteration": self.iteration,
            "use_labels": self.use_labels,
            "adam": {k: {"t": s.t, "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps}
                     for k, s in self.opt.items()},
            # -inf (fresh EMA) is not valid JSON
            "ema": {"decay": self.ema.decay,
                    "log_value": self.ema.log_value if np.isfinite(self.ema.log_value) else None,
                    "steps": self.ema.steps},
            "counters": dict(self.counters),
            "history": [h.to_dict() for h in self.history],
        }

    def save(self, path):
        tensors = {}
        for name, net in self.model.nets().items():
            tensors.update(vdata.net_tensors(name, net))
            st = self.opt[name]
            for k, (mm, vv) in enumerate(zip(st.m, st.v)):
                tensors[f"adam.{name}.m{k}"] = mm
                tensors[f"adam.{name}.v{k}"] = vv
        vdata.save_checkpoint(path, tensors, self.rng.get_state(), self.state_config())

    @classmethod
    def load(cls, path, data, prior_pool, heldout=None, config=None):
        tensors, rng_state, saved = vdata.load_checkpoint(path)
        if saved.get("kind") != CHECKPOINT_KIND:
            raise VersionMismatch(f"{path} is not a stage-1 checkpoint")
        tc = TrainConfig(**saved["train_config"])
        if config is not None:
            if config.d != tc.d or config.depth != tc.depth or config.width != tc.width:
                raise ShapeMismatch("checkpoint architecture does not match the requested config")
            tc = config
        weights = L.LossWeights(**saved["loss_weights"])
        tr = cls(tc, data, prior_pool, weights, heldout, saved["use_labels"])
        tr.restore(tensors, rng_state, saved)
        return tr

    def restore(self, tensors, rng_state, saved):
        m = self.model
        for name, net in m.nets().items():
            loaded = vdata.net_from_tensors(name, tensors, net.alpha, net.output)
            if loaded.sizes != net.sizes:
                raise ShapeMismatch(f"{name}: checkpoint sizes {loaded.sizes} != {net.sizes}")
            setattr(m, name, loaded)
            st = AdamState([tensors[f"adam.{name}.m{k}"].copy() for k in range(2 * loaded.depth)],
                           [tensors[f"adam.{name}.v{k}"].copy() for k in range(2 * loaded.depth)],
                           **saved["adam"][name])
            self.opt[name] = st
        self.rng = Rng.from_state(rng_state)
        e = saved["ema"]
        self.ema = L.LogPartitionEMA(e["decay"], float("-inf") if e["log_value"] is None
                                     else e["log_value"], e["steps"])
        self.iteration = saved["iteration"]
        self.counters = dict(saved["counters"])
        self.history = [MetricsReport(**h) for h in saved["history"]]


def train_stage1(config, data, prior_pool, weights=None, heldout=None):
    """Unsupervised stage-1 training; returns (model, history)."""
    return Trainer(config, data, prior_pool, weights, heldout, use_labels=False).run()


def train_semi(config, data, prior_pool, weights=None, heldout=None):
    """Stage-1 training plus the l1 loss on the labeled rows of each batch."""
    return Trainer(config, data, prior_pool, weights, heldout,
                   use_labels=config.semi_ratio > 0).run()


def config_fields():
    return [f.name for f in fields(TrainConfig)]


def load_model(path):
    """Stage-1 model and its TrainConfig from a checkpoint (optimizer state ignored)."""
    tensors, _, saved = vdata.load_checkpoint(path)
    if saved.get("kind") != CHECKPOINT_KIND:
        raise VersionMismatch(f"{path} is not a stage-1 checkpoint")
    tc = TrainConfig(**saved["train_config"])
    weights = L.LossWeights(**saved["loss_weights"])
    nets = {}
    for name in ("G", "F", "D", "T"):
        if f"{name}.W0" in tensors:
            out = "logit" if name in ("D", "T") else "identity"
            nets[name] = vdata.net_from_tensors(name, tensors, tc.alpha, out)
    model = VdlModel(nets["G"], nets["F"], nets["D"], nets.get("T"), tc.radius_txt,
                     tc.radius_img, weights)
    return model, tc, saved
