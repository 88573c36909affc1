"""Stage-1 loss terms and their exact gradients.

Value functions (``adv_d_value``, ``recon_loss``, ...) return floats.  The
``*_grad`` companions return the value together with gradients; parameter
gradients come back as :class:`~vdl.net.GradBundle` objects and input
gradients as arrays shaped like the input batch.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .errors import DegenerateTriplet, RangeError, ShapeMismatch
from .net import GradBundle, input_gradient, input_gradient_norm_backward, mlp_backward, mlp_forward
from .numerics import ZERO_NORM
from .sampler import svdl_backward, svdl_forward

DIVERGENCES = ("js", "dv")
GEN_LOSSES = ("minimax", "nonsaturating")


@dataclass
class LossWeights:
    sigma: float = 1.0
    lambda_rkd: float = 1.0
    lambda_semi: float = 1.0
    delta: float = 1.0
    gamma_r1: float = 0.1
    divergence: str = "js"

    def __post_init__(self):
        if not self.sigma > 0 or not self.delta > 0:
            raise RangeError("sigma and delta must be > 0")
        for name in ("lambda_rkd", "lambda_semi", "gamma_r1"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise RangeError(f"{name} must be finite and >= 0, got {v}")
        if self.divergence not in DIVERGENCES:
            raise RangeError(f"divergence must be one of {DIVERGENCES}")


def _logits(D, z):
    y, cache = mlp_forward(D, z)
    return y[:, 0], cache


# adversarial (Jensen-Shannon) ------------------------------------------------

def adv_d_value(D, priors, fakes):
    """mean log sigmoid(D(prior)) + mean log(1 - sigmoid(D(fake)))."""
    lp, _ = _logits(D, np.atleast_2d(priors))
    lf, _ = _logits(D, np.atleast_2d(fakes))
    return float(np.mean(log_expit(lp)) + np.mean(log_expit(-lf)))


def adv_d_grad(D, priors, fakes):
    """Value and its gradient w.r.t. the discriminator parameters (for ascent)."""
    priors, fakes = np.atleast_2d(priors), np.atleast_2d(fakes)
    both = np.concatenate([priors, fakes])
    logits, cache = _logits(D, both)
    n = len(priors)
    lp, lf = logits[:n], logits[n:]
    value = float(np.mean(log_expit(lp)) + np.mean(log_expit(-lf)))
    dy = np.concatenate([expit(-lp) / len(lp), -expit(lf) / len(lf)])[:, None]
    grads = mlp_backward(D, cache, dy)
    grads.inputs = None
    return value, grads, (expit(lp), expit(lf))


def adv_g_value(D, fakes, mode="minimax"):
    lf, _ = _logits(D, np.atleast_2d(fakes))
    if mode == "minimax":
        return float(np.mean(log_expit(-lf)))
    if mode == "nonsaturating":
        return float(-np.mean(log_expit(lf)))
    raise RangeError(f"unknown generator loss {mode!r}")


def adv_g_grad(D, fakes, mode="minimax"):
    """Value and gradient w.r.t. the fake inputs (D held fixed)."""
    if mode not in GEN_LOSSES:
        raise RangeError(f"unknown generator loss {mode!r}")
    fakes = np.atleast_2d(fakes)
    lf, cache = _logits(D, fakes)
    n = len(lf)
    if mode == "minimax":
        value = float(np.mean(log_expit(-lf)))
        dy = -expit(lf) / n
    else:
        value = float(-np.mean(log_expit(lf)))
        dy = -expit(-lf) / n
    grads = mlp_backward(D, cache, dy[:, None])
    return value, grads.inputs


# R1 --------------------------------------------------------------------------

def r1_penalty(D, priors, gamma):
    """(gamma / 2) * mean ||dD/dz||^2 over the prior batch."""
    if gamma < 0:
        raise RangeError("gamma_r1 must be >= 0")
    if gamma == 0:
        return 0.0
    _, g, _ = input_gradient(D, np.atleast_2d(priors))
    return float(0.5 * gamma * np.mean(np.sum(g * g, axis=1)))


def r1_grad(D, priors, gamma):
    if gamma < 0:
        raise RangeError("gamma_r1 must be >= 0")
    priors = np.atleast_2d(priors)
    _, g, trace = input_gradient(D, priors)
    value = float(0.5 * gamma * np.mean(np.sum(g * g, axis=1)))
    grads = input_gradient_norm_backward(D, trace, gamma * g / len(priors))
    return value, grads


# reconstruction --------------------------------------------------------------

def recon_loss(z_img, z_hat, sigma=1.0):
    """(1 / (2 sigma^2)) * ||z_img - z_hat||^2, averaged over rows of a batch."""
    if sigma <= 0:
        raise RangeError("sigma must be > 0")
    z_img, z_hat = np.atleast_2d(z_img), np.atleast_2d(z_hat)
    if z_img.shape != z_hat.shape:
        raise ShapeMismatch(f"{z_img.shape} vs {z_hat.shape}")
    diff = z_img - z_hat
    return float(np.mean(np.sum(diff * diff, axis=1)) / (2.0 * sigma**2))


def recon_grad(z_img, z_hat, sigma=1.0):
    z_img, z_hat = np.atleast_2d(z_img), np.atleast_2d(z_hat)
    diff = z_img - z_hat
    value = float(np.mean(np.sum(diff * diff, axis=1)) / (2.0 * sigma**2))
    return value, -diff / (sigma**2 * len(diff))


# relational distillation -----------------------------------------------------

def psi_a(zi, zj, zk):
    """Cosine of the angle at zi spanned by zj and zk."""
    a = np.asarray(zi, dtype=np.float64) - zj
    b = np.asarray(zi, dtype=np.float64) - zk
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    if np.any(na <= ZERO_NORM) or np.any(nb <= ZERO_NORM):
        raise DegenerateTriplet("triplet has coincident points")
    c = np.sum(a * b, axis=-1) / (na * nb)
    return float(c) if np.ndim(c) == 0 else c


def huber(a, delta=1.0):
    if delta <= 0:
        raise RangeError("delta must be > 0")
    a = np.asarray(a, dtype=np.float64)
    absa = np.abs(a)
    out = np.where(absa <= delta, 0.5 * a * a, delta * (absa - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_grad(a, delta=1.0):
    return np.clip(a, -delta, delta)


def sample_triplets(rng, batch, count=None):
    """All ordered distinct triplets for small batches, else ``4 * batch`` random ones."""
    if batch < 3:
        raise RangeError("need at least 3 rows to form a triplet")
    if count is None and batch <= 16:
        idx = np.arange(batch)
        i, j, k = np.meshgrid(idx, idx, idx, indexing="ij")
        keep = (i != j) & (i != k) & (j != k)
        return np.stack([i[keep], j[keep], k[keep]], axis=1)
    m = 4 * batch if count is None else count
    i = rng.integers(batch, size=m)
    j = rng.integers(batch - 1, size=m)
    j = j + (j >= i)
    k = rng.integers(batch - 2, size=m)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    k = k + (k >= lo)
    k = k + (k >= hi)
    return np.stack([i, j, k], axis=1)


def _psi_parts(z, triplets):
    i, j, k = triplets.T
    a = z[i] - z[j]
    b = z[i] - z[k]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    return a, b, na, nb


def rkd_grad(img, txt_hat, triplets, delta=1.0):
    """Value, gradient w.r.t. ``txt_hat`` and the number of skipped triplets.

    Triplets that are degenerate on either side are skipped; the mean runs
    over the remaining ones.
    """
    img, txt_hat = np.atleast_2d(img), np.atleast_2d(txt_hat)
    if img.shape[0] != txt_hat.shape[0]:
        raise ShapeMismatch("image and text batches must align row-wise")
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    ai, bi, nai, nbi = _psi_parts(img, triplets)
    at, bt, nat, nbt = _psi_parts(txt_hat, triplets)
    valid = (nai > ZERO_NORM) & (nbi > ZERO_NORM) & (nat > ZERO_NORM) & (nbt > ZERO_NORM)
    skipped = int((~valid).sum())
    grad = np.zeros_like(txt_hat)
    if not valid.any():
        return 0.0, grad, skipped
    ai, bi, nai, nbi = ai[valid], bi[valid], nai[valid], nbi[valid]
    at, bt, nat, nbt = at[valid], bt[valid], nat[valid], nbt[valid]
    psi_img = np.sum(ai * bi, axis=1) / (nai * nbi)
    psi_txt = np.sum(at * bt, axis=1) / (nat * nbt)
    x = psi_img - psi_txt
    n = len(x)
    value = float(np.mean(huber(x, delta)))
    dpsi = (-huber_grad(x, delta) / n)[:, None]
    c = psi_txt[:, None]
    da = dpsi * (bt / (nat * nbt)[:, None] - c * at / (nat**2)[:, None])
    db = dpsi * (at / (nat * nbt)[:, None] - c * bt / (nbt**2)[:, None])
    i, j, k = triplets[valid].T
    np.add.at(grad, i, da + db)
    np.add.at(grad, j, -da)
    np.add.at(grad, k, -db)
    return value, grad, skipped


def rkd_loss(img, txt_hat, triplets, delta=1.0):
    return rkd_grad(img, txt_hat, triplets, delta)[0]


# semi-supervised -------------------------------------------------------------

def semi_loss(z_hat, z_txt):
    """Mean over rows of the l1 distance between predicted and true text."""
    z_hat, z_txt = np.atleast_2d(z_hat), np.atleast_2d(z_txt)
    if z_hat.shape != z_txt.shape:
        raise ShapeMismatch(f"{z_hat.shape} vs {z_txt.shape}")
    if len(z_hat) == 0:
        return 0.0
    return float(np.mean(np.sum(np.abs(z_hat - z_txt), axis=1)))


def semi_grad(z_hat, z_txt):
    z_hat, z_txt = np.atleast_2d(z_hat), np.atleast_2d(z_txt)
    if len(z_hat) == 0:
        return 0.0, np.zeros_like(z_hat)
    diff = z_hat - z_txt
    return float(np.mean(np.sum(np.abs(diff), axis=1))), np.sign(diff) / len(diff)


# Donsker-Varadhan ------------------------------------------------------------

def log_mean_exp(x):
    return float(logsumexp(x) - np.log(len(x)))


def dv_dual_value(T, q_samples, p_samples):
    """mean_q T - log mean_p exp(T); a lower bound on KL(q || p)."""
    tq, _ = _logits(T, np.atleast_2d(q_samples))
    tp, _ = _logits(T, np.atleast_2d(p_samples))
    return float(np.mean(tq) - log_mean_exp(tp))


@dataclass
class LogPartitionEMA:
    """Bias-corrected moving average of log mean exp(T) kept in log space."""

    decay: float = 0.99
    log_value: float = float("-inf")
    steps: int = 0

    def update(self, lme):
        self.steps += 1
        self.log_value = float(np.logaddexp(np.log(self.decay) + self.log_value,
                                            np.log1p(-self.decay) + lme))
        return self.corrected()

    def corrected(self):
        if self.steps == 0:
            return float("-inf")
        return self.log_value - float(np.log1p(-self.decay**self.steps))


def dv_grad(T, q_samples, p_samples, log_partition=None):
    """Value, critic gradient (for ascent) and gradient w.r.t. the q inputs.

    With ``log_partition`` set, the partition-function denominator in the
    critic gradient is that (smoothed) estimate instead of the batch value.
    """
    q, p = np.atleast_2d(q_samples), np.atleast_2d(p_samples)
    logits, cache = _logits(T, np.concatenate([q, p]))
    tq, tp = logits[:len(q)], logits[len(q):]
    lme = log_mean_exp(tp)
    value = float(np.mean(tq) - lme)
    denom = lme if log_partition is None else log_partition
    wp = np.exp(tp - denom) / len(tp)
    dy = np.concatenate([np.full(len(tq), 1.0 / len(tq)), -wp])[:, None]
    grads = mlp_backward(T, cache, dy)
    d_inputs = grads.inputs[:len(q)]
    grads.inputs = None
    return value, grads, d_inputs, lme


def dv_g_grad(T, fakes):
    """G-side DV term: mean T(fake); the partition term does not depend on G."""
    fakes = np.atleast_2d(fakes)
    tq, cache = _logits(T, fakes)
    grads = mlp_backward(T, cache, np.full((len(tq), 1), 1.0 / len(tq)))
    return float(np.mean(tq)), grads.inputs


# assembly --------------------------------------------------------------------

@dataclass
class Stage1Batch:
    z_img: np.ndarray
    priors: np.ndarray
    triplets: np.ndarray
    z_txt: np.ndarray = None
    labeled: np.ndarray = None  # bool mask over rows of z_img


@dataclass
class Stage1Result:
    value: float
    generator_value: float
    components: dict
    grads_g: GradBundle
    grads_f: GradBundle
    grads_d: GradBundle
    z_txt_hat: np.ndarray
    z_img_hat: np.ndarray
    counters: dict = field(default_factory=dict)


def stage1_total(model, batch, weights, mode="minimax"):
    """Full stage-1 objective with gradients routed for the minimax game.

    ``value`` is L_adv + L_recon + lambda_rkd * L_rkd (+ lambda_semi * L_semi).
    ``grads_g``/``grads_f`` are gradients of the generator objective (to
    descend), which equals ``value`` up to G-independent terms in minimax
    mode.  ``grads_d`` is the gradient of L_adv w.r.t. the discriminator (or
    the DV critic), to ascend.
    """
    G, F = model.G, model.F
    z_img = np.atleast_2d(batch.z_img)
    zt_hat, cache_g = svdl_forward(z_img, G, model.r_txt)
    zi_hat, cache_f = svdl_forward(zt_hat, F, model.r_img)
    comps = {}

    if weights.divergence == "js":
        adv, grads_d, (d_real, d_fake) = adv_d_grad(model.D, batch.priors, zt_hat)
        gen_adv, d_zt = adv_g_grad(model.D, zt_hat, mode)
        comps["d_mean_real"] = float(np.mean(d_real))
        comps["d_mean_fake"] = float(np.mean(d_fake))
    else:
        adv, grads_d, _, _ = dv_grad(model.T, zt_hat, batch.priors)
        gen_adv, d_zt = dv_g_grad(model.T, zt_hat)
    comps["adv"] = adv
    comps["adv_g"] = gen_adv

    rec, d_zi = recon_grad(z_img, zi_hat, weights.sigma)
    comps["recon"] = rec
    grads_f, d_zt_from_f = svdl_backward(F, cache_f, d_zi)
    d_zt = d_zt + d_zt_from_f

    rkd, d_rkd, skipped = rkd_grad(z_img, zt_hat, batch.triplets, weights.delta)
    comps["rkd"] = rkd
    d_zt = d_zt + weights.lambda_rkd * d_rkd

    semi = 0.0
    labeled = batch.labeled
    if labeled is not None and batch.z_txt is not None and np.any(labeled):
        idx = np.flatnonzero(labeled)
        semi, d_semi = semi_grad(zt_hat[idx], np.atleast_2d(batch.z_txt)[idx])
        d_zt[idx] += weights.lambda_semi * d_semi
    comps["semi"] = semi

    grads_g, _ = svdl_backward(G, cache_g, d_zt)
    tail = rec + weights.lambda_rkd * rkd + weights.lambda_semi * semi
    counters = {
        "degenerate_txt": int(cache_g.degenerate.sum()),
        "degenerate_img": int(cache_f.degenerate.sum()),
        "skipped_triplets": skipped,
    }
    return Stage1Result(adv + tail, gen_adv + tail, comps, grads_g, grads_f, grads_d,
                        zt_hat, zi_hat, counters)
