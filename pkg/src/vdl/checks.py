"""Verification suites shared by the CLI and the test-suite."""
import types

import numpy as np

from . import losses as L
from .net import grad_check, init_net, mlp_sizes
from .numerics import Rng, sample_unit
from .sampler import svdl_backward, svdl_forward

GRAD_SCOPES = ("adv_d", "adv_g", "adv_g_ns", "r1", "recon", "rkd", "semi", "dv", "stage1_js",
               "stage1_dv")


def toy_model(rng, d=6, width=8, depth=4, r=0.7):
    """Small random G/F/D/T with non-zero biases, for gradient checks."""
    nets = {}
    for name, out in (("G", d), ("F", d), ("D", 1), ("T", 1)):
        net = init_net(rng.child(name), mlp_sizes(d, out, depth, width))
        for b in net.biases:
            b[:] = 0.1 * rng.normal(b.shape)
        nets[name] = net
    return types.SimpleNamespace(r_txt=r, r_img=r, **nets)


def _toy_batch(rng, d, batch):
    z = sample_unit(rng, d, batch)
    priors = sample_unit(rng, d, batch + 1)
    z_txt = sample_unit(rng, d, batch)
    labeled = np.arange(batch) % 2 == 0
    return L.Stage1Batch(z, priors, L.sample_triplets(rng, batch), z_txt, labeled)


def _through_g(m, b, head):
    """Loss of a text-side head evaluated on G's samples, differentiated into G."""
    def loss(params):
        zt, cache = svdl_forward(b.z_img, m.G, m.r_txt)
        value, d_zt = head(zt)
        grads, _ = svdl_backward(m.G, cache, d_zt)
        return value, grads.params()
    return loss


def gradient_errors(scope="all", seed=0, d=6, width=8, depth=4, batch=4, h=1e-5):
    """Max relative finite-difference error per loss term."""
    names = GRAD_SCOPES if scope == "all" else (scope,)
    for n in names:
        if n not in GRAD_SCOPES:
            raise ValueError(f"unknown gradcheck scope {n!r}; choose from {GRAD_SCOPES}")
    rng = Rng(seed).child("gradcheck")
    m = toy_model(rng.child("model"), d, width, depth)
    b = _toy_batch(rng.child("batch"), d, batch)
    fakes = sample_unit(rng.child("fakes"), d, batch)
    out = {}
    for name in names:
        if name == "adv_d":
            def loss(params):
                v, g, _ = L.adv_d_grad(m.D, b.priors, fakes)
                return v, g.params()
            params = m.D.params()
        elif name in ("adv_g", "adv_g_ns"):
            mode = "minimax" if name == "adv_g" else "nonsaturating"
            loss = _through_g(m, b, lambda zt, mode=mode: L.adv_g_grad(m.D, zt, mode))
            params = m.G.params()
        elif name == "r1":
            def loss(params):
                v, g = L.r1_grad(m.D, b.priors, 1.3)
                return v, g.params()
            params = m.D.params()
        elif name == "recon":
            def loss(params):
                zt, cg = svdl_forward(b.z_img, m.G, m.r_txt)
                zi, cf = svdl_forward(zt, m.F, m.r_img)
                v, d_zi = L.recon_grad(b.z_img, zi, 0.8)
                gf, d_zt = svdl_backward(m.F, cf, d_zi)
                gg, _ = svdl_backward(m.G, cg, d_zt)
                return v, gg.params() + gf.params()
            params = m.G.params() + m.F.params()
        elif name == "rkd":
            loss = _through_g(m, b, lambda zt: L.rkd_grad(b.z_img, zt, b.triplets, 0.05)[:2])
            params = m.G.params()
        elif name == "semi":
            loss = _through_g(m, b, lambda zt: L.semi_grad(zt, b.z_txt))
            params = m.G.params()
        elif name == "dv":
            def loss(params):
                zt, cg = svdl_forward(b.z_img, m.G, m.r_txt)
                v, gt, d_zt, _ = L.dv_grad(m.T, zt, b.priors)
                gg, _ = svdl_backward(m.G, cg, d_zt)
                return v, gt.params() + gg.params()
            params = m.T.params() + m.G.params()
        else:
            w = L.LossWeights(divergence="js" if name == "stage1_js" else "dv", lambda_rkd=0.7,
                              lambda_semi=0.5, sigma=0.9)
            critic = m.D if w.divergence == "js" else m.T

            def loss(params, w=w):
                res = L.stage1_total(m, b, w)
                return res.value, res.grads_g.params() + res.grads_f.params() + res.grads_d.params()
            params = m.G.params() + m.F.params() + critic.params()
        out[name] = grad_check(loss, params, h)
    return out
