import numpy as np
import pytest

from vdl import losses as L
from vdl.checks import GRAD_SCOPES, gradient_errors, toy_model
from vdl.errors import DegenerateTriplet, RangeError
from vdl.net import AdamState, DenseNet, adam_step, init_net, mlp_sizes
from vdl.numerics import Rng, random_rotation, sample_unit

LN2 = np.log(2.0)


def const_net(d, c=0.0):
    return DenseNet([np.zeros((1, d))], [np.array([c])], output="logit")


def linear_net(w):
    w = np.asarray(w, float)
    return DenseNet([w[None, :]], [np.zeros(1)], output="logit")


def test_adv_d_zero_logit():
    z = sample_unit(Rng(0), 4, 5)
    assert L.adv_d_value(const_net(4), z, z) == pytest.approx(-2 * LN2, abs=1e-15)


def test_adv_d_perfect_discrimination_approaches_zero():
    priors = np.tile([1.0, 0.0], (3, 1))
    fakes = np.tile([-1.0, 0.0], (3, 1))
    assert L.adv_d_value(linear_net([200.0, 0.0]), priors, fakes) > -1e-12


def test_adv_values_finite_for_huge_logits():
    z = sample_unit(Rng(1), 3, 4)
    for w in (1e6, -1e6):
        D = linear_net([w, w, w])
        assert np.isfinite(L.adv_d_value(D, z, z))
        assert np.isfinite(L.adv_g_value(D, z, "minimax"))
        assert np.isfinite(L.adv_g_value(D, z, "nonsaturating"))


def test_matched_batches_optimal_d_is_minus_two_ln2():
    rng = Rng(2)
    pool = sample_unit(rng, 4, 512)
    D = init_net(rng.child("D"), mlp_sizes(4, 1, 3, 16), output="logit")
    opt = AdamState.for_net(D, 1e-3)
    for _ in range(400):
        a = pool[rng.integers(512, size=64)]
        b = pool[rng.integers(512, size=64)]
        _, g, _ = L.adv_d_grad(D, a, b)
        adam_step(D, g.scaled(-1.0), opt)
    assert L.adv_d_value(D, pool, pool) == pytest.approx(-2 * LN2, abs=0.01)


def test_adv_g_modes_at_zero_logit():
    z = sample_unit(Rng(3), 4, 6)
    assert L.adv_g_value(const_net(4), z, "minimax") == pytest.approx(-LN2, abs=1e-15)
    assert L.adv_g_value(const_net(4), z, "nonsaturating") == pytest.approx(LN2, abs=1e-15)
    with pytest.raises(RangeError):
        L.adv_g_value(const_net(4), z, "wasserstein")


def test_adv_g_modes_share_gradient_sign():
    for w in (-3.0, -0.5, 0.5, 2.0):
        D = linear_net([w])
        x = np.linspace(-2, 2, 9)[:, None]
        _, g_mm = L.adv_g_grad(D, x, "minimax")
        _, g_ns = L.adv_g_grad(D, x, "nonsaturating")
        assert np.all(np.sign(g_mm) == np.sign(g_ns))


def test_r1_linear_d():
    w = np.array([0.5, -1.0, 2.0])
    z = sample_unit(Rng(4), 3, 7)
    assert L.r1_penalty(linear_net(w), z, 0.8) == pytest.approx(0.4 * w @ w, abs=1e-14)
    assert L.r1_penalty(linear_net(w), z[:1], 0.8) == pytest.approx(0.4 * w @ w, abs=1e-14)
    assert L.r1_penalty(linear_net(w), z, 0.0) == 0.0


def test_r1_gradient_bias_free():
    rng = Rng(5)
    D = init_net(rng, mlp_sizes(4, 1, 3, 8), output="logit")
    _, g = L.r1_grad(D, sample_unit(rng, 4, 5), 1.0)
    assert all((b == 0).all() for b in g.biases)


@pytest.mark.parametrize("sigma, expected", [(1.0, 1.0), (2.0, 0.25)])
def test_recon_examples(sigma, expected):
    assert L.recon_loss([1.0, 0.0], [0.0, 1.0], sigma) == pytest.approx(expected)
    assert L.recon_loss([1.0, 0.0], [1.0, 0.0], sigma) == 0.0


def test_psi_a_examples():
    assert L.psi_a([0, 0], [1, 0], [0, 1]) == pytest.approx(0.0, abs=1e-15)
    assert L.psi_a([0, 0], [1, 0], [2, 0]) == pytest.approx(1.0, abs=1e-15)
    zi, zj, zk = sample_unit(Rng(6), 5, 3)
    assert L.psi_a(zi, zj, zk) == L.psi_a(zi, zk, zj)
    with pytest.raises(DegenerateTriplet):
        L.psi_a([0, 0], [0, 0], [1, 0])


def test_psi_a_translation_and_rotation_invariance():
    rng = Rng(7)
    zi, zj, zk = rng.normal((3, 6))
    t = rng.normal(6)
    R = random_rotation(rng, 6)
    base = L.psi_a(zi, zj, zk)
    assert L.psi_a(zi + t, zj + t, zk + t) == pytest.approx(base, abs=1e-9)
    assert L.psi_a(R @ zi, R @ zj, R @ zk) == pytest.approx(base, abs=1e-9)


@pytest.mark.parametrize("a, expected", [(0.5, 0.125), (2.0, 1.5), (1.0, 0.5), (-1.0, 0.5)])
def test_huber_examples(a, expected):
    assert L.huber(a, 1.0) == pytest.approx(expected)


def test_huber_knee_continuity():
    eps = 1e-9
    assert L.huber(1 - eps) == pytest.approx(L.huber(1 + eps), abs=1e-8)


def test_rkd_identity_and_single_triplet():
    z = sample_unit(Rng(8), 5, 6)
    trip = L.sample_triplets(Rng(8), 6)
    assert L.rkd_loss(z, z, trip) == 0.0
    img = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    txt = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    assert L.rkd_loss(img, txt, [[0, 1, 2]], 1.0) == pytest.approx(0.5)


def test_rkd_rotation_of_text_side_only():
    rng = Rng(9)
    img, txt = sample_unit(rng, 8, 10), sample_unit(rng, 8, 10)
    trip = L.sample_triplets(rng, 10)
    R = random_rotation(rng, 8)
    assert L.rkd_loss(img, txt @ R.T, trip) == pytest.approx(L.rkd_loss(img, txt, trip), abs=1e-12)


def test_rkd_skips_degenerate_triplets():
    img = sample_unit(Rng(10), 3, 4)
    txt = img.copy()
    txt[1] = txt[0]
    value, grad, skipped = L.rkd_grad(img, txt, [[0, 1, 2], [2, 3, 0]])
    assert skipped == 1
    assert np.isfinite(value) and np.all(np.isfinite(grad))


def test_sample_triplets_distinct():
    small = L.sample_triplets(Rng(0), 5)
    assert len(small) == 5 * 4 * 3
    big = L.sample_triplets(Rng(0), 64)
    assert len(big) == 256
    for t in (small, big):
        i, j, k = t.T
        assert np.all((i != j) & (i != k) & (j != k))
    with pytest.raises(RangeError):
        L.sample_triplets(Rng(0), 2)


def test_semi_examples():
    assert L.semi_loss([1.0, 0, 0], [0, 1.0, 0]) == 2.0
    a, b = sample_unit(Rng(11), 4, 3), sample_unit(Rng(12), 4, 3)
    assert L.semi_loss(a, a) == 0.0
    assert L.semi_loss(b + 2 * (a - b), b) == pytest.approx(2 * L.semi_loss(a, b))


def test_dv_constant_critics():
    q, p = sample_unit(Rng(13), 4, 8), sample_unit(Rng(14), 4, 9)
    assert L.dv_dual_value(const_net(4), q, p) == 0.0
    assert L.dv_dual_value(const_net(4, 3.7), q, p) == pytest.approx(0.0, abs=1e-14)


def test_dv_separated_clusters_positive():
    rng = Rng(15)

    def cluster(center, n):
        angles = center + 0.2 * rng.normal(n)
        return np.stack([np.cos(angles), np.sin(angles)], axis=1)

    T = init_net(rng.child("T"), mlp_sizes(2, 1, 3, 16), output="logit")
    opt = AdamState.for_net(T, 1e-3)
    ema = L.LogPartitionEMA(0.99)
    for _ in range(500):
        q, p = cluster(0.0, 64), cluster(np.pi, 64)
        _, g, _, lme = L.dv_grad(T, q, p, ema.update(L.log_mean_exp(T(p)[:, 0])))
        adam_step(T, g.scaled(-1.0), opt)
    assert L.dv_dual_value(T, cluster(0.0, 2000), cluster(np.pi, 2000)) > 0.1


def test_log_partition_ema_first_step_is_unbiased():
    ema = L.LogPartitionEMA(0.99)
    assert ema.update(1.25) == pytest.approx(1.25, abs=1e-12)
    assert ema.update(1.25) == pytest.approx(1.25, abs=1e-12)


def test_loss_weights_validation():
    with pytest.raises(RangeError):
        L.LossWeights(sigma=0)
    with pytest.raises(RangeError):
        L.LossWeights(lambda_rkd=-1)
    with pytest.raises(RangeError):
        L.LossWeights(divergence="kl")


def _toy_batch(rng, d=6, n=4):
    return L.Stage1Batch(sample_unit(rng, d, n), sample_unit(rng, d, n),
                         L.sample_triplets(rng, n))


def test_stage1_frozen_d_composition():
    rng = Rng(16)
    m = toy_model(rng, d=6)
    m.D = const_net(6)
    b = _toy_batch(rng)
    res = L.stage1_total(m, b, L.LossWeights(lambda_rkd=0, lambda_semi=0))
    assert res.value == pytest.approx(-2 * LN2 + res.components["recon"], abs=1e-12)


def test_stage1_rkd_linearity():
    rng = Rng(17)
    m = toy_model(rng, d=6)
    b = _toy_batch(rng)

    def g_params(lam):
        return L.stage1_total(m, b, L.LossWeights(lambda_rkd=lam)).grads_g.params()

    g0, g1, g2 = g_params(0.0), g_params(1.0), g_params(2.0)
    for a, b1, b2 in zip(g0, g1, g2):
        np.testing.assert_allclose(b2 - a, 2 * (b1 - a), atol=1e-13)


@pytest.mark.parametrize("scope", GRAD_SCOPES)
def test_gradient_oracle(scope):
    assert gradient_errors(scope)[scope] < 1e-4
