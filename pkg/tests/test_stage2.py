import numpy as np
import pytest

from vdl import data as D
from vdl.errors import RangeError, ShapeMismatch, VersionMismatch
from vdl.numerics import Rng
from vdl.sampler import prop1_bound
from vdl.stage2 import (Stage2Config, generate, heldout_mse, infer_t2i, load_generator,
                        make_generator, save_generator, train_stage2)
from vdl.trainer import TrainConfig, Trainer, train_stage1


@pytest.fixture(scope="module")
def setup():
    world, ds, pool = D.generate(0, 16, 1024, 0.6, 0.0, pool_size=1024)
    model, _ = train_stage1(TrainConfig(d=16, iters=100, depth=3, width=32, batch=32,
                                        eval_every=1000), ds, pool)
    return world, ds, model, D.heldout(world, 512)


def gen_for(world, cfg):
    return make_generator(Rng(cfg.seed).child("gen"), world.d, world.d_x, cfg)


@pytest.fixture(scope="module")
def trained(setup):
    world, ds, model, ho = setup
    out = {}
    for zero in (False, True):
        cfg = Stage2Config(iters=600, zero_condition=zero)
        out[zero], _ = train_stage2(model, gen_for(world, cfg), world, ds, cfg)
    return out


def test_generator_shapes(setup):
    world, ds, model, _ = setup
    gen = gen_for(world, Stage2Config())
    assert gen.g.in_dim == 32 and gen.d_c == 16 and gen.d_x == 64
    assert gen.h.in_dim == 8 + 16
    x, _ = generate(gen, ds.z_txt[:5], ds.z_img[:5], np.zeros((5, 8)))
    assert x.shape == (5, 64)
    with pytest.raises(ShapeMismatch):
        generate(gen, ds.z_txt[:5, :8], ds.z_img[:5], np.zeros((5, 8)))


def test_zero_iterations_returns_untrained(setup):
    world, ds, model, _ = setup
    cfg = Stage2Config(iters=0)
    gen = gen_for(world, cfg)
    before = [p.copy() for n in gen.nets().values() for p in n.params()]
    out, losses = train_stage2(model, gen, world, ds, cfg)
    after = [p for n in out.nets().values() for p in n.params()]
    assert losses == []
    assert all(a.tobytes() == b.tobytes() for a, b in zip(before, after))


def test_deterministic(setup):
    world, ds, model, _ = setup
    cfg = Stage2Config(iters=30)
    a = train_stage2(model, gen_for(world, cfg), world, ds, cfg)[1]
    b = train_stage2(model, gen_for(world, cfg), world, ds, cfg)[1]
    assert a == b


def test_conditioning_halves_error(setup, trained):
    world, _, model, ho = setup
    cond = heldout_mse(model, trained[False], world, ho)
    zero = heldout_mse(model, trained[True], world, ho)
    assert cond < 0.5 * zero


def test_infer_respects_cone_and_retrieves_content(setup, trained):
    world, _, model, ho = setup
    x, z_img_hat = infer_t2i(model, trained[False], ho.z_txt, Rng(1), return_latent=True)
    cos = np.sum(z_img_hat * ho.z_txt, axis=1)
    assert cos.min() >= prop1_bound(model.r_img) - 1e-9
    truth = world.render(ho.content)
    own = np.mean((x - truth) ** 2, axis=1)
    other = np.mean((x - np.roll(truth, 1, axis=0)) ** 2, axis=1)
    assert np.mean(own < other) >= 0.9


def test_infer_deterministic_and_unbatched(setup, trained):
    world, _, model, ho = setup
    a = infer_t2i(model, trained[False], ho.z_txt[:4], Rng(2))
    b = infer_t2i(model, trained[False], ho.z_txt[:4].copy(), Rng(2))
    assert a.tobytes() == b.tobytes()
    single = infer_t2i(model, trained[False], ho.z_txt[0], Rng(2))
    assert single.shape == (64,)
    np.testing.assert_allclose(single, a[0], rtol=0, atol=1e-12)


def test_generator_roundtrip(setup, trained, tmp_path):
    world, _, model, ho = setup
    cfg = Stage2Config(iters=600)
    save_generator(tmp_path / "g.vdlc", trained[False], cfg)
    back, cfg2 = load_generator(tmp_path / "g.vdlc")
    assert cfg2 == cfg
    x1 = infer_t2i(model, trained[False], ho.z_txt[:8], Rng(3))
    x2 = infer_t2i(model, back, ho.z_txt[:8], Rng(3))
    assert x1.tobytes() == x2.tobytes()


def test_stage1_checkpoint_is_not_a_generator(setup, tmp_path):
    world, ds, _, _ = setup
    _, _, pool = D.generate(0, 16, 16, 0.6, 0.0, pool_size=16)
    Trainer(TrainConfig(d=16, iters=0, depth=2, width=8), ds, pool).save(tmp_path / "s1.vdlc")
    with pytest.raises(VersionMismatch):
        load_generator(tmp_path / "s1.vdlc")


def test_config_validation():
    with pytest.raises(RangeError):
        Stage2Config(lr=0)
    with pytest.raises(RangeError):
        Stage2Config(batch=0)
