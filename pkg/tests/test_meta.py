import numpy as np
import pytest

from fieldcodec import autodiff as ad
from fieldcodec import data, inr, meta
from fieldcodec.autodiff import Tape, Tensor, grad
from fieldcodec.errors import DivergenceError, NumericFault
from fieldcodec.inr import INRConfig
from fieldcodec.meta import FitUnit, MetaTrainConfig
from fieldcodec.optim import Adam

from util import finite_diff, rel_err


def _toy_config(**kw):
    base = dict(
        coord_dim=2,
        feat_dim=3,
        depth=3,
        width=12,
        latent_dim=8,
        omega0=30.0,
        predictor_width=24,
        predictor_blocks=1,
    )
    base.update(kw)
    return INRConfig(**base)


def _toy_units(count, shape=(8, 8), seed=0):
    items = data.make_synthetic_rgb(count, shape=shape, seed=seed)
    modality = data.ModalitySpec(kind="grid", shape=shape, feat_dim=3)
    coords = Tensor(data.coords_for(modality))
    return [
        FitUnit(coords, Tensor(item.reshape(-1, 3)), i) for i, item in enumerate(items)
    ]


def test_adapt_latent_scalar_surrogate():
    phi0 = Tensor(np.zeros(()), requires_grad=True)
    alpha = Tensor(np.asarray(0.25), requires_grad=True)

    def loss_fn(p):
        d = ad.sub(p, 2.0)
        return ad.mul(d, d)

    with Tape() as tape:
        phi = meta.adapt_latent(loss_fn, phi0, alpha, steps=1, tape=tape)
    assert phi.item() == pytest.approx(1.0)


def test_adapt_latent_zero_step_size():
    phi0 = Tensor(np.array([0.3, -0.7]), requires_grad=True)
    alpha = Tensor(np.zeros(2), requires_grad=True)

    def loss_fn(p):
        return ad.tsum(ad.mul(p, p))

    with Tape() as tape:
        phi = meta.adapt_latent(loss_fn, phi0, alpha, steps=3, tape=tape)
    np.testing.assert_array_equal(phi.data, phi0.data)


def test_outer_gradient_matches_fd():
    cfg = _toy_config(width=8, latent_dim=4, predictor_width=8)
    mcfg = MetaTrainConfig(inner_steps=2, seed=1, batch_size=1, steps=1)
    model = meta.init_meta(cfg, mcfg)
    unit = _toy_units(1, shape=(5, 5), seed=2)[0]

    def outer_loss_from(phi0_val, alpha_val):
        model.phi0.data = phi0_val.copy()
        model.alpha.data = alpha_val.copy()
        with Tape() as tape:
            phi = meta.inner_adapt(model, unit, mcfg.inner_steps, tape,
                                   create_graph=True)
            return inr.fit_loss(unit.coords, unit.features, model.params, phi), tape

    phi0_val = np.random.default_rng(3).normal(size=4) * 0.1
    alpha_val = np.full(4, 0.8)

    out, tape = outer_loss_from(phi0_val, alpha_val)
    g_phi0, g_alpha = grad(out, [model.phi0, model.alpha], tape)

    def scalar(p, a):
        o, _ = outer_loss_from(p, a)
        return o.item()

    want = finite_diff(scalar, [phi0_val, alpha_val])
    assert rel_err(g_phi0.data, want[0]) < 1e-4
    assert rel_err(g_alpha.data, want[1]) < 1e-4


def test_outer_step_bit_reproducible():
    def run():
        cfg = _toy_config()
        mcfg = MetaTrainConfig(inner_steps=2, outer_lr=1e-3, batch_size=4,
                               steps=3, seed=5)
        model = meta.init_meta(cfg, mcfg)
        units = _toy_units(4, seed=6)
        opt = Adam(model.trainables(), lr=mcfg.outer_lr)
        for _ in range(3):
            meta.outer_step(model, units, opt, mcfg)
        return model

    a, b = run(), run()
    for ta, tb in zip(a.trainables(), b.trainables()):
        assert ta.data.tobytes() == tb.data.tobytes()


def test_outer_step_thread_pool_matches_serial():
    from concurrent.futures import ThreadPoolExecutor

    def run(pool):
        cfg = _toy_config()
        mcfg = MetaTrainConfig(inner_steps=2, outer_lr=1e-3, batch_size=4,
                               steps=1, seed=7)
        model = meta.init_meta(cfg, mcfg)
        units = _toy_units(4, seed=8)
        opt = Adam(model.trainables(), lr=mcfg.outer_lr)
        meta.outer_step(model, units, opt, mcfg, pool=pool)
        return model

    serial = run(None)
    with ThreadPoolExecutor(3) as pool:
        threaded = run(pool)
    for ta, tb in zip(serial.trainables(), threaded.trainables()):
        assert ta.data.tobytes() == tb.data.tobytes()


def test_alpha_clamped_after_update():
    cfg = _toy_config()
    mcfg = MetaTrainConfig(inner_steps=1, outer_lr=50.0, batch_size=2, steps=1,
                           seed=9)
    model = meta.init_meta(cfg, mcfg)
    units = _toy_units(2, seed=10)
    opt = Adam(model.trainables(), lr=50.0)
    meta.outer_step(model, units, opt, mcfg)
    assert np.max(np.abs(model.alpha.data)) <= meta.ALPHA_CLAMP
    # a move of ~lr per entry tries to leave the box and must stick to it
    assert np.any(np.abs(model.alpha.data) == meta.ALPHA_CLAMP)


def test_encode_latent_zero_steps_and_determinism():
    cfg = _toy_config()
    mcfg = MetaTrainConfig(seed=11)
    model = meta.init_meta(cfg, mcfg)
    unit = _toy_units(1, seed=12)[0]
    phi0 = meta.encode_latent(model, unit, steps=0)
    np.testing.assert_array_equal(phi0.data, model.phi0.data)
    a = meta.encode_latent(model, unit, steps=3)
    b = meta.encode_latent(model, unit, steps=3)
    assert a.data.tobytes() == b.data.tobytes()


def test_divergence_detector():
    det = meta.DivergenceDetector()
    for step in range(60):
        det.update(step, 1.0)
    with pytest.raises(DivergenceError):
        for step in range(60, 200):
            det.update(step, 100.0)
    with pytest.raises(NumericFault):
        meta.DivergenceDetector().update(0, float("nan"))


def test_meta_train_toy_progress():
    cfg = _toy_config()
    mcfg = MetaTrainConfig(inner_steps=2, outer_lr=2e-3, batch_size=4, steps=150,
                           seed=13, log_every=1000)
    units = _toy_units(24, seed=14)
    train, held = units[:20], units[20:]

    before = meta.init_meta(cfg, mcfg)
    psnr_before = np.mean([meta.evaluate_unit(before, u, mcfg.inner_steps)[1]
                           for u in train])

    model, phis, stats = meta.meta_train(train, cfg, mcfg)
    assert phis.shape == (len(train), cfg.latent_dim)
    assert np.all(stats["std"] > 0)

    psnr_after = np.mean([meta.evaluate_unit(model, u, mcfg.inner_steps)[1]
                          for u in train])
    assert psnr_after > psnr_before

    # adaptation must beat the shared initialization on held-out items
    for u in held:
        _, p0 = meta.evaluate_unit(model, u, 0)
        _, pk = meta.evaluate_unit(model, u, mcfg.inner_steps)
        assert pk >= p0


def test_meta_checkpoint_roundtrip(tmp_path):
    cfg = _toy_config()
    mcfg = MetaTrainConfig(inner_steps=2, outer_lr=1e-3, batch_size=2, steps=2,
                           seed=15)
    units = _toy_units(2, seed=16)
    model, phis, stats = meta.meta_train(units, cfg, mcfg)
    p = tmp_path / "meta.vcnm"
    h = meta.save_meta(p, model, mcfg, phis, stats)
    loaded, mcfg2, phis2, stats2, h2 = meta.load_meta(p)
    assert h == h2 and mcfg2 == mcfg
    np.testing.assert_array_equal(phis2, phis)
    np.testing.assert_array_equal(stats2["mean"], stats["mean"])
    for ta, tb in zip(model.trainables(), loaded.trainables()):
        np.testing.assert_array_equal(ta.data, tb.data)
