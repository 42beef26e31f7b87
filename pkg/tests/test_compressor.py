import math

import numpy as np
import pytest

from fieldcodec import autodiff as ad
from fieldcodec import compressor as comp
from fieldcodec import data, inr, meta
from fieldcodec.autodiff import Tape, Tensor, grad
from fieldcodec.compressor import CompressorModel, RDConfig
from fieldcodec.inr import INRConfig
from fieldcodec.meta import FitUnit, MetaTrainConfig
from fieldcodec.optim import Adam

from util import finite_diff, rel_err

SOFTPLUS_INV_1 = math.log(math.e - 1.0)


def _stats(dim, seed=0):
    rng = np.random.default_rng(seed)
    return {"mean": rng.normal(size=dim), "std": np.abs(rng.normal(size=dim)) + 0.5}


def _model(latent_dim=6, z_dim=4, width=16, blocks=1, seed=0, lam=1.0, **kw):
    rng = np.random.default_rng(seed)
    rd = RDConfig(lam=lam, z_dim=z_dim, width=width, blocks=blocks, **kw)
    stats = _stats(latent_dim, seed)
    return CompressorModel(
        latent_dim=latent_dim,
        rd=rd,
        transforms=comp.init_transforms(latent_dim, rd, rng),
        psi=comp.init_cdf_params(z_dim, rng),
        mean=stats["mean"],
        std=stats["std"],
        inr_hash=0,
    )


def _logistic_psi(z_dim):
    """Cumulative model wired to realize the standard logistic CDF exactly."""
    psi = comp.init_cdf_params(z_dim, np.random.default_rng(0))
    eye_off = -40.0  # softplus(-40) ~ 4e-18, an effective zero
    psi["h0"].data[...] = SOFTPLUS_INV_1
    psi["b0"].data[...] = 0.0
    psi["a0"].data[...] = 0.0
    for k in (1, 2):
        psi[f"h{k}"].data[...] = eye_off
        for i in range(3):
            psi[f"h{k}"].data[:, i, i] = SOFTPLUS_INV_1
        psi[f"b{k}"].data[...] = 0.0
        psi[f"a{k}"].data[...] = 0.0
    psi["h3"].data[...] = math.log(math.expm1(1.0 / 3.0))
    psi["b3"].data[...] = 0.0
    return psi


def test_normalize_roundtrip():
    stats = _stats(9, seed=1)
    rng = np.random.default_rng(2)
    phi = rng.normal(size=9) * 3
    back = comp.denormalize_phi(comp.normalize_phi(phi, stats), stats)
    np.testing.assert_allclose(back, phi, atol=1e-12)
    np.testing.assert_allclose(
        comp.normalize_phi(stats["mean"], stats), np.zeros(9), atol=1e-15
    )


def test_normalize_training_set_standardizes():
    rng = np.random.default_rng(3)
    phis = rng.normal(size=(200, 5)) * [1, 2, 3, 4, 5] + [0, 1, 2, 3, 4]
    stats = meta.latent_stats(phis)
    normed = comp.normalize_phi(phis, stats)
    assert np.max(np.abs(normed.mean(axis=0))) < 1e-6
    assert np.max(np.abs(normed.std(axis=0) - 1.0)) < 1e-6


def test_analysis_zero_final_layer_gives_zero_code():
    model = _model(seed=4)
    model.transforms["a.out.w"].data[...] = 0.0
    model.transforms["a.out.b"].data[...] = 0.0
    z = comp.analysis(Tensor(np.random.default_rng(5).normal(size=(3, 6))), model)
    np.testing.assert_array_equal(z.data, np.zeros((3, 4)))


def test_transforms_deterministic():
    model = _model(seed=6)
    x = Tensor(np.random.default_rng(7).normal(size=(2, 6)))
    a = comp.analysis(x, model).data
    b = comp.analysis(x, model).data
    assert a.tobytes() == b.tobytes()


def test_autoencoder_overfit_small_set():
    # synthesis(analysis(x)) trained alone must memorize 50 vectors
    model = _model(latent_dim=8, z_dim=8, width=32, seed=8)
    rng = np.random.default_rng(9)
    phis = rng.normal(size=(50, 8))
    x = Tensor(phis)
    opt = Adam(model.trainables(), lr=3e-3)
    for _ in range(400):
        with Tape() as tape:
            recon = comp.synthesis(comp.analysis(x, model), model)
            loss = ad.mse(recon, x)
            grads = grad(loss, model.trainables(), tape)
        opt.step([g.data for g in grads])
    assert float(loss.data) < 1e-3


def test_likelihood_logistic_closed_form():
    psi = _logistic_psi(z_dim=2)
    p = comp.likelihood(psi, np.zeros((1, 2)))
    # closed form: sigmoid(1/2) - sigmoid(-1/2)
    want = 1 / (1 + math.exp(-0.5)) - 1 / (1 + math.exp(0.5))
    np.testing.assert_allclose(p.data, want, atol=1e-9)
    assert want == pytest.approx(0.2449186624, abs=1e-9)


def test_rate_bits_matches_log2_of_likelihood():
    psi = _logistic_psi(z_dim=4)
    bits = comp.rate_bits(psi, np.zeros((1, 4))).item()
    want = 4 * -math.log2(0.24491866240370913)
    assert bits == pytest.approx(want, abs=1e-9)


def test_likelihood_mass_and_positivity():
    model = _model(seed=10)
    grid = np.arange(-1000, 1001, dtype=np.float64)
    v = np.stack([grid] * model.rd.z_dim, axis=1)
    # loss-facing probabilities are strictly positive
    p = comp.likelihood(model.psi, v).data
    assert np.all(p > 0)
    # raw interval masses telescope to at most 1 and miss only tail mass
    raw = comp.likelihood(model.psi, v, floor=0.0).data
    mass = raw.sum(axis=0)
    assert np.all(mass <= 1.0 + 1e-12)
    assert np.all(mass >= 1.0 - 2e-3)


def test_cdf_monotone_on_grid():
    model = _model(seed=11)
    grid = np.linspace(-50, 50, 10_000)
    v = np.stack([grid] * model.rd.z_dim, axis=1)
    c = comp.cdf(model.psi, Tensor(v)).data
    assert np.all(np.diff(c, axis=0) >= 0)


def _toy_setup(seed=12, n_units=6, latent_dim=4):
    cfg = INRConfig(
        coord_dim=2, feat_dim=3, depth=3, width=8, latent_dim=latent_dim,
        predictor_width=8, predictor_blocks=1,
    )
    mcfg = MetaTrainConfig(inner_steps=1, seed=seed)
    mm = meta.init_meta(cfg, mcfg)
    items = data.make_synthetic_rgb(n_units, shape=(3, 3), seed=seed)
    mod = data.ModalitySpec(kind="grid", shape=(3, 3), feat_dim=3)
    coords = Tensor(data.coords_for(mod))
    units = [FitUnit(coords, Tensor(i.reshape(-1, 3)), k) for k, i in enumerate(items)]
    rng = np.random.default_rng(seed)
    phis = rng.normal(size=(n_units, latent_dim))
    return mm, units, phis


def test_rate_and_distortion_dependency_structure():
    mm, units, phis = _toy_setup()
    model = _model(latent_dim=4, z_dim=3, width=8, seed=13)
    model.mean = phis.mean(axis=0)
    model.std = phis.std(axis=0) + 0.1
    noise = np.random.default_rng(14).uniform(-0.5, 0.5, size=(2, 3))
    mm.params.set_requires_grad(False)
    syn = [t for n, t in sorted(model.transforms.items()) if n.startswith("s.")]
    psi = [model.psi[n] for n in sorted(model.psi)]
    with Tape() as tape:
        rate, distortion = comp.rd_terms(units[:2], phis[:2], model, mm.params, noise)
        rate_grads = grad(rate, syn + psi, tape)
        dist_grads = grad(distortion, syn + psi, tape)
    mm.params.set_requires_grad(True)
    # synthesis only affects distortion; the cumulative model only the rate
    for g in rate_grads[: len(syn)]:
        assert not np.any(g.data)
    assert any(np.any(g.data) for g in rate_grads[len(syn) :])
    assert any(np.any(g.data) for g in dist_grads[: len(syn)])
    for g in dist_grads[len(syn) :]:
        assert not np.any(g.data)


def test_rd_loss_gradient_matches_fd():
    mm, units, phis = _toy_setup(seed=15)
    model = _model(latent_dim=4, z_dim=3, width=8, seed=16, lam=2.0)
    model.mean = phis.mean(axis=0)
    model.std = phis.std(axis=0) + 0.1
    noise = np.random.default_rng(17).uniform(-0.5, 0.5, size=(2, 3))
    batch, phi_batch = units[:2], phis[:2]
    mm.params.set_requires_grad(False)
    tensors = model.trainables()
    arrays = [t.data.copy() for t in tensors]

    def run(*vals):
        for t, v in zip(tensors, vals):
            t.data = v.copy()
        with Tape():
            return comp.rd_loss(batch, phi_batch, model, mm.params, noise).item()

    for t, v in zip(tensors, arrays):
        t.data = v.copy()
    with Tape() as tape:
        loss = comp.rd_loss(batch, phi_batch, model, mm.params, noise)
        gs = grad(loss, tensors, tape)
    mm.params.set_requires_grad(True)
    want = finite_diff(run, arrays)
    got_all = np.concatenate([g.data.reshape(-1) for g in gs])
    want_all = np.concatenate([w.reshape(-1) for w in want])
    assert rel_err(got_all, want_all) < 1e-4


def test_train_compressor_freezes_base_network():
    mm, units, phis = _toy_setup(seed=18)
    stats = meta.latent_stats(phis)
    before = [t.data.tobytes() for t in mm.params.tensors()]
    rd = RDConfig(lam=1.0, z_dim=3, width=8, batch_size=3, steps=12, seed=19)
    model = comp.train_compressor(units, phis, mm, stats, rd, inr_hash=77)
    after = [t.data.tobytes() for t in mm.params.tensors()]
    assert before == after
    assert model.inr_hash == 77
    assert model.support_lo is not None and np.all(model.support_hi >= model.support_lo)


def test_train_compressor_reproducible():
    def run():
        mm, units, phis = _toy_setup(seed=20)
        stats = meta.latent_stats(phis)
        rd = RDConfig(lam=1.0, z_dim=3, width=8, batch_size=3, steps=10, seed=21)
        return comp.train_compressor(units, phis, mm, stats, rd)

    a, b = run(), run()
    for ta, tb in zip(a.trainables(), b.trainables()):
        assert ta.data.tobytes() == tb.data.tobytes()


def test_encode_decode_codes_roundtrip_shapes():
    model = _model(seed=22)
    rng = np.random.default_rng(23)
    phis = rng.normal(size=(5, 6)) * model.std + model.mean
    z = comp.encode_codes(model, phis)
    assert z.shape == (5, 4) and z.dtype == np.int64
    back = comp.decode_codes(model, z)
    assert back.shape == (5, 6)


def test_quantize_ties_away_from_zero():
    z = np.array([0.49, -1.6, 0.5, -0.5, 2.5, -2.5, 0.0])
    np.testing.assert_array_equal(comp.quantize(z), [0, -2, 1, -1, 3, -3, 0])
    q = comp.quantize(z)
    np.testing.assert_array_equal(comp.quantize(q.astype(float)), q)


def test_uniform_baseline_matches_span():
    rng = np.random.default_rng(24)
    train = rng.normal(size=(50, 6))
    test = rng.normal(size=(10, 6))
    recon, bits = comp.uniform_baseline(train, test, bits=8)
    assert bits == 48
    inside = np.clip(test, train.min(axis=0), train.max(axis=0))
    assert np.max(np.abs(recon - inside)) <= (train.max(0) - train.min(0)).max() / 255 * 0.5 + 1e-12


def test_compressor_checkpoint_roundtrip(tmp_path):
    mm, units, phis = _toy_setup(seed=25)
    stats = meta.latent_stats(phis)
    rd = RDConfig(lam=0.5, z_dim=3, width=8, batch_size=3, steps=6, seed=26)
    model = comp.train_compressor(units, phis, mm, stats, rd, inr_hash=123)
    p = tmp_path / "quant.vcnq"
    h = comp.save_compressor(p, model)
    loaded, h2 = comp.load_compressor(p)
    assert h == h2 and loaded.rd == rd and loaded.inr_hash == 123
    np.testing.assert_array_equal(loaded.support_lo, model.support_lo)
    for ta, tb in zip(model.trainables(), loaded.trainables()):
        np.testing.assert_array_equal(ta.data, tb.data)
    z = comp.encode_codes(model, phis)
    np.testing.assert_array_equal(z, comp.encode_codes(loaded, phis))
