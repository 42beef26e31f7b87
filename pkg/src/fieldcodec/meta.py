"""Meta-training of the shared network with per-parameter inner step sizes.

The inner loop adapts the latent from its learned initialization by plain
gradient steps scaled elementwise by a learned step-size vector; the outer
loop differentiates the post-adaptation loss through those steps (exact
second-order gradients by default) and applies an adaptive-moment update to
the shared parameters, the latent initialization, and the step sizes.
"""

from __future__ import annotations

import statistics
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import inr
from .autodiff import Tape, Tensor, grad
from .errors import DivergenceError, NumericFault
from .metrics import psnr
from .optim import Adam

ALPHA_CLAMP = 5.0

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 50
DIVERGENCE_WINDOW = 101


@dataclass
class MetaTrainConfig:
    inner_steps: int = 3
    outer_lr: float = 3e-6
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    threads: int = 1
    first_order: bool = False
    alpha_init: float = 1.0
    log_every: int = 100

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class MetaModel:
    params: inr.SharedINRParams
    phi0: Tensor
    alpha: Tensor

    def trainables(self):
        return self.params.tensors() + [self.phi0, self.alpha]


@dataclass
class FitUnit:
    """One adaptation target: a whole signal or a single patch of one."""

    coords: Tensor
    features: Tensor
    item_index: int = 0
    patch_index: int = 0


def make_units(dataset, modality, dtype=np.float64):
    """Flatten SignalItems into fitting units with one shared coordinate tensor."""
    coords = Tensor(np.asarray(datamod.coords_for(modality), dtype=dtype))
    units = []
    for i, item in enumerate(dataset):
        for j, feats in enumerate(item.patches):
            units.append(
                FitUnit(coords, Tensor(np.asarray(feats, dtype=dtype)), i, j)
            )
    return units


def init_meta(config: inr.INRConfig, meta_config: MetaTrainConfig) -> MetaModel:
    params = inr.init_siren(config, seed=meta_config.seed)
    dt = config.np_dtype
    phi0 = Tensor(np.zeros(config.latent_dim, dtype=dt), requires_grad=True)
    alpha = Tensor(
        np.full(config.latent_dim, meta_config.alpha_init, dtype=dt),
        requires_grad=True,
    )
    return MetaModel(params, phi0, alpha)


def adapt_latent(loss_fn, phi0, alpha, steps, tape, create_graph=False):
    """Iterated gradient steps phi <- phi - alpha .* dL/dphi from phi0."""
    phi = phi0
    for k in range(steps):
        mark = tape.position()
        loss = loss_fn(phi)
        if not np.isfinite(loss.data):
            raise NumericFault(f"non-finite adaptation loss at step {k}", step=k)
        (g,) = grad(
            loss, [phi], tape, create_graph=create_graph, start=mark, through=[phi]
        )
        phi = ad.sub(phi, ad.mul(alpha, g))
    return phi


def inner_adapt(model: MetaModel, unit: FitUnit, steps, tape, create_graph=False):
    loss_fn = lambda p: inr.fit_loss(unit.coords, unit.features, model.params, p)
    return adapt_latent(loss_fn, model.phi0, model.alpha, steps, tape, create_graph)


def encode_latent(model: MetaModel, coords, features=None, steps=3):
    """Test-time adaptation; identical procedure, no outer differentiation."""
    if isinstance(coords, FitUnit):
        unit = coords
    else:
        dt = model.params.config.np_dtype
        unit = FitUnit(
            Tensor(np.asarray(coords, dtype=dt)),
            Tensor(np.asarray(features, dtype=dt)),
        )
    if steps == 0:
        return model.phi0.detach()
    with Tape() as tape:
        phi = inner_adapt(model, unit, steps, tape, create_graph=False)
    return phi.detach()


def _unit_gradients(model, unit, config):
    """Outer-loss gradients for one batch item, as numpy arrays."""
    wrt = model.trainables()
    with Tape() as tape:
        phi = inner_adapt(
            model, unit, config.inner_steps, tape, create_graph=not config.first_order
        )
        outer = inr.fit_loss(unit.coords, unit.features, model.params, phi)
        if not np.isfinite(outer.data):
            raise NumericFault("non-finite outer loss", step=config.inner_steps)
        grads = grad(outer, wrt, tape)
    return float(outer.data), [g.data.copy() for g in grads]


def outer_step(model: MetaModel, batch, optimizer: Adam, config: MetaTrainConfig,
               pool=None):
    """One meta-update over a batch; returns the mean outer loss.

    Per-item gradients are independent (read-only shared parameters) and may
    be computed concurrently; the reduction always runs in batch index order.
    """
    if pool is not None:
        results = list(pool.map(lambda u: _unit_gradients(model, u, config), batch))
    else:
        results = [_unit_gradients(model, u, config) for u in batch]
    scale = 1.0 / len(batch)
    total = [g.copy() for g in results[0][1]]
    for _, grads in results[1:]:
        for t, g in zip(total, grads):
            t += g
    for t in total:
        t *= scale
    optimizer.step(total)
    np.clip(model.alpha.data, -ALPHA_CLAMP, ALPHA_CLAMP, out=model.alpha.data)
    return sum(loss for loss, _ in results) * scale


class DivergenceDetector:
    """Aborts when the loss exceeds 10x its running median for 50 straight steps."""

    def __init__(self, factor=DIVERGENCE_FACTOR, patience=DIVERGENCE_PATIENCE,
                 window=DIVERGENCE_WINDOW):
        self.factor = factor
        self.patience = patience
        self.history = deque(maxlen=window)
        self.streak = 0

    def update(self, step, loss):
        if not np.isfinite(loss):
            raise NumericFault(f"non-finite training loss at step {step}", step=step)
        if self.history:
            med = statistics.median(self.history)
            if loss > self.factor * med:
                self.streak += 1
                if self.streak >= self.patience:
                    raise DivergenceError(
                        f"loss {loss:.4g} exceeded {self.factor}x running median "
                        f"{med:.4g} for {self.patience} consecutive steps "
                        f"(step {step})",
                        step=step, loss=loss, median=med,
                    )
            else:
                self.streak = 0
        self.history.append(loss)


def meta_train(units, inr_config: inr.INRConfig, config: MetaTrainConfig,
               log=None):
    """Full meta-training; returns (model, per-unit latents, latent stats).

    Runs outer steps over shuffled batches, then a final adaptation pass over
    every unit to emit its latent.  Stats are the per-dimension mean/std of
    the emitted latents (std floored away from zero), consumed downstream by
    the latent compressor.
    """
    model = init_meta(inr_config, config)
    optimizer = Adam(model.trainables(), lr=config.outer_lr)
    rng = np.random.default_rng(config.seed)
    detector = DivergenceDetector()
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        step = 0
        while step < config.steps:
            order = rng.permutation(len(units))
            for lo in range(0, len(order), config.batch_size):
                if step >= config.steps:
                    break
                idx = order[lo : lo + config.batch_size]
                if len(idx) < min(config.batch_size, len(units)):
                    continue  # drop ragged tail batch; keeps batch stats comparable
                batch = [units[i] for i in idx]
                loss = outer_step(model, batch, optimizer, config, pool)
                detector.update(step, loss)
                step += 1
                if log and step % config.log_every == 0:
                    print(f"meta step {step}/{config.steps} loss {loss:.6f}",
                          file=log)
    finally:
        if pool is not None:
            pool.shutdown()
    phis = emit_latents(model, units, config.inner_steps, config.threads)
    stats = latent_stats(phis)
    return model, phis, stats


def emit_latents(model, units, steps, threads=1):
    """Adapted latent of every unit, row-aligned with ``units``."""
    def one(unit):
        return encode_latent(model, unit, steps=steps).data

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(one, units))
    else:
        rows = [one(u) for u in units]
    return np.stack(rows)


def latent_stats(phis):
    mean = phis.mean(axis=0)
    std = phis.std(axis=0)
    std = np.maximum(std, 1e-6)  # keeps the normalization invertible
    return {"mean": mean, "std": std}


def evaluate_unit(model: MetaModel, unit: FitUnit, steps):
    """(mse, psnr_db) of the reconstruction after ``steps`` adaptation steps."""
    phi = encode_latent(model, unit, steps=steps)
    pred = inr.inr_forward(unit.coords, model.params, phi)
    err = float(np.mean((pred.data - unit.features.data) ** 2))
    return err, psnr(err)


def save_meta(path, model: MetaModel, meta_config: MetaTrainConfig, phis, stats):
    extra_arrays = {
        "alpha": model.alpha.data,
        "phi0": model.phi0.data,
        "phi_train": phis,
        "phi_mean": stats["mean"],
        "phi_std": stats["std"],
    }
    return inr.save_model(
        path, model.params,
        extra_config={"meta": asdict(meta_config)},
        extra_arrays=extra_arrays,
    )


def load_meta(path):
    """Returns (model, meta_config, phis, stats, hash)."""
    params, other_cfg, extra, h = inr.load_model(path)
    dt = params.config.np_dtype
    model = MetaModel(
        params,
        Tensor(extra["phi0"].astype(dt), requires_grad=True),
        Tensor(extra["alpha"].astype(dt), requires_grad=True),
    )
    meta_config = MetaTrainConfig(**other_cfg["meta"])
    stats = {"mean": extra["phi_mean"], "std": extra["phi_std"]}
    return model, meta_config, extra["phi_train"], stats, h
