"""Learned transform coding in latent space.

An analysis MLP maps normalized per-item latents to a code vector; training
adds uniform noise in place of rounding, scores the noisy code under a
per-dimension monotone cumulative density model (the rate, in bits), decodes
with a mirror synthesis MLP, and measures distortion on the data itself
through the frozen base network.  Rate and distortion trade off through a
single weight on the distortion term.

Both transforms are residual MLPs with self-normalizing activations and no
normalization layers.  The cumulative model is a stack of monotone scalar
maps: softplus-reparameterized non-negative matrices, tanh-gated residual
nonlinearities, and a terminal sigmoid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import inr
from .autodiff import Tape, Tensor, grad
from .coder import quantize
from .errors import NumericFault
from .meta import DivergenceDetector
from .optim import Adam
from .serialize import QUANTIZER_MAGIC, read_container, write_container

LIKELIHOOD_FLOOR = 1e-9
LOG2 = float(np.log(2.0))

CDF_FILTERS = (1, 3, 3, 3, 1)  # four monotone stages, three hidden units each
CDF_INIT_SCALE = 10.0


@dataclass
class RDConfig:
    lam: float
    z_dim: int
    width: int = 64
    blocks: int = 1
    lr: float = 1e-4
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    log_every: int = 200

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")


@dataclass
class CompressorModel:
    latent_dim: int
    rd: RDConfig
    transforms: dict  # name -> Tensor, analysis 'a.*' and synthesis 's.*'
    psi: dict  # name -> Tensor, cumulative model parameters
    mean: np.ndarray
    std: np.ndarray
    inr_hash: int
    support_lo: np.ndarray | None = None
    support_hi: np.ndarray | None = None

    def trainables(self):
        names = sorted(self.transforms) + sorted(self.psi)
        lookup = {**self.transforms, **self.psi}
        return [lookup[n] for n in names]


# ---------------------------------------------------------------------------
# latent normalization


def normalize_phi(phi, stats):
    """Per-dimension (phi - mean) / std; exact inverse of denormalize_phi."""
    if isinstance(phi, Tensor):
        return ad.div(ad.sub(phi, Tensor(stats["mean"])), Tensor(stats["std"]))
    return (phi - stats["mean"]) / stats["std"]


def denormalize_phi(phi_n, stats):
    if isinstance(phi_n, Tensor):
        return ad.add(ad.mul(phi_n, Tensor(stats["std"])), Tensor(stats["mean"]))
    return phi_n * stats["std"] + stats["mean"]


# ---------------------------------------------------------------------------
# transforms


def init_transforms(latent_dim, config: RDConfig, rng):
    tensors = {}

    def linear(name, fan_out, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        tensors[f"{name}.w"] = Tensor(
            rng.uniform(-bound, bound, size=(fan_out, fan_in)), requires_grad=True
        )
        tensors[f"{name}.b"] = Tensor(
            rng.uniform(-bound, bound, size=fan_out), requires_grad=True
        )

    for side, d_in, d_out in (
        ("a", latent_dim, config.z_dim),
        ("s", config.z_dim, latent_dim),
    ):
        linear(f"{side}.in", config.width, d_in)
        for r in range(config.blocks):
            linear(f"{side}.block{r}.l1", config.width, config.width)
            linear(f"{side}.block{r}.l2", config.width, config.width)
        linear(f"{side}.out", d_out, config.width)
    return tensors


def _mlp(x, tensors, side, blocks):
    h = ad.add(ad.matmul(x, ad.transpose(tensors[f"{side}.in.w"])), tensors[f"{side}.in.b"])
    for r in range(blocks):
        inner = ad.selu(
            ad.add(
                ad.matmul(h, ad.transpose(tensors[f"{side}.block{r}.l1.w"])),
                tensors[f"{side}.block{r}.l1.b"],
            )
        )
        h = ad.add(
            h,
            ad.selu(
                ad.add(
                    ad.matmul(inner, ad.transpose(tensors[f"{side}.block{r}.l2.w"])),
                    tensors[f"{side}.block{r}.l2.b"],
                )
            ),
        )
    return ad.add(ad.matmul(h, ad.transpose(tensors[f"{side}.out.w"])), tensors[f"{side}.out.b"])


def analysis(phi_n, model: CompressorModel):
    """Normalized latents (B, D) -> codes (B, Z)."""
    x = phi_n if isinstance(phi_n, Tensor) else Tensor(np.atleast_2d(phi_n))
    return _mlp(x, model.transforms, "a", model.rd.blocks)


def synthesis(z, model: CompressorModel):
    """Codes (B, Z) -> normalized latent reconstructions (B, D)."""
    x = z if isinstance(z, Tensor) else Tensor(np.atleast_2d(np.asarray(z, dtype=np.float64)))
    return _mlp(x, model.transforms, "s", model.rd.blocks)


# ---------------------------------------------------------------------------
# factorized cumulative model


def init_cdf_params(z_dim, rng):
    """Per-dimension monotone CDF network, biased to cover roughly +-10."""
    k_stages = len(CDF_FILTERS) - 1
    scale = CDF_INIT_SCALE ** (1.0 / k_stages)
    psi = {}
    for k in range(k_stages):
        fan_in, fan_out = CDF_FILTERS[k], CDF_FILTERS[k + 1]
        init = np.log(np.expm1(1.0 / scale / fan_out))
        psi[f"h{k}"] = Tensor(
            np.full((z_dim, fan_out, fan_in), init), requires_grad=True
        )
        psi[f"b{k}"] = Tensor(
            rng.uniform(-0.5, 0.5, size=(z_dim, fan_out)), requires_grad=True
        )
        if k < k_stages - 1:
            psi[f"a{k}"] = Tensor(np.zeros((z_dim, fan_out)), requires_grad=True)
    return psi


def cdf(psi, x):
    """Cumulative probability of each entry of (B, Z); monotone in x."""
    u = ad.reshape(x, (x.shape[0], x.shape[1], 1))
    k_stages = len(CDF_FILTERS) - 1
    for k in range(k_stages):
        u = ad.einsum("coi,bci->bco", ad.softplus(psi[f"h{k}"]), u)
        u = ad.add(u, psi[f"b{k}"])  # (B, C, O) + (C, O)
        if k < k_stages - 1:
            u = ad.add(u, ad.mul(ad.tanh(psi[f"a{k}"]), ad.tanh(u)))
    return ad.sigmoid(ad.reshape(u, (x.shape[0], x.shape[1])))


def likelihood(psi, v, floor=LIKELIHOOD_FLOOR):
    """Interval probability c(v + 1/2) - c(v - 1/2).

    The default floor keeps the loss's log finite; pass floor=0.0 for the raw
    difference (non-negative by monotonicity, sums telescope to at most 1).
    """
    v = v if isinstance(v, Tensor) else Tensor(np.atleast_2d(np.asarray(v, dtype=np.float64)))
    hi = cdf(psi, ad.add(v, 0.5))
    lo = cdf(psi, ad.sub(v, 0.5))
    diff = ad.sub(hi, lo)
    return ad.clip_min(diff, floor) if floor > 0 else ad.clip_min(diff, 0.0)


def rate_bits(psi, v):
    """Total code length estimate of (B, Z) values, in bits."""
    return ad.mul(ad.tsum(ad.neg(ad.log(likelihood(psi, v)))), 1.0 / LOG2)


# ---------------------------------------------------------------------------
# rate-distortion objective (Algorithm: noisy code, model rate, data distortion)


def _rows(x, count, width):
    flat = ad.reshape(x, (count * width,))
    return [ad.narrow(flat, i * width, width) for i in range(count)]


def rd_terms(batch_units, phi_batch, model: CompressorModel, params, noise):
    """(rate_bits_per_item, distortion) as differentiable scalars.

    ``phi_batch`` is (B, D) unnormalized latents; ``noise`` is the (B, Z)
    uniform perturbation standing in for rounding.  Distortion is the mean
    squared error of the decoded reconstruction against each unit's features,
    evaluated through the (frozen) base network.
    """
    stats = {"mean": model.mean, "std": model.std}
    phi_n = normalize_phi(
        phi_batch if isinstance(phi_batch, Tensor) else Tensor(phi_batch), stats
    )
    z = analysis(phi_n, model)
    z_noisy = ad.add(z, Tensor(noise))
    rate = ad.mul(rate_bits(model.psi, z_noisy), 1.0 / len(batch_units))

    phi_hat = denormalize_phi(synthesis(z_noisy, model), stats)
    rows = _rows(phi_hat, len(batch_units), model.latent_dim)
    total = None
    for unit, phi_row in zip(batch_units, rows):
        d = inr.fit_loss(unit.coords, unit.features, params, phi_row)
        total = d if total is None else ad.add(total, d)
    distortion = ad.mul(total, 1.0 / len(batch_units))
    return rate, distortion


def rd_loss(batch_units, phi_batch, model, params, noise, lam=None):
    rate, distortion = rd_terms(batch_units, phi_batch, model, params, noise)
    return ad.add(rate, ad.mul(distortion, lam if lam is not None else model.rd.lam))


def train_compressor(units, phis, meta_model, stats, rd_config: RDConfig,
                     inr_hash=0, log=None):
    """Joint gradient training of both transforms and the cumulative model.

    The base network is frozen: its parameter bytes are identical before and
    after.  Uniform noise is drawn from the run seed, so the loss trajectory
    is reproducible.  Returns the trained CompressorModel with integer code
    supports measured over the training latents (margin 4).
    """
    if len(units) != len(phis):
        raise ValueError(f"{len(units)} units but {len(phis)} latents")
    rng = np.random.default_rng(rd_config.seed)
    latent_dim = phis.shape[1]
    model = CompressorModel(
        latent_dim=latent_dim,
        rd=rd_config,
        transforms=init_transforms(latent_dim, rd_config, rng),
        psi=init_cdf_params(rd_config.z_dim, rng),
        mean=stats["mean"].copy(),
        std=stats["std"].copy(),
        inr_hash=inr_hash,
    )
    params = meta_model.params
    params.set_requires_grad(False)
    try:
        opt = Adam(model.trainables(), lr=rd_config.lr)
        detector = DivergenceDetector()
        step = 0
        while step < rd_config.steps:
            order = rng.permutation(len(units))
            for lo in range(0, len(order), rd_config.batch_size):
                if step >= rd_config.steps:
                    break
                idx = order[lo : lo + rd_config.batch_size]
                if len(idx) < min(rd_config.batch_size, len(units)):
                    continue
                batch = [units[i] for i in idx]
                phi_batch = phis[idx]
                noise = rng.uniform(-0.5, 0.5, size=(len(idx), rd_config.z_dim))
                with Tape() as tape:
                    loss = rd_loss(batch, phi_batch, model, params, noise)
                    if not np.isfinite(loss.data):
                        raise NumericFault(
                            f"non-finite compressor loss at step {step}", step=step
                        )
                    grads = grad(loss, model.trainables(), tape)
                gnp = [g.data for g in grads]
                opt.step(gnp)
                detector.update(step, float(loss.data))
                step += 1
                if log and step % rd_config.log_every == 0:
                    print(
                        f"rd step {step}/{rd_config.steps} loss {float(loss.data):.4f}",
                        file=log,
                    )
    finally:
        params.set_requires_grad(True)
    lo, hi = measure_supports(model, phis)
    model.support_lo = lo
    model.support_hi = hi
    return model


def measure_supports(model: CompressorModel, phis, margin=4):
    """Per-dimension integer code range over a latent set, plus margin."""
    stats = {"mean": model.mean, "std": model.std}
    z = analysis(Tensor(normalize_phi(phis, stats)), model).data
    q = quantize(z)
    return (
        (q.min(axis=0) - margin).astype(np.int64),
        (q.max(axis=0) + margin).astype(np.int64),
    )


# ---------------------------------------------------------------------------
# inference path and the uniform baseline


def encode_codes(model: CompressorModel, phis):
    """Latents (N, D) -> integer codes (N, Z) via analysis + rounding."""
    stats = {"mean": model.mean, "std": model.std}
    z = analysis(Tensor(normalize_phi(np.atleast_2d(phis), stats)), model).data
    return quantize(z)


def decode_codes(model: CompressorModel, z_int):
    """Integer codes (N, Z) -> latent reconstructions (N, D)."""
    stats = {"mean": model.mean, "std": model.std}
    z = Tensor(np.atleast_2d(z_int).astype(np.float64))
    return denormalize_phi(synthesis(z, model).data, stats)


def uniform_baseline(phis_train, phis_test, bits):
    """Uniform quantization over per-dimension train min/max at a bit width.

    Returns (reconstructed test latents, bits per item).  The classic
    moment-based scheme learned compression is compared against.
    """
    lo = phis_train.min(axis=0)
    hi = phis_train.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    levels = (1 << bits) - 1
    q = np.clip(np.round((phis_test - lo) / span * levels), 0, levels)
    recon = lo + q / levels * span
    return recon, bits * phis_train.shape[1]


# ---------------------------------------------------------------------------
# checkpointing


def save_compressor(path, model: CompressorModel):
    config = {
        "rd": asdict(model.rd),
        "latent_dim": model.latent_dim,
        "inr_hash": model.inr_hash,
    }
    arrays = {f"t.{k}": t.data for k, t in model.transforms.items()}
    arrays.update({f"p.{k}": t.data for k, t in model.psi.items()})
    arrays["mean"] = model.mean
    arrays["std"] = model.std
    arrays["support_lo"] = model.support_lo.astype(np.int64)
    arrays["support_hi"] = model.support_hi.astype(np.int64)
    return write_container(path, QUANTIZER_MAGIC, config, arrays)


def load_compressor(path):
    config, arrays, h = read_container(path, QUANTIZER_MAGIC)
    rd = RDConfig(**config["rd"])
    transforms = {}
    psi = {}
    for name, arr in arrays.items():
        if name.startswith("t."):
            transforms[name[2:]] = Tensor(arr, requires_grad=True)
        elif name.startswith("p."):
            psi[name[2:]] = Tensor(arr, requires_grad=True)
    model = CompressorModel(
        latent_dim=config["latent_dim"],
        rd=rd,
        transforms=transforms,
        psi=psi,
        mean=arrays["mean"],
        std=arrays["std"],
        inr_hash=config["inr_hash"],
        support_lo=arrays["support_lo"],
        support_hi=arrays["support_hi"],
    )
    return model, h
