"""Shared sinusoid coordinate network specialized per item by soft gating.

A single base network (weights ``w.l`` / biases ``b.l``) is conditioned on a
compact per-item latent vector.  A residual predictor maps the normalized
latent to per-layer low-rank factor pairs (U, V); each gated layer's weight
matrix is scaled elementwise by sigmoid(U V^T), which softly selects an
item-specific subnetwork.  Hidden layers apply sin(omega0 * (G .* W x + b));
the final layer is affine.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericFault
from .serialize import MODEL_MAGIC, read_container, write_container


@dataclass
class INRConfig:
    coord_dim: int
    feat_dim: int
    depth: int  # weight layers, including the final affine layer
    width: int
    latent_dim: int
    omega0: float = 30.0
    gate_rank: int = 1
    gate_first_layer: bool = False
    gate_output_layer: bool = False
    predictor_width: int = 256
    predictor_blocks: int = 2
    predictor_layer_norm: bool = True
    dtype: str = "f64"

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.gate_rank < 1 or self.gate_rank * 4 > self.width:
            raise ValueError(
                f"gate_rank must satisfy 1 <= rank <= width/4, got {self.gate_rank}"
            )
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def layer_dims(self):
        """(fan_out, fan_in) of every weight layer, in order."""
        dims = [(self.width, self.coord_dim)]
        for _ in range(self.depth - 2):
            dims.append((self.width, self.width))
        dims.append((self.feat_dim, self.width))
        return dims

    def gated_layers(self):
        """1-based indices of gated layers; hidden layers 2..L-1 by default."""
        layers = list(range(2, self.depth))
        if self.gate_first_layer:
            layers.insert(0, 1)
        if self.gate_output_layer:
            layers.append(self.depth)
        return layers

    def gate_param_count(self):
        dims = self.layer_dims()
        return sum(
            (dims[l - 1][0] + dims[l - 1][1]) * self.gate_rank
            for l in self.gated_layers()
        )


class SharedINRParams:
    """Base-network weights/biases plus the latent-to-gates predictor."""

    def __init__(self, config, weights, biases, predictor):
        self.config = config
        self.weights = weights  # list of (out, in) tensors
        self.biases = biases  # list of (out,) tensors
        self.predictor = predictor  # dict name -> tensor

    def all_tensors(self):
        """Fixed-order parameter list (serialization and gradient order)."""
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            out.append((f"w.{i}", w))
            out.append((f"b.{i}", b))
        for name in sorted(self.predictor):
            out.append((f"pred.{name}", self.predictor[name]))
        return out

    def tensors(self):
        return [t for _, t in self.all_tensors()]

    def set_requires_grad(self, flag):
        for t in self.tensors():
            t.requires_grad = flag


class GateSet:
    """Per-layer low-rank factors and the resulting soft gates."""

    def __init__(self, entries):
        self.entries = entries  # list of (layer_index, U, V, G)
        self.by_layer = {l: g for l, _, _, g in entries}


def init_siren(config: INRConfig, seed) -> SharedINRParams:
    """Seeded initialization; first layer uniform in +-1/fan_in, deeper layers
    uniform in +-sqrt(6/fan_in)/omega0, biases uniform in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    weights, biases = [], []
    for i, (out, fan_in) in enumerate(config.layer_dims()):
        if i == 0:
            bound = 1.0 / fan_in
        else:
            bound = np.sqrt(6.0 / fan_in) / config.omega0
        w = rng.uniform(-bound, bound, size=(out, fan_in))
        b = rng.uniform(-1.0, 1.0, size=out) / np.sqrt(fan_in)
        weights.append(Tensor(w.astype(dt), requires_grad=True))
        biases.append(Tensor(b.astype(dt), requires_grad=True))

    pw = config.predictor_width
    predictor = {}

    def linear(name, fan_out, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        predictor[f"{name}.w"] = Tensor(w.astype(dt), requires_grad=True)
        predictor[f"{name}.b"] = Tensor(b.astype(dt), requires_grad=True)

    linear("in", pw, config.latent_dim)
    for r in range(config.predictor_blocks):
        linear(f"block{r}.l1", pw, pw)
        linear(f"block{r}.l2", pw, pw)
    linear("out", config.gate_param_count(), pw)
    return SharedINRParams(config, weights, biases, predictor)


def _affine(x, w, b):
    return ad.add(ad.matmul(x, ad.transpose(w)), b)


def predict_gates(phi, params: SharedINRParams) -> GateSet:
    """Latent -> low-rank factors -> sigmoid gates, in fixed layer order."""
    config = params.config
    if phi.shape != (config.latent_dim,):
        raise ValueError(
            f"latent has shape {phi.shape}, model expects ({config.latent_dim},)"
        )
    p = params.predictor
    h = ad.reshape(phi, (1, config.latent_dim))
    if config.predictor_layer_norm:
        h = ad.layer_norm(h)
    h = _affine(h, p["in.w"], p["in.b"])
    for r in range(config.predictor_blocks):
        inner = ad.leaky_relu(_affine(h, p[f"block{r}.l1.w"], p[f"block{r}.l1.b"]))
        h = ad.add(h, ad.leaky_relu(_affine(inner, p[f"block{r}.l2.w"], p[f"block{r}.l2.b"])))
    flat = ad.reshape(_affine(h, p["out.w"], p["out.b"]), (config.gate_param_count(),))

    dims = config.layer_dims()
    d = config.gate_rank
    entries = []
    offset = 0
    for l in config.gated_layers():
        out, fan_in = dims[l - 1]
        u = ad.reshape(ad.narrow(flat, offset, out * d), (out, d))
        offset += out * d
        v = ad.reshape(ad.narrow(flat, offset, fan_in * d), (fan_in, d))
        offset += fan_in * d
        g = ad.sigmoid(ad.matmul(u, ad.transpose(v)))
        entries.append((l, u, v, g))
    return GateSet(entries)


def siren_forward(coords, params: SharedINRParams, gates: GateSet):
    """Evaluate the gated network on (M, coord_dim) coordinates."""
    config = params.config
    x = coords if isinstance(coords, Tensor) else Tensor(
        np.asarray(coords, dtype=config.np_dtype)
    )
    for l in range(1, config.depth + 1):
        w = params.weights[l - 1]
        b = params.biases[l - 1]
        g = gates.by_layer.get(l)
        try:
            if g is not None:
                w = ad.mul(g, w)
            x = _affine(x, w, b)
            if l < config.depth:
                x = ad.sin(ad.mul(x, config.omega0))
        except NumericFault as err:
            raise NumericFault(
                f"non-finite activation in layer {l}: {err}", op=err.op
            ) from err
    return x


def inr_forward(coords, params: SharedINRParams, phi):
    return siren_forward(coords, params, predict_gates(phi, params))


def fit_loss(coords, features, params: SharedINRParams, phi):
    """Mean squared error of the gated network against (M, feat_dim) targets."""
    target = features if isinstance(features, Tensor) else Tensor(
        np.asarray(features, dtype=params.config.np_dtype)
    )
    return ad.mse(inr_forward(coords, params, phi), target)


def unit_gates(params: SharedINRParams) -> GateSet:
    """Gates forced to exactly one; reproduces the ungated network."""
    dims = params.config.layer_dims()
    entries = []
    for l in params.config.gated_layers():
        out, fan_in = dims[l - 1]
        g = Tensor(np.ones((out, fan_in), dtype=params.config.np_dtype))
        entries.append((l, None, None, g))
    return GateSet(entries)


def gating_sparsity(params: SharedINRParams, gates: GateSet, threshold=0.001):
    """Fraction of effective weights (G .* W) below threshold, per gated layer.

    Returns ({layer: fraction}, overall_fraction over all gated layers).
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    per_layer = {}
    below = 0
    total = 0
    for l, _, _, g in gates.entries:
        w = params.weights[l - 1].data
        eff = np.abs(g.data * w)
        per_layer[l] = float(np.mean(eff < threshold))
        below += int(np.sum(eff < threshold))
        total += eff.size
    overall = below / total if total else 0.0
    return per_layer, overall


def save_model(path, params: SharedINRParams, extra_config=None, extra_arrays=None):
    """Serialize config + parameters; returns the pairing hash."""
    config = {"inr": asdict(params.config)}
    if extra_config:
        config.update(extra_config)
    arrays = {name: t.data for name, t in params.all_tensors()}
    if extra_arrays:
        arrays.update(extra_arrays)
    return write_container(path, MODEL_MAGIC, config, arrays)


def load_model(path):
    """Returns (params, extra_config, extra_arrays, hash)."""
    config, arrays, h = read_container(path, MODEL_MAGIC)
    inr_cfg = INRConfig(**config["inr"])
    weights, biases, predictor = [], [], {}
    extra = {}
    for name, arr in arrays.items():
        t = Tensor(arr.astype(inr_cfg.np_dtype), requires_grad=True)
        if name.startswith("w."):
            weights.append((int(name[2:]), t))
        elif name.startswith("b."):
            biases.append((int(name[2:]), t))
        elif name.startswith("pred."):
            predictor[name[5:]] = t
        else:
            extra[name] = arr
    weights = [t for _, t in sorted(weights)]
    biases = [t for _, t in sorted(biases)]
    params = SharedINRParams(inr_cfg, weights, biases, predictor)
    other_cfg = {k: v for k, v in config.items() if k != "inr"}
    return params, other_cfg, extra, h
