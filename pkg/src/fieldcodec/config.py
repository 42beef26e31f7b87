"""JSON run configuration with explicit validation.

Every validation failure names the offending field path, e.g.
``modality.shape[1]: must be a positive integer``.  Cross-references between
sections (coordinate dims, feature dims) are checked here so later stages can
assume a consistent config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .data import ModalitySpec
from .errors import ConfigError
from .inr import INRConfig
from .meta import MetaTrainConfig
from .compressor import RDConfig


@dataclass
class RunConfig:
    modality: ModalitySpec
    inr: INRConfig
    meta: MetaTrainConfig
    rd: RDConfig
    seed: int = 0
    threads: int = 1
    sample_rate: float | None = None  # audio modalities; enables kbps rates
    occupancy: bool = False  # binary features; enables voxel accuracy


def _get(section, key, path, expected, default=None, required=False):
    if key not in section:
        if required:
            raise ConfigError(f"{path}.{key}: required field is missing")
        return default
    value = section[key]
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if expected is not None and (
        not isinstance(value, expected) or isinstance(value, bool) and expected is not bool
    ):
        raise ConfigError(
            f"{path}.{key}: expected {getattr(expected, '__name__', expected)}, "
            f"got {type(value).__name__}"
        )
    return value


def _positive_int(section, key, path, default=None, required=False):
    v = _get(section, key, path, int, default=default, required=required)
    if v is not None and v <= 0:
        raise ConfigError(f"{path}.{key}: must be a positive integer, got {v}")
    return v


def _int_list(section, key, path, required=False):
    v = _get(section, key, path, list, required=required)
    if v is None:
        return None
    for i, item in enumerate(v):
        if not isinstance(item, int) or isinstance(item, bool) or item <= 0:
            raise ConfigError(f"{path}.{key}[{i}]: must be a positive integer")
    return tuple(v)


def _parse_modality(section):
    path = "modality"
    kind = _get(section, "kind", path, str, default="grid")
    if kind not in ("grid", "era5"):
        raise ConfigError(f"{path}.kind: must be 'grid' or 'era5', got {kind!r}")
    shape = _int_list(section, "shape", path, required=True)
    feat_dim = _positive_int(section, "feat_dim", path, required=True)
    coord_range = _get(section, "coord_range", path, list, default=[0.0, 1.0])
    if len(coord_range) != 2 or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in coord_range
    ):
        raise ConfigError(f"{path}.coord_range: must be [lo, hi]")
    if not coord_range[0] < coord_range[1]:
        raise ConfigError(f"{path}.coord_range: lo must be below hi")
    patch_shape = _int_list(section, "patch_shape", path)
    if kind == "era5":
        if len(shape) != 2:
            raise ConfigError(f"{path}.shape: spherical grids are [n_lat, n_long]")
        if patch_shape is not None:
            raise ConfigError(f"{path}.patch_shape: not supported for era5")
    elif patch_shape is not None and len(patch_shape) != len(shape):
        raise ConfigError(
            f"{path}.patch_shape: rank {len(patch_shape)} does not match "
            f"shape rank {len(shape)}"
        )
    sample_rate = _get(section, "sample_rate", path, (int, float))
    occupancy = _get(section, "occupancy", path, bool, default=False)
    spec = ModalitySpec(
        kind=kind,
        shape=shape,
        feat_dim=feat_dim,
        coord_range=(float(coord_range[0]), float(coord_range[1])),
        patch_shape=patch_shape,
    )
    return spec, sample_rate, occupancy


def _build(cls, section, path, overrides):
    merged = dict(section)
    merged.update(overrides)
    try:
        return cls(**merged)
    except TypeError as err:
        bad = str(err).split("'")
        field = bad[1] if len(bad) > 1 else "?"
        raise ConfigError(f"{path}.{field}: unknown or missing field") from err
    except ValueError as err:
        raise ConfigError(f"{path}: {err}") from err


def parse_config(doc):
    if not isinstance(doc, dict):
        raise ConfigError(": top level must be a JSON object")
    for key in ("modality", "inr", "meta", "rd"):
        if key not in doc or not isinstance(doc[key], dict):
            raise ConfigError(f"{key}: required section is missing or not an object")
    seed = _get(doc, "seed", "", int, default=0)
    threads = _positive_int(doc, "threads", "", default=1)
    modality, sample_rate, occupancy = _parse_modality(doc["modality"])

    inr_cfg = _build(
        INRConfig,
        doc["inr"],
        "inr",
        {"coord_dim": modality.coord_dim, "feat_dim": modality.feat_dim},
    )
    meta_cfg = _build(MetaTrainConfig, doc["meta"], "meta",
                      {"seed": seed, "threads": threads})
    rd_cfg = _build(RDConfig, doc["rd"], "rd", {"seed": seed})

    return RunConfig(
        modality=modality,
        inr=inr_cfg,
        meta=meta_cfg,
        rd=rd_cfg,
        seed=seed,
        threads=threads,
        sample_rate=sample_rate,
        occupancy=occupancy,
    )


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as err:
        raise ConfigError(f": invalid JSON ({err})") from err
    return parse_config(doc)
