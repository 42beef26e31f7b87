"""Coordinate/feature datasets: grids, spherical coordinates, patching, NTF files.

A stored signal is an array shaped (*spatial_dims, feat_dim).  Fitting
operates on flat (M, coord_dim) / (M, feat_dim) pairs; when patching is
configured, each non-overlapping patch becomes its own fitting unit with its
own coordinate grid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

NTF_MAGIC = b"NTF1"
_NTF_DTYPES = {0: np.float32, 1: np.float64, 2: np.uint8}
_NTF_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


@dataclass
class ModalitySpec:
    kind: str  # "grid" or "era5"
    shape: tuple
    feat_dim: int
    coord_range: tuple = (0.0, 1.0)
    patch_shape: tuple | None = None

    @property
    def coord_dim(self):
        return 3 if self.kind == "era5" else len(self.shape)


@dataclass
class SignalItem:
    """One dataset entry: original geometry plus its fitting units."""

    name: str
    shape: tuple
    feat_dim: int
    patches: list  # list of (M, feat_dim) feature arrays, row-major patch order
    grid: tuple  # patch-grid dims (all ones when unpatched)
    pads: tuple = field(default=())


def grid_coords(shape, coord_range=(0.0, 1.0)):
    """Endpoint-inclusive evenly spaced grid, flattened row-major: (M, ndim)."""
    if not shape:
        raise ValueError("grid shape must be non-empty")
    lo, hi = coord_range
    axes = [np.linspace(lo, hi, int(n), dtype=np.float64) for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


def era5_coords(n_lat, n_long):
    """Unit-sphere points for an equirectangular grid, flattened row-major.

    Latitudes are equally spaced in [-pi/2, pi/2] inclusive; longitudes in
    [0, 2*pi*(n-1)/n].
    """
    lats = np.linspace(-np.pi / 2, np.pi / 2, int(n_lat), dtype=np.float64)
    longs = np.arange(int(n_long), dtype=np.float64) * (2 * np.pi / int(n_long))
    lat, lon = np.meshgrid(lats, longs, indexing="ij")
    coords = np.stack(
        [np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)],
        axis=-1,
    )
    return coords.reshape(-1, 3)


def coords_for(modality: ModalitySpec):
    """Coordinates of one fitting unit (a patch, or the whole signal)."""
    if modality.kind == "era5":
        return era5_coords(modality.shape[0], modality.shape[1])
    shape = modality.patch_shape or modality.shape
    return grid_coords(shape, modality.coord_range)


def patchify(data, patch_shape):
    """Split (*spatial, feat) into non-overlapping patches, row-major order.

    Dims not divisible by the patch size are reflection-padded; the pad
    amounts are returned so depatchify can crop them away exactly.
    Returns (patches (P, *patch_shape, feat), grid dims, pads).
    """
    spatial = data.shape[:-1]
    if len(patch_shape) != len(spatial):
        raise ValueError(
            f"patch rank {len(patch_shape)} != spatial rank {len(spatial)}"
        )
    pads = tuple(
        (-s) % p for s, p in zip(spatial, patch_shape)
    )
    for s, p, pad in zip(spatial, patch_shape, pads):
        if pad >= s:
            raise ValueError(
                f"cannot reflect-pad dim of size {s} by {pad} (patch {p} too large)"
            )
    if any(pads):
        data = np.pad(data, [(0, p) for p in pads] + [(0, 0)], mode="reflect")
    spatial = data.shape[:-1]
    grid = tuple(s // p for s, p in zip(spatial, patch_shape))
    # (g1, p1, g2, p2, ..., feat) -> (g1, g2, ..., p1, p2, ..., feat)
    split = []
    for g, p in zip(grid, patch_shape):
        split.extend([g, p])
    split.append(data.shape[-1])
    arr = data.reshape(split)
    ndim = len(grid)
    order = list(range(0, 2 * ndim, 2)) + list(range(1, 2 * ndim, 2)) + [2 * ndim]
    arr = arr.transpose(order)
    return arr.reshape((int(np.prod(grid)),) + tuple(patch_shape) + (data.shape[-1],)), grid, pads


def depatchify(patches, grid, full_shape):
    """Exact inverse of patchify; crops any reflection padding."""
    patch_shape = patches.shape[1 : -1]
    feat = patches.shape[-1]
    ndim = len(grid)
    arr = patches.reshape(tuple(grid) + tuple(patch_shape) + (feat,))
    order = []
    for i in range(ndim):
        order.extend([i, ndim + i])
    order.append(2 * ndim)
    arr = arr.transpose(order)
    padded = tuple(g * p for g, p in zip(grid, patch_shape))
    arr = arr.reshape(padded + (feat,))
    slices = tuple(slice(0, s) for s in full_shape) + (slice(None),)
    return np.ascontiguousarray(arr[slices])


def save_ntf(path, arr):
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _NTF_CODE:
        raise FormatError(f"NTF supports f32/f64/u8, not {arr.dtype}")
    with open(path, "wb") as f:
        f.write(NTF_MAGIC)
        f.write(struct.pack("<BB", _NTF_CODE[arr.dtype], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_ntf(path, rescale_u8=False):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != NTF_MAGIC:
        raise FormatError(f"bad NTF magic {raw[:4]!r}")
    code, rank = struct.unpack_from("<BB", raw, 4)
    if code not in _NTF_DTYPES:
        raise FormatError(f"unknown NTF dtype code {code}")
    dims = struct.unpack_from(f"<{rank}Q", raw, 6)
    dtype = np.dtype(_NTF_DTYPES[code]).newbyteorder("<")
    off = 6 + 8 * rank
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - off != expected:
        raise FormatError(
            f"NTF payload is {len(raw) - off} bytes, expected {expected}"
        )
    arr = np.frombuffer(raw, dtype=dtype, offset=off).reshape(dims)
    arr = arr.astype(_NTF_DTYPES[code])
    if code == 2 and rescale_u8:
        return arr.astype(np.float64) / 255.0
    return arr


def load_manifest(root):
    with open(f"{root}/manifest.txt", "r", encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def write_manifest(root, names):
    with open(f"{root}/manifest.txt", "w", encoding="utf-8") as f:
        for name in names:
            f.write(name + "\n")


def load_item(root, name, modality: ModalitySpec):
    """Load one NTF signal and cut it into fitting units per the modality."""
    arr = load_ntf(f"{root}/{name}", rescale_u8=True)
    if arr.ndim == len(modality.shape):  # implicit feature dim of 1
        arr = arr[..., None]
    if arr.shape[:-1] != tuple(modality.shape) or arr.shape[-1] != modality.feat_dim:
        raise FormatError(
            f"{name}: shape {arr.shape} does not match modality "
            f"{tuple(modality.shape)}+({modality.feat_dim},)"
        )
    arr = arr.astype(np.float64)
    if modality.patch_shape:
        patches, grid, pads = patchify(arr, modality.patch_shape)
        feats = [p.reshape(-1, modality.feat_dim) for p in patches]
    else:
        grid = tuple(1 for _ in modality.shape)
        pads = tuple(0 for _ in modality.shape)
        feats = [arr.reshape(-1, modality.feat_dim)]
    return SignalItem(
        name=name,
        shape=tuple(modality.shape),
        feat_dim=modality.feat_dim,
        patches=feats,
        grid=grid,
        pads=pads,
    )


def load_dataset(root, modality: ModalitySpec):
    return [load_item(root, name, modality) for name in load_manifest(root)]


def assemble_item(patch_features, item: SignalItem, modality: ModalitySpec):
    """Rebuild the full (*spatial, feat) array from per-patch feature rows."""
    if modality.patch_shape:
        pshape = tuple(modality.patch_shape)
        patches = np.stack(
            [p.reshape(pshape + (item.feat_dim,)) for p in patch_features]
        )
        return depatchify(patches, item.grid, item.shape)
    return patch_features[0].reshape(tuple(item.shape) + (item.feat_dim,))


def make_synthetic_rgb(count, shape=(16, 16), seed=0):
    """Smooth random RGB signals sharing a global sinusoid basis.

    Items share frequency structure so that meta-learned adaptation has
    something to exploit; per-item variation lives in mixing coefficients,
    phases, and base colors.  Values lie in [0, 1].
    """
    rng = np.random.default_rng(seed)
    n_basis = 8
    freqs = rng.uniform(-3.0, 3.0, size=(n_basis, 2))
    coords = grid_coords(shape, (0.0, 1.0))  # (M, 2)
    phase_of = coords @ freqs.T * (2 * np.pi)  # (M, n_basis)
    items = np.empty((count,) + tuple(shape) + (3,), dtype=np.float64)
    for i in range(count):
        base = rng.uniform(0.25, 0.75, size=3)
        amps = rng.normal(0.0, 0.12, size=(n_basis, 3))
        phases = rng.uniform(0.0, 2 * np.pi, size=n_basis)
        signal = np.sin(phase_of + phases) @ amps  # (M, 3)
        img = np.clip(base + signal, 0.0, 1.0)
        items[i] = img.reshape(tuple(shape) + (3,))
    return items
