"""End-to-end operations shared by the CLI and tests.

Each function works on loaded artifacts (model, compressor, dataset) so the
command-line layer stays a thin argument-parsing shell and tests can drive
the identical code paths in process.
"""

from __future__ import annotations

import numpy as np

from . import coder, compressor, data, meta, metrics
from .errors import HashMismatch


def check_pairing(comp_model, inr_hash):
    if comp_model.inr_hash != inr_hash:
        raise HashMismatch(
            f"quantizer was trained against model hash {comp_model.inr_hash:#018x}, "
            f"supplied model has {inr_hash:#018x}",
            expected=inr_hash,
            actual=comp_model.inr_hash,
        )


def item_latents(model, dataset, modality, steps, threads=1):
    """Adapted latents for every unit of every item, dataset order."""
    units = meta.make_units(dataset, modality, dtype=model.params.config.np_dtype)
    phis = meta.emit_latents(model, units, steps, threads)
    return units, phis


def compress_items(model, model_hash, comp_model, quant_hash, dataset, modality,
                   steps, threads=1):
    """Adapt, transform, quantize, and entropy-code every item."""
    check_pairing(comp_model, model_hash)
    units, phis = item_latents(model, dataset, modality, steps, threads)
    codes = compressor.encode_codes(comp_model, phis)
    tables = coder.build_pmf_tables(
        comp_model.psi, comp_model.support_lo, comp_model.support_hi
    )
    items = []
    row = 0
    for item in dataset:
        n = len(item.patches)
        payload = coder.rc_encode(codes[row : row + n], tables)
        items.append((tuple(item.shape), payload))
        row += n
    blob = coder.pack_bitstream(
        items, inr_hash=model_hash, quantizer_hash=quant_hash, lam=comp_model.rd.lam
    )
    return blob


def _patch_count(shape, patch_shape):
    if not patch_shape:
        return 1
    return int(
        np.prod([-(-s // p) for s, p in zip(shape, patch_shape)])
    )


def decompress_items(blob, model, model_hash, comp_model, quant_hash, modality):
    """Bitstream -> list of (dims, reconstructed (*dims, feat) array)."""
    check_pairing(comp_model, model_hash)
    header, items = coder.unpack_bitstream(
        blob, expect_inr=model_hash, expect_quantizer=quant_hash
    )
    tables = coder.build_pmf_tables(
        comp_model.psi, comp_model.support_lo, comp_model.support_hi
    )
    coords = data.coords_for(modality)
    out = []
    for dims, payload in items:
        n = _patch_count(dims, modality.patch_shape)
        codes = coder.rc_decode(payload, tables, n)
        phi_hat = compressor.decode_codes(comp_model, codes)
        recon_patches = [
            inr_forward_np(model, coords, phi_hat[i]) for i in range(n)
        ]
        shell = data.SignalItem(
            name="",
            shape=tuple(dims),
            feat_dim=modality.feat_dim,
            patches=recon_patches,
            grid=tuple(
                -(-s // p) for s, p in zip(dims, modality.patch_shape)
            ) if modality.patch_shape else tuple(1 for _ in dims),
        )
        out.append((tuple(dims), data.assemble_item(recon_patches, shell, modality)))
    return header, out


def inr_forward_np(model, coords, phi):
    from . import inr
    from .autodiff import Tensor

    dt = model.params.config.np_dtype
    pred = inr.inr_forward(
        Tensor(np.asarray(coords, dtype=dt)), model.params, Tensor(np.asarray(phi, dtype=dt))
    )
    return pred.data


def rate_of(blob, dataset, modality, sample_rate=None):
    """Payload-only rate: bpp over pixels, or kbps when a sample rate is set."""
    _, items = coder.unpack_bitstream(blob)
    payload_bits = sum(len(p) * 8 for _, p in items)
    samples = sum(int(np.prod(dims)) for dims, _ in items)
    if sample_rate:
        return metrics.kbps(payload_bits, samples / sample_rate), "kbps"
    return metrics.bpp(payload_bits, samples), "bpp"


def evaluate_bitstream(blob, model, model_hash, comp_model, quant_hash, dataset,
                       modality, sample_rate=None, occupancy=False):
    """Decode and score a bitstream against the originals.

    Returns a dict with rate, PSNR (and voxel accuracy for occupancy grids).
    """
    header, recons = decompress_items(
        blob, model, model_hash, comp_model, quant_hash, modality
    )
    if len(recons) != len(dataset):
        raise ValueError(
            f"bitstream has {len(recons)} items, dataset has {len(dataset)}"
        )
    sq_err = 0.0
    count = 0
    acc = 0.0
    for item, (dims, recon) in zip(dataset, recons):
        original = data.assemble_item(item.patches, item, modality)
        if tuple(dims) != tuple(item.shape):
            raise ValueError(f"item dims {dims} do not match data {item.shape}")
        sq_err += float(np.sum((original - recon) ** 2))
        count += original.size
        if occupancy:
            acc += metrics.voxel_accuracy(recon, original)
    mse = sq_err / count
    rate, unit = rate_of(blob, dataset, modality, sample_rate)
    result = {
        "items": len(dataset),
        "mse": mse,
        "psnr_db": metrics.psnr(mse),
        "rate": rate,
        "rate_unit": unit,
        "lambda": header["lam"],
        "payload_bytes": sum(len(p) for _, p in coder.unpack_bitstream(blob)[1]),
    }
    if occupancy:
        result["voxel_accuracy"] = acc / len(dataset)
    return result
