"""Command-line pipeline driver.

Progress and diagnostics go to stderr; machine-readable results go to stdout
or to files.  Exit codes: 0 success, 1 usage/config/data errors, 2 hash
mismatch between bitstream and checkpoints, 3 numeric fault.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import compressor, data, meta, metrics, pipeline
from .config import load_config
from .errors import ConfigError, DivergenceError, FormatError, HashMismatch, NumericFault


def _load_run(args):
    run = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed
        run.meta.seed = args.seed
        run.rd.seed = args.seed
    if getattr(args, "threads", None) is not None:
        run.threads = args.threads
        run.meta.threads = args.threads
    return run


def _load_model(path):
    return meta.load_meta(path)


def _load_quantizer(path):
    return compressor.load_compressor(path)


def cmd_meta_train(args):
    run = _load_run(args)
    dataset = data.load_dataset(args.data, run.modality)
    units = meta.make_units(dataset, run.modality, dtype=run.inr.np_dtype)
    print(f"meta-train: {len(units)} units from {len(dataset)} items", file=sys.stderr)
    model, phis, stats = meta.meta_train(units, run.inr, run.meta, log=sys.stderr)
    h = meta.save_meta(args.output, model, run.meta, phis, stats)
    losses = [meta.evaluate_unit(model, u, run.meta.inner_steps)[1] for u in units]
    print(json.dumps({
        "model": str(args.output),
        "hash": h,
        "units": len(units),
        "train_psnr_db": float(np.mean(losses)),
    }))
    return 0


def cmd_fit(args):
    run = _load_run(args)
    model, meta_cfg, _, _ = _load_model(args.model)[:4]
    dataset = data.load_dataset(args.data, run.modality)
    units, phis = pipeline.item_latents(
        model, dataset, run.modality, meta_cfg.inner_steps, run.threads
    )
    data.save_ntf(args.output, phis.astype(np.float64))
    print(json.dumps({"latents": str(args.output), "rows": int(phis.shape[0])}))
    return 0


def cmd_train_quantizer(args):
    run = _load_run(args)
    model, meta_cfg, phis, stats, model_hash = _load_model(args.model)
    dataset = data.load_dataset(args.data, run.modality)
    units = meta.make_units(dataset, run.modality, dtype=run.inr.np_dtype)
    if len(units) != len(phis):
        raise FormatError(
            f"checkpoint holds {len(phis)} latents but data dir yields "
            f"{len(units)} units; train-quantizer needs the meta-training data"
        )
    rd = run.rd
    if args.lam is not None:
        rd = compressor.RDConfig(**{**rd.__dict__, "lam": args.lam})
    print(f"train-quantizer: lambda={rd.lam}", file=sys.stderr)
    comp_model = compressor.train_compressor(
        units, phis, model, stats, rd, inr_hash=model_hash, log=sys.stderr
    )
    h = compressor.save_compressor(args.output, comp_model)
    print(json.dumps({"quantizer": str(args.output), "hash": h, "lambda": rd.lam}))
    return 0


def cmd_compress(args):
    run = _load_run(args)
    model, meta_cfg, _, _, model_hash = _load_model(args.model)
    comp_model, quant_hash = _load_quantizer(args.quantizer)
    dataset = data.load_dataset(args.data, run.modality)
    blob = pipeline.compress_items(
        model, model_hash, comp_model, quant_hash, dataset, run.modality,
        meta_cfg.inner_steps, run.threads,
    )
    with open(args.output, "wb") as f:
        f.write(blob)
    print(json.dumps({
        "bitstream": str(args.output),
        "bytes": len(blob),
        "items": len(dataset),
    }))
    return 0


def cmd_decompress(args):
    run = _load_run(args)
    model, _, _, _, model_hash = _load_model(args.model)
    comp_model, quant_hash = _load_quantizer(args.quantizer)
    with open(args.input, "rb") as f:
        blob = f.read()
    _, recons = pipeline.decompress_items(
        blob, model, model_hash, comp_model, quant_hash, run.modality
    )
    os.makedirs(args.output, exist_ok=True)
    names = []
    for i, (_, recon) in enumerate(recons):
        name = f"recon_{i:05d}.ntf"
        data.save_ntf(os.path.join(args.output, name), recon)
        names.append(name)
    data.write_manifest(args.output, names)
    print(json.dumps({"output": str(args.output), "items": len(names)}))
    return 0


def cmd_eval(args):
    run = _load_run(args)
    model, _, _, _, model_hash = _load_model(args.model)
    comp_model, quant_hash = _load_quantizer(args.quantizer)
    dataset = data.load_dataset(args.data, run.modality)
    with open(args.input, "rb") as f:
        blob = f.read()
    result = pipeline.evaluate_bitstream(
        blob, model, model_hash, comp_model, quant_hash, dataset, run.modality,
        sample_rate=run.sample_rate, occupancy=run.occupancy,
    )
    print(json.dumps(result))
    return 0


def cmd_rd_curve(args):
    run = _load_run(args)
    model, meta_cfg, phis, stats, model_hash = _load_model(args.model)
    dataset = data.load_dataset(args.data, run.modality)
    units = meta.make_units(dataset, run.modality, dtype=run.inr.np_dtype)
    lambdas = [float(s) for s in args.lambdas.split(",") if s.strip()]
    if not lambdas:
        raise ConfigError("lambdas: need at least one value")
    rows = []
    for lam in lambdas:
        rd = compressor.RDConfig(**{**run.rd.__dict__, "lam": lam})
        print(f"rd-curve: training quantizer at lambda={lam}", file=sys.stderr)
        comp_model = compressor.train_compressor(
            units, phis, model, stats, rd, inr_hash=model_hash, log=sys.stderr
        )
        blob = pipeline.compress_items(
            model, model_hash, comp_model, 0, dataset, run.modality,
            meta_cfg.inner_steps, run.threads,
        )
        result = pipeline.evaluate_bitstream(
            blob, model, model_hash, comp_model, 0, dataset, run.modality,
            sample_rate=run.sample_rate, occupancy=run.occupancy,
        )
        rows.append({
            "dataset": args.dataset_name,
            "lambda": lam,
            "rate": result["rate"],
            "rate_unit": result["rate_unit"],
            "psnr_db": result["psnr_db"],
            "items": result["items"],
        })
    if args.overlay:
        for ref in metrics.reference_points(args.overlay):
            rows.append({
                "dataset": ref["dataset"],
                "lambda": "",
                "rate": ref["rate"],
                "rate_unit": ref["rate_unit"],
                "psnr_db": ref["psnr_db"],
                "items": 0,
            })
    metrics.write_rd_csv(args.output, rows)
    print(json.dumps({"csv": str(args.output), "rows": len(rows)}))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fieldcodec",
        description="Meta-learned implicit-representation compression pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, config=True, seed=True, threads=True):
        if config:
            p.add_argument("--config", required=True, help="JSON run config")
        if seed:
            p.add_argument("--seed", type=int, default=None)
        if threads:
            p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("meta-train", help="meta-learn the shared network")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_meta_train)

    p = sub.add_parser("fit", help="adapt latents for new items")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("train-quantizer", help="rate-distortion train the coder")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.set_defaults(fn=cmd_train_quantizer)

    p = sub.add_parser("compress", help="data items -> bitstream")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--quantizer", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_compress)

    p = sub.add_parser("decompress", help="bitstream -> reconstructed items")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--quantizer", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_decompress)

    p = sub.add_parser("eval", help="score a bitstream against originals")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--quantizer", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("rd-curve", help="lambda sweep -> CSV of (rate, psnr)")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--lambdas", required=True, help="comma-separated values")
    p.add_argument("--dataset-name", default="local")
    p.add_argument("--overlay", default=None,
                   help="append published reference points for this dataset")
    p.set_defaults(fn=cmd_rd_curve)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:  # keep exit code 2 reserved for hash mismatches
        return 0 if err.code == 0 else 1
    try:
        return args.fn(args)
    except HashMismatch as err:
        print(
            f"hash mismatch: expected {err.expected:#018x}, found {err.actual:#018x}",
            file=sys.stderr,
        )
        return 2
    except NumericFault as err:
        print(f"numeric fault: {err}", file=sys.stderr)
        return 3
    except (ConfigError, FormatError, DivergenceError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
