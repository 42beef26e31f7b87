"""Rate and distortion quantities, plus the published reference points."""

import csv
import importlib.resources
import math

import numpy as np

PSNR_CAP_DB = 100.0

RD_CSV_COLUMNS = ("dataset", "lambda", "rate", "rate_unit", "psnr_db", "items")


def psnr(mse):
    """Peak signal-to-noise ratio -10*log10(MSE); +inf for a perfect match."""
    if mse < 0:
        raise ValueError(f"mse must be non-negative, got {mse}")
    if mse == 0:
        return math.inf
    return -10.0 * math.log10(mse)


def bpp(total_bits, num_pixels):
    if num_pixels <= 0:
        raise ValueError("num_pixels must be positive")
    return total_bits / num_pixels


def kbps(total_bits, seconds):
    if seconds <= 0:
        raise ValueError("seconds must be positive")
    return total_bits / seconds / 1000.0


def voxel_accuracy(pred, target, threshold=0.5):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred > threshold) == (target > 0.5)))


def write_rd_csv(path, rows):
    """Rows are dicts with the RD_CSV_COLUMNS keys; psnr is capped for CSV."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=RD_CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            row = dict(row)
            row["psnr_db"] = min(float(row["psnr_db"]), PSNR_CAP_DB)
            writer.writerow(row)


def reference_points(dataset=None):
    """Published rate/quality reference points shipped with the package.

    Intended for plotting overlays next to locally measured curves; not
    reproduction targets.
    """
    ref = importlib.resources.files("fieldcodec").joinpath("data/reference_rd.csv")
    with ref.open("r", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        row["rate"] = float(row["rate"])
        row["psnr_db"] = float(row["psnr_db"])
    if dataset is not None:
        rows = [r for r in rows if r["dataset"] == dataset]
    return rows
