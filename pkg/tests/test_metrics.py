import csv
import math

import numpy as np
import pytest

from fieldcodec import metrics


def test_psnr_values():
    assert metrics.psnr(1.0) == pytest.approx(0.0)
    assert metrics.psnr(1e-3) == pytest.approx(30.0)
    assert metrics.psnr(0.0) == math.inf


def test_psnr_monotone_in_mse():
    vals = [metrics.psnr(m) for m in (1e-6, 1e-4, 1e-2, 1.0, 4.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_bpp_footnote_formula():
    # 256 latents at 16 bits each over a 32x32 image
    assert metrics.bpp(256 * 16, 32 * 32) == pytest.approx(4.0)


def test_bpp_linear_in_bits():
    assert metrics.bpp(2000, 100) == 2 * metrics.bpp(1000, 100)


def test_kbps_three_second_clip():
    assert metrics.kbps(48000, 3.0) == pytest.approx(16.0)


def test_voxel_accuracy_extremes():
    t = np.array([0.0, 1.0, 1.0, 0.0])
    assert metrics.voxel_accuracy(t, t) == 1.0
    assert metrics.voxel_accuracy(1.0 - t, t) == 0.0


def test_voxel_accuracy_random_half():
    rng = np.random.default_rng(0)
    pred = rng.uniform(size=1_000_000)
    target = (rng.uniform(size=1_000_000) > 0.5).astype(float)
    acc = metrics.voxel_accuracy(pred, target)
    assert abs(acc - 0.5) < 0.002


def test_rd_csv_caps_infinite_psnr(tmp_path):
    p = tmp_path / "rd.csv"
    metrics.write_rd_csv(
        p,
        [
            {
                "dataset": "toy",
                "lambda": 1.0,
                "rate": 0.5,
                "rate_unit": "bpp",
                "psnr_db": math.inf,
                "items": 3,
            }
        ],
    )
    rows = list(csv.DictReader(open(p)))
    assert float(rows[0]["psnr_db"]) == metrics.PSNR_CAP_DB


def test_reference_points_shipped():
    rows = metrics.reference_points("cifar10")
    pairs = {(r["rate"], r["psnr_db"]) for r in rows}
    assert (2.95, 34.96) in pairs
    assert all(r["rate_unit"] == "bpp" for r in rows)
    audio = metrics.reference_points("librispeech")
    assert all(r["rate_unit"] == "kbps" for r in audio)
    assert (16.0, 16.0) not in pairs
