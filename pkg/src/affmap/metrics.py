"""PSNR, SSIM and LR-consistency, plus the versioned metrics CSV row."""
from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .linops import DownsampleOperator, apply_downsample

PSNR_CAP = 99.0
SSIM_WINDOW = 8
METRICS_VERSION = "affmap-metrics/1"


def psnr(yhat, y, peak=1.0):
    yhat, y = np.asarray(yhat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch: {yhat.shape} vs {y.shape}")
    mse = np.mean((yhat - y) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10 * np.log10(peak ** 2 / mse), PSNR_CAP))


def _as_planes(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2:
        raise ValueError("ssim needs at least 2-D images")
    return a.reshape((-1,) + a.shape[-2:])


def ssim(yhat, y, window=SSIM_WINDOW, peak=1.0, k1=0.01, k2=0.03):
    """Mean SSIM over every ``window`` x ``window`` patch (stride 1), averaged over planes.

    Uses uniform windows and population (biased) moments.
    """
    a, b = _as_planes(yhat), _as_planes(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {np.shape(yhat)} vs {np.shape(y)}")
    if min(a.shape[1:]) < window:
        raise ValueError(f"images smaller than the {window}x{window} window")
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    # uniform_filter centres the window; cropping keeps only fully-inside positions
    lo = window // 2
    crop = (slice(None), slice(lo, lo + a.shape[1] - window + 1), slice(lo, lo + a.shape[2] - window + 1))
    size = (1, window, window)

    def local(z):
        return uniform_filter(z, size=size, mode="constant")[crop]

    mu_a, mu_b = local(a), local(b)
    var_a = local(a * a) - mu_a ** 2
    var_b = local(b * b) - mu_b ** 2
    cov = local(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def lr_consistency(x, yhat, op: DownsampleOperator):
    """MSE between the LR input and the downsampled output."""
    return float(np.mean((np.asarray(x) - apply_downsample(op, yhat)) ** 2))


def hr_mse(yhat, y):
    return float(np.mean((np.asarray(yhat) - np.asarray(y)) ** 2))


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    iteration: int
    psnr: float
    ssim: float
    lr_consistency: float
    hr_mse: float

    @classmethod
    def header(cls):
        return [f.name for f in fields(cls)]

    def cells(self):
        return [v if isinstance(v, (str, int)) else f"{v:.10g}" for v in astuple(self)]


def write_metrics_csv(path, rows, extra_meta=None):
    """Write rows under a ``# version`` comment line; the header is fixed by :class:`MetricsRow`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        meta = f"# {METRICS_VERSION} ssim_window={SSIM_WINDOW}x{SSIM_WINDOW} uniform"
        if extra_meta:
            meta += " " + " ".join(f"{k}={v}" for k, v in sorted(extra_meta.items()))
        fh.write(meta + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsRow.header())
        for r in rows:
            w.writerow(r.cells())


def read_metrics_csv(path):
    with Path(path).open() as fh:
        first = fh.readline()
        if not first.startswith(f"# {METRICS_VERSION}"):
            raise ValueError(f"{path}: not a {METRICS_VERSION} file")
        reader = csv.DictReader(fh)
        if reader.fieldnames != MetricsRow.header():
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [MetricsRow(r["run_id"], int(r["iteration"]), *(float(r[k]) for k in MetricsRow.header()[2:]))
                for r in reader]
