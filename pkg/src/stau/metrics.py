"""Frame quality metrics: MSE (two conventions), PSNR and single-scale SSIM."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import correlate

CONVENTIONS = ("per_pixel_mean", "per_frame_sum")

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(pred, target):
    p = np.asarray(pred, np.float64)
    t = np.asarray(target, np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return p, t


def frame_mse(pred, target, convention="per_pixel_mean"):
    """Squared error of one frame on the 0-1 scale.

    per_pixel_mean averages over all values; per_frame_sum sums them (the
    Moving MNIST "MSE/frame" style).
    """
    p, t = _pair(pred, target)
    sq = np.square(p - t)
    if convention == "per_pixel_mean":
        return float(sq.mean())
    if convention == "per_frame_sum":
        return float(sq.sum())
    raise ValueError(f"unknown MSE convention {convention!r}")


def psnr(pred, target, max_val=1.0):
    mse = frame_mse(pred, target)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(x, y, win, c1, c2):
    def filt(a):
        return correlate(a, win, mode="valid", method="direct")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float((num / den).mean())


def ssim(pred, target, data_range=1.0):
    """Mean SSIM over valid 11x11 Gaussian (sigma 1.5) windows, channel-averaged.

    Accepts (H, W) or (C, H, W) frames.
    """
    p, t = _pair(pred, target)
    if p.ndim == 2:
        p, t = p[None], t[None]
    if p.ndim != 3:
        raise ValueError("ssim expects (H, W) or (C, H, W) frames")
    if p.shape[1] < SSIM_WIN or p.shape[2] < SSIM_WIN:
        raise ValueError(f"frames smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    win = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    return float(np.mean([_ssim_channel(a, b, win, c1, c2) for a, b in zip(p, t)]))


@dataclass
class MetricReport:
    """Per-step metrics averaged over sequences, plus aggregates."""

    mse: list = field(default_factory=list)
    mse_sum: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    sequences: int = 0
    label: str = ""

    @property
    def horizon(self):
        return len(self.mse)

    def aggregate(self):
        return {
            "mse": _fmean(self.mse),
            "mse_sum": _fmean(self.mse_sum),
            "psnr": _mean_psnr(self.psnr),
            "ssim": _fmean(self.ssim),
        }

    def to_csv(self):
        buf = io.StringIO()
        buf.write("# mse: per_pixel_mean on 0-1 scale; mse_sum: per_frame_sum on 0-1 scale; "
                  f"psnr max_val 1.0; ssim 11x11 gaussian sigma 1.5; sequences={self.sequences}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "mse", "mse_sum", "psnr", "ssim"])
        for i in range(self.horizon):
            w.writerow([i + 1, _f(self.mse[i]), _f(self.mse_sum[i]), _f(self.psnr[i]), _f(self.ssim[i])])
        agg = self.aggregate()
        w.writerow(["mean", _f(agg["mse"]), _f(agg["mse_sum"]), _f(agg["psnr"]), _f(agg["ssim"])])
        return buf.getvalue()

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def read_report(path):
    """Parse a CSV written by MetricReport.save."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    rep = MetricReport()
    for row in rows:
        if row["step"] == "mean":
            continue
        rep.mse.append(float(row["mse"]))
        rep.mse_sum.append(float(row["mse_sum"]))
        rep.psnr.append(float(row["psnr"]))
        rep.ssim.append(float(row["ssim"]))
    return rep


def _f(v):
    return repr(float(v))


def _fmean(values):
    # fsum is exactly rounded, so the mean does not depend on sample order
    return math.fsum(values) / len(values)


def _mean_psnr(values):
    if any(math.isinf(v) for v in values):
        return math.inf
    return _fmean(values)


def evaluate(pred, target, label=""):
    """Metrics for predicted vs true sequences shaped (B, horizon, C, H, W)."""
    p, t = _pair(pred, target)
    if p.ndim != 5:
        raise ValueError("expected (B, horizon, C, H, W)")
    rep = MetricReport(sequences=p.shape[0], label=label)
    for step in range(p.shape[1]):
        pairs = list(zip(p[:, step], t[:, step]))
        rep.mse.append(_fmean([frame_mse(a, b) for a, b in pairs]))
        rep.mse_sum.append(_fmean([frame_mse(a, b, "per_frame_sum") for a, b in pairs]))
        rep.psnr.append(_mean_psnr([psnr(a, b) for a, b in pairs]))
        rep.ssim.append(_fmean([ssim(a, b) for a, b in pairs]))
    return rep
