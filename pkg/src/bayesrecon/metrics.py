"""Image quality metrics on magnitude images (peak = max |ref|), plus a phase check."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .errors import ShapeError, ValidationError


def _mags(x, ref):
    x = np.abs(np.asarray(x))
    ref = np.abs(np.asarray(ref))
    if x.shape != ref.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {ref.shape}")
    if not np.any(ref):
        raise ValidationError("reference image is all zero")
    return x.astype(np.float64), ref.astype(np.float64)


def rmse_percent(x, ref) -> float:
    x, ref = _mags(x, ref)
    return float(100.0 * np.linalg.norm(x - ref) / np.linalg.norm(ref))


def psnr_db(x, ref) -> float:
    """20 log10(max|ref| / RMS error); +inf for identical magnitudes."""
    x, ref = _mags(x, ref)
    rms = np.sqrt(np.mean((x - ref) ** 2))
    if rms == 0:
        return math.inf
    return float(20.0 * np.log10(ref.max() / rms))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim_percent(x, ref, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows, times 100."""
    x, ref = _mags(x, ref)
    win = gaussian_window()
    if min(x.shape) < win.shape[0]:
        raise ShapeError("image smaller than the 11x11 SSIM window")
    c1 = (k1 * ref.max()) ** 2
    c2 = (k2 * ref.max()) ** 2

    def filt(a):
        return convolve2d(a, win[::-1, ::-1], mode="valid")

    mu_x, mu_r = filt(x), filt(ref)
    sxx = filt(x * x) - mu_x ** 2
    srr = filt(ref * ref) - mu_r ** 2
    sxr = filt(x * ref) - mu_x * mu_r
    num = (2 * mu_x * mu_r + c1) * (2 * sxr + c2)
    den = (mu_x ** 2 + mu_r ** 2 + c1) * (sxx + srr + c2)
    return float(100.0 * np.mean(num / den))


def circular_correlation(a, b) -> float:
    """Circular correlation of two angle samples (radians)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ShapeError("need two equally sized angle samples with at least 2 entries")
    sa = np.sin(a - np.angle(np.mean(np.exp(1j * a))))
    sb = np.sin(b - np.angle(np.mean(np.exp(1j * b))))
    den = np.sqrt(np.sum(sa ** 2) * np.sum(sb ** 2))
    if den == 0:
        raise ValidationError("circular correlation undefined for constant angles")
    return float(np.sum(sa * sb) / den)


def phase_correlation(x, ref, support: float = 0.1) -> float:
    """Circular correlation of the phases of x and ref where |ref| > support * max|ref|."""
    x = np.asarray(x)
    ref = np.asarray(ref)
    if x.shape != ref.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {ref.shape}")
    mask = np.abs(ref) > support * np.abs(ref).max()
    return circular_correlation(np.angle(x[mask]), np.angle(ref[mask]))


METRICS = {"rmse": rmse_percent, "psnr": psnr_db, "ssim": ssim_percent,
           "phase": phase_correlation}


@dataclass
class MetricsReport:
    names: list[str]
    rows: list[dict] = field(default_factory=list)

    def add(self, image_id: str, method: str, x, ref) -> dict:
        row = {"image": image_id, "method": method}
        for name in self.names:
            row[name] = METRICS[name](x, ref)
        self.rows.append(row)
        return row

    def aggregate(self) -> dict:
        """{method: {metric: (mean, std)}} recomputed from the rows."""
        out: dict = {}
        for method in dict.fromkeys(r["method"] for r in self.rows):
            vals = [r for r in self.rows if r["method"] == method]
            out[method] = {}
            for name in self.names:
                v = np.array([r[name] for r in vals], dtype=np.float64)
                out[method][name] = (float(np.mean(v)), float(np.std(v)))
        return out

    def table(self) -> str:
        """Plain-text table in 'mean ± std' form, one row per method."""
        agg = self.aggregate()
        lines = ["method\t" + "\t".join(self.names)]
        for method, stats in agg.items():
            cells = [f"{stats[n][0]:.2f} ± {stats[n][1]:.2f}" for n in self.names]
            lines.append(method + "\t" + "\t".join(cells))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        agg = self.aggregate()
        return {
            "version": 1,
            "metrics": self.names,
            "rows": self.rows,
            "aggregate": {m: {n: {"mean": s[0], "std": s[1]} for n, s in st.items()}
                          for m, st in agg.items()},
            "table": self.table(),
        }
