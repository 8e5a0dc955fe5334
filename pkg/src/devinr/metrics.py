"""Image similarity scores, circumference measurement and HC statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull
from skimage import measure

from .volume import VolumeImage


class MeasurementError(ValueError):
    pass


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = a.data if isinstance(a, VolumeImage) else np.asarray(a)
    b = b.data if isinstance(b, VolumeImage) else np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio over every voxel; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


SSIM_WIN = 11
SSIM_SIGMA = 1.5


def ssim(a, b, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with an 11-tap Gaussian window (sigma 1.5) on every axis.

    Local statistics use the Gaussian weights directly (no sample-covariance
    correction); the mean excludes a half-window border.
    """
    a, b = _pair(a, b)
    if min(a.shape) < SSIM_WIN:
        raise ValueError(f"image smaller than the {SSIM_WIN}-voxel SSIM window")
    radius = (SSIM_WIN - 1) // 2
    filt = dict(sigma=SSIM_SIGMA, truncate=radius / SSIM_SIGMA, mode="reflect")
    mu_a = ndimage.gaussian_filter(a, **filt)
    mu_b = ndimage.gaussian_filter(b, **filt)
    var_a = ndimage.gaussian_filter(a * a, **filt) - mu_a**2
    var_b = ndimage.gaussian_filter(b * b, **filt) - mu_b**2
    cov = ndimage.gaussian_filter(a * b, **filt) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    crop = tuple(slice(radius, n - radius) for n in a.shape)
    return float(smap[crop].mean())


def prediction_mask(img: VolumeImage, threshold: float = 0.05) -> np.ndarray:
    """Foreground of a predicted image: voxels above ``threshold``, largest connected component."""
    raw = img.data > threshold
    labels, n = ndimage.label(raw)
    if n == 0:
        return raw
    sizes = ndimage.sum_labels(raw, labels, index=np.arange(1, n + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def select_axial_slice(mask: np.ndarray) -> np.ndarray:
    """The 2D mask itself, or the axial slice with the largest anterior-posterior extent."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MeasurementError("empty foreground mask")
    if mask.ndim == 2:
        return mask
    best, best_key = None, None
    for k in range(mask.shape[2]):
        sl = mask[:, :, k]
        if not sl.any():
            continue
        ap = np.flatnonzero(sl.any(axis=0))
        key = (ap[-1] - ap[0] + 1, int(sl.sum()))
        if best_key is None or key > best_key:
            best, best_key = sl, key
    return best


def _boundary_points(sl: np.ndarray, spacing, smoothing: float) -> np.ndarray:
    """Sub-voxel boundary points (cm) from the 0.5 iso-line of the Gaussian-smoothed mask."""
    padded = np.pad(sl.astype(np.float64), 2)
    if smoothing > 0:
        padded = ndimage.gaussian_filter(padded, smoothing, mode="constant")
    contours = measure.find_contours(padded, 0.5)
    if not contours:
        raise MeasurementError("mask has no boundary")
    pts = np.concatenate(contours) - 2.0
    return pts * np.asarray(spacing[:2])


def _hull_perimeter(pts: np.ndarray) -> float:
    if len(np.unique(pts, axis=0)) < 3:
        raise MeasurementError("degenerate mask: fewer than three distinct boundary points")
    try:
        hull = ConvexHull(pts)
    except Exception as exc:  # qhull raises on collinear input
        raise MeasurementError(f"degenerate mask: {exc}") from exc
    return float(hull.area)


def measure_bc(mask: np.ndarray, spacing, smoothing: float = 0.9, method: str = "contour") -> float:
    """Tape-measure brain circumference (cm): perimeter of the convex hull of the axial outline.

    ``method="contour"`` hulls the sub-voxel outline of the slightly smoothed
    mask; ``method="centers"`` hulls the foreground voxel centers.
    """
    sl = select_axial_slice(mask)
    if sl.sum() < 2:
        raise MeasurementError("degenerate mask: a single voxel has no circumference")
    if method == "centers":
        pts = np.argwhere(sl).astype(np.float64) * np.asarray(spacing[:2])
    elif method == "contour":
        pts = _boundary_points(sl, spacing, smoothing)
    else:
        raise ValueError(f"unknown method {method!r}")
    return _hull_perimeter(pts)


def boundary_length(mask: np.ndarray, spacing, smoothing: float = 0.9) -> float:
    """Arc length (cm) of the smoothed outline, concavities included."""
    sl = select_axial_slice(mask)
    padded = np.pad(sl.astype(np.float64), 2)
    if smoothing > 0:
        padded = ndimage.gaussian_filter(padded, smoothing, mode="constant")
    total = 0.0
    scale = np.asarray(spacing[:2])
    for c in measure.find_contours(padded, 0.5):
        total += float(np.sum(np.linalg.norm(np.diff(c * scale, axis=0), axis=1)))
    return total


def ellipse_circumference(a: float, b: float) -> float:
    """Ramanujan's approximation; exact for circles."""
    if not (a > 0 and b > 0):
        raise MeasurementError(f"degenerate ellipse with semi-axes {a}, {b}")
    return math.pi * (3 * (a + b) - math.sqrt((3 * a + b) * (a + 3 * b)))


def measure_bc_ellipse(mask: np.ndarray, spacing) -> float:
    """Circumference of the ellipse spanned by the occipitofrontal and biparietal diameters."""
    sl = select_axial_slice(mask)
    lr = np.flatnonzero(sl.any(axis=1))
    ap = np.flatnonzero(sl.any(axis=0))
    a = 0.5 * (ap[-1] - ap[0] + 1) * spacing[1]
    b = 0.5 * (lr[-1] - lr[0] + 1) * spacing[0]
    return ellipse_circumference(a, b)


@dataclass
class RegressionModel:
    slope: float
    intercept: float
    r: float
    sigma: float

    def predict(self, bc):
        return self.slope * np.asarray(bc, dtype=np.float64) + self.intercept


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
    if denom == 0.0:
        return math.nan
    return float(np.clip(np.dot(xc, yc) / denom, -1.0, 1.0))


def fit_regression(bc, hc) -> RegressionModel:
    """Least-squares ``hc = slope * bc + intercept``; sigma is the sample std of the residuals."""
    bc = np.asarray(bc, dtype=np.float64)
    hc = np.asarray(hc, dtype=np.float64)
    if bc.shape != hc.shape or bc.size < 3:
        raise ValueError("need at least three (bc, hc) pairs")
    xc = bc - bc.mean()
    sxx = float(np.dot(xc, xc))
    if sxx <= 1e-12 * max(1.0, float(np.dot(bc, bc))):
        raise ValueError("degenerate regression: brain circumferences have no spread")
    slope = float(np.dot(xc, hc - hc.mean()) / sxx)
    intercept = float(hc.mean() - slope * bc.mean())
    resid = hc - (slope * bc + intercept)
    return RegressionModel(slope, intercept, pearson(bc, hc), float(np.std(resid, ddof=1)))


@dataclass
class EvalRecord:
    subject_id: str
    scan_id_in: str
    scan_id_target: str
    t1: float
    t2: float
    psnr: float
    ssim: float
    mae: float
    predicted_hc: float = math.nan
    true_hc: float = math.nan


def hc_error_stats(records: list[EvalRecord]) -> tuple[float, float]:
    """(sample std of predicted - true HC, Pearson r of predicted vs true HC)."""
    pairs = [(r.predicted_hc, r.true_hc) for r in records if math.isfinite(r.predicted_hc) and math.isfinite(r.true_hc)]
    if len(pairs) < 2:
        raise ValueError("need at least two records with predicted and true HC")
    pred, true = np.array(pairs).T
    return float(np.std(pred - true, ddof=1)), pearson(pred, true)


def summarize(records: list[EvalRecord]) -> dict[str, tuple[float, float]]:
    """Mean and sample std of PSNR, SSIM and MAE."""
    out = {}
    for name in ("psnr", "ssim", "mae"):
        vals = np.array([getattr(r, name) for r in records], dtype=np.float64)
        out[name] = (float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0)
    return out


def write_report(records: list[EvalRecord], path) -> None:
    """One row per record, then a ``mean±std`` summary row (HC columns hold sigma and r)."""
    if not records:
        raise ValueError("no records to report")
    names = [f.name for f in fields(EvalRecord)]
    summary = summarize(records)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for r in records:
            writer.writerow([getattr(r, n) if isinstance(getattr(r, n), str) else repr(float(getattr(r, n))) for n in names])
        try:
            sigma, r = hc_error_stats(records)
            hc_cells = [f"sigma={sigma:.4f}", f"r={r:.4f}"]
        except ValueError:
            hc_cells = ["", ""]
        row = ["summary", "", "", "", ""]
        row += [f"{summary[n][0]:.4f}±{summary[n][1]:.4f}" for n in ("psnr", "ssim", "mae")]
        writer.writerow(row + hc_cells)
