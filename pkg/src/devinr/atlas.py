"""Age-indexed "average brain" sequences from the zero or the population-mean latent."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .inr import InrNetwork
from .inversion import predict_image
from .metrics import RegressionModel, measure_bc, prediction_mask
from .training import LatentTable
from .volume import VolumeImage, normalize_time

STRIP_PMAS = (26.0, 29.0, 33.0, 38.0, 44.0)


def curve_pmas(n: int = 20, lo: float = 26.0, hi: float = 45.0) -> list[float]:
    return [float(v) for v in np.linspace(lo, hi, n)]


def average_latent(table: LatentTable) -> np.ndarray:
    """Mean of all table entries (the global latent is not included)."""
    if not table.entries:
        raise ValueError("latent table is empty")
    stack = np.stack([table.entries[k].astype(np.float64) for k in sorted(table.entries)])
    return stack.mean(axis=0).astype(table.dtype)


@dataclass
class GrowthCurve:
    label: str
    pma_weeks: list[float]
    hc_cm: list[float]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.pma_weeks, self.pma_weeks[1:])):
            raise ValueError("PMA samples must be strictly increasing")
        if len(self.pma_weeks) != len(self.hc_cm):
            raise ValueError("one HC value per PMA sample")


def generate_sequence(
    net: InrNetwork,
    latent,
    pma_list,
    shape,
    spacing,
    regression: RegressionModel,
    label: str,
    micro_batch_size: int = 4096,
) -> tuple[list[VolumeImage], GrowthCurve]:
    """Render one image per PMA and measure its HC through the BC regression."""
    pmas = [float(p) for p in pma_list]
    if any(p < 26.0 or p > 45.0 for p in pmas):
        raise ValueError("PMA samples must lie in [26, 45] weeks")
    images, hcs = [], []
    for pma in pmas:
        img = predict_image(net, latent, normalize_time(pma), shape, spacing, micro_batch_size)
        images.append(img)
        bc = measure_bc(prediction_mask(img), spacing)
        hcs.append(float(regression.predict(bc)))
    return images, GrowthCurve(label, pmas, hcs)


def write_curves(curves: list[GrowthCurve], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["pma_weeks", "hc_cm", "label"])
        for c in curves:
            for pma, hc in zip(c.pma_weeks, c.hc_cm):
                writer.writerow([repr(pma), repr(hc), c.label])


def curves_svg(curves: list[GrowthCurve], width: int = 480, height: int = 320) -> str:
    """Minimal line plot of HC against PMA."""
    xs = [p for c in curves for p in c.pma_weeks]
    ys = [h for c in curves for h in c.hc_cm]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 40
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]

    def px(x, y):
        return (pad + (x - x0) / (x1 - x0 or 1) * (width - 2 * pad), height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad))

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    lines.append(f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">PMA (weeks)</text>')
    lines.append(f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})">HC (cm)</text>')
    for i, c in enumerate(curves):
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in (px(x, y) for x, y in zip(c.pma_weeks, c.hc_cm)))
        color = colors[i % len(colors)]
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        lines.append(f'<text x="{pad + 8}" y="{pad + 14 * i}" fill="{color}" font-size="12">{c.label}</text>')
    lines.append("</svg>")
    return "\n".join(lines)
