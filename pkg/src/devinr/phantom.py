"""Synthetic longitudinal phantoms with analytic ground truth.

Each subject is a textured ellipse (ellipsoid in 3D) whose semi-axes grow
linearly in normalized time. A fixed per-subject pattern of boundary folds
fades in with age. Everything a subject owns except size and fold amplitude
is constant over time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.spatial import ConvexHull

from .rng import derive_rng
from .volume import ScanRecord, VolumeImage, save_volume, write_manifest

T_MIN = 0.26
T_MAX = 0.45
FOLD_ORDERS = (3, 4, 5, 6, 7)

# uniform sampling ranges (cm, cm per unit normalized time, cycles per cm)
SEMI_AXIS_LR = (1.8, 2.6)
SEMI_AXIS_AP = (2.2, 3.2)
SEMI_AXIS_SI = (1.8, 2.6)
GROWTH_RATE = (3.0, 5.0)
FOLD_COEFF = (0.0, 0.03)
TEXTURE_FREQ = (0.1, 0.3)


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class SubjectParams:
    seed: int
    index: int
    semi_axes: tuple[float, ...]
    growth: tuple[float, ...]
    fold_coeffs: tuple[float, ...]
    fold_phases: tuple[float, ...]
    texture_freq: tuple[float, ...]
    texture_phase: float

    @property
    def d(self) -> int:
        return len(self.semi_axes)

    def axes_at(self, t: float) -> np.ndarray:
        return np.asarray(self.semi_axes) + np.asarray(self.growth) * (t - T_MIN)


def fold_amplitude(t: float) -> float:
    return (t - T_MIN) / (T_MAX - T_MIN)


def generate_subject(master_seed: int, index: int, d: int = 2) -> SubjectParams:
    rng = derive_rng(master_seed, "subject", index)
    ranges = [SEMI_AXIS_LR, SEMI_AXIS_AP, SEMI_AXIS_SI][:d]
    semi = tuple(float(rng.uniform(*r)) for r in ranges)
    growth = tuple(float(g) for g in rng.uniform(*GROWTH_RATE, size=d))
    coeffs = tuple(float(c) for c in rng.uniform(*FOLD_COEFF, size=len(FOLD_ORDERS)))
    phases = tuple(float(p) for p in rng.uniform(0.0, 2 * np.pi, size=len(FOLD_ORDERS)))
    freq = tuple(float(f) for f in rng.uniform(*TEXTURE_FREQ, size=d))
    phase = float(rng.uniform(0.0, 2 * np.pi))
    return SubjectParams(master_seed, index, semi, growth, coeffs, phases, freq, phase)


def _check_time(t: float) -> None:
    if not (T_MIN - 1e-12 <= t <= T_MAX + 1e-12):
        raise PhantomError(f"time {t} outside [{T_MIN}, {T_MAX}]")


def _fold_factor(p: SubjectParams, t: float, theta: np.ndarray) -> np.ndarray:
    amp = fold_amplitude(t)
    f = np.ones_like(theta, dtype=np.float64)
    for k, c, phi in zip(FOLD_ORDERS, p.fold_coeffs, p.fold_phases):
        f += amp * c * np.sin(k * theta + phi)
    return f


def _fold_factor_deriv(p: SubjectParams, t: float, theta: np.ndarray) -> np.ndarray:
    amp = fold_amplitude(t)
    df = np.zeros_like(theta, dtype=np.float64)
    for k, c, phi in zip(FOLD_ORDERS, p.fold_coeffs, p.fold_phases):
        df += amp * c * k * np.cos(k * theta + phi)
    return df


def boundary_radius(p: SubjectParams, t: float, theta) -> np.ndarray:
    """Radius (cm) of the axial boundary curve at polar angle ``theta``.

    ``theta`` is measured from axis 0 towards axis 1.
    """
    theta = np.asarray(theta, dtype=np.float64)
    a, b = p.axes_at(t)[:2]
    ellipse = a * b / np.sqrt((b * np.cos(theta)) ** 2 + (a * np.sin(theta)) ** 2)
    return ellipse * _fold_factor(p, t, theta)


def _radius_deriv(p: SubjectParams, t: float, theta: np.ndarray) -> np.ndarray:
    a, b = p.axes_at(t)[:2]
    c, s = np.cos(theta), np.sin(theta)
    q = (b * c) ** 2 + (a * s) ** 2
    ellipse = a * b / np.sqrt(q)
    d_ellipse = -a * b * (a * a - b * b) * s * c / q**1.5
    return d_ellipse * _fold_factor(p, t, theta) + ellipse * _fold_factor_deriv(p, t, theta)


def true_circumference(p: SubjectParams, t: float) -> float:
    """Arc length (cm) of the axial boundary curve."""
    _check_time(t)

    def speed(theta):
        r = boundary_radius(p, t, theta)
        dr = _radius_deriv(p, t, theta)
        return float(np.sqrt(r * r + dr * dr))

    # split at the fold periods so quad sees smooth pieces
    knots = np.linspace(0.0, 2 * np.pi, 29)
    total = 0.0
    for lo, hi in zip(knots[:-1], knots[1:]):
        val, _ = integrate.quad(speed, lo, hi, epsabs=0.0, epsrel=1e-12, limit=200)
        total += val
    return total


def boundary_points(p: SubjectParams, t: float, n: int = 20000) -> np.ndarray:
    theta = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    r = boundary_radius(p, t, theta)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def true_hull_circumference(p: SubjectParams, t: float) -> float:
    """Perimeter of the convex hull of the boundary curve, i.e. what a tape measure reads."""
    _check_time(t)
    pts = boundary_points(p, t)
    hull = ConvexHull(pts)
    return float(hull.area)  # in 2D scipy reports the perimeter as "area"


def _voxel_positions(shape, spacing) -> list[np.ndarray]:
    return [(np.arange(n) + 0.5 - n / 2) * s for n, s in zip(shape, spacing)]


def render_phantom(p: SubjectParams, t: float, shape, spacing) -> tuple[VolumeImage, np.ndarray]:
    """Render the subject at time ``t``; returns the image and its foreground mask."""
    _check_time(t)
    shape = tuple(int(n) for n in shape)
    spacing = tuple(float(s) for s in spacing)
    if len(shape) != p.d or len(spacing) != p.d:
        raise PhantomError(f"subject is {p.d}D but shape is {len(shape)}D")

    # margin check against the extreme boundary extents
    theta = np.linspace(0.0, 2 * np.pi, 4096, endpoint=False)
    r = boundary_radius(p, t, theta)
    extents = [np.max(np.abs(r * np.cos(theta))), np.max(np.abs(r * np.sin(theta)))]
    if p.d == 3:
        extents.append(p.axes_at(t)[2] * 1.0)
    for axis, ext in enumerate(extents):
        half = shape[axis] * spacing[axis] / 2
        if ext + 2 * spacing[axis] > half:
            raise PhantomError(f"subject does not fit: extent {ext:.2f} cm on axis {axis}, half-width {half:.2f} cm")

    pos = np.meshgrid(*_voxel_positions(shape, spacing), indexing="ij")
    x, y = pos[0], pos[1]
    ang = np.arctan2(y, x)
    fold = _fold_factor(p, t, ang)
    axes = p.axes_at(t)
    level = ((x / axes[0]) ** 2 + (y / axes[1]) ** 2) / fold**2
    if p.d == 3:
        level = level + (pos[2] / axes[2]) ** 2
    mask = level <= 1.0

    arg = 2 * np.pi * sum(f * c for f, c in zip(p.texture_freq, pos)) + p.texture_phase
    texture = np.clip(0.5 + 0.3 * np.sin(arg), 0.05, 0.95)
    data = np.where(mask, texture, 0.0)
    return VolumeImage(data, spacing), mask


@dataclass
class PhantomDatasetConfig:
    n_train_single: int = 72
    n_train_multi: int = 8
    n_val: int = 4
    n_test: int = 16
    shape: tuple[int, ...] = (64, 64)
    spacing: tuple[float, ...] = (0.3, 0.3)
    seed: int = 0
    hc_slope: float = 1.090
    hc_intercept: float = 1.758
    hc_noise_sd: float = 0.3
    min_gap_weeks: float = 4.0

    def __post_init__(self):
        for name in ("n_train_single", "n_train_multi", "n_val", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if len(self.shape) not in (2, 3) or len(self.spacing) != len(self.shape):
            raise ValueError("shape and spacing must both be 2D or both 3D")
        if self.hc_noise_sd < 0:
            raise ValueError("hc_noise_sd must be >= 0")

    @property
    def d(self) -> int:
        return len(self.shape)


PMA_RANGE = (26.0, 45.0)


def _draw_pmas(rng: np.random.Generator, n_scans: int, min_gap: float) -> list[float]:
    if n_scans == 1:
        return [round(float(rng.uniform(*PMA_RANGE)), 2)]
    while True:
        pmas = sorted(round(float(v), 2) for v in rng.uniform(*PMA_RANGE, size=n_scans))
        if all(b - a >= min_gap for a, b in zip(pmas, pmas[1:])):
            return pmas


@dataclass
class PhantomDataset:
    config: PhantomDatasetConfig
    splits: dict[str, list[ScanRecord]] = field(default_factory=dict)
    subjects: dict[str, SubjectParams] = field(default_factory=dict)


def subject_plan(config: PhantomDatasetConfig) -> list[tuple[str, str, int]]:
    """(split, subject_id, n_scans) for every subject, in index order."""
    plan = []
    plan += [("train", 1)] * config.n_train_single
    plan += [("train", 2)] * config.n_train_multi
    plan += [("val", 2)] * config.n_val
    plan += [("test", 2)] * config.n_test
    return [(split, f"sub{idx:04d}", n) for idx, (split, n) in enumerate(plan)]


def generate_dataset(config: PhantomDatasetConfig, out_dir) -> PhantomDataset:
    """Render every scan to NDV1 and write ``{train,val,test}.csv`` plus ``subjects.csv``."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    dataset = PhantomDataset(config, {"train": [], "val": [], "test": []})
    for index, (split, sid, n_scans) in enumerate(subject_plan(config)):
        params = generate_subject(config.seed, index, config.d)
        dataset.subjects[sid] = params
        pmas = _draw_pmas(derive_rng(config.seed, "pma", index), n_scans, config.min_gap_weeks)
        noise_rng = derive_rng(config.seed, "hc_noise", index)
        for k, pma in enumerate(pmas):
            t = pma / 100.0
            img, _ = render_phantom(params, t, config.shape, config.spacing)
            scan_id = f"{sid}_s{k}"
            rel = f"volumes/{scan_id}.ndv"
            save_volume(img, out / rel)
            noise = float(noise_rng.normal(0.0, config.hc_noise_sd)) if config.hc_noise_sd > 0 else 0.0
            hc = config.hc_slope * true_circumference(params, t) + config.hc_intercept + noise
            dataset.splits[split].append(ScanRecord(sid, scan_id, pma, str(out / rel), hc))
    # manifests store paths relative to the dataset directory
    for split, records in dataset.splits.items():
        rel_records = [
            ScanRecord(r.subject_id, r.scan_id, r.pma_weeks, str(Path(r.path).relative_to(out)), r.hc_cm)
            for r in records
        ]
        write_manifest(rel_records, out / f"{split}.csv")
    with open(out / "subjects.csv", "w") as fh:
        fh.write("subject_id,seed,index\n")
        for index, (_, sid, _) in enumerate(subject_plan(config)):
            fh.write(f"{sid},{config.seed},{index}\n")
    return dataset
