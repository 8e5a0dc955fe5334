"""Image container, normalization conventions and the NDV1 volume format.

Axis convention: axis 0 is left-right, axis 1 is anterior-posterior and (in
3D) axis 2 is inferior-superior, so axial slices are ``data[:, :, k]``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NDV_MAGIC = b"NDVOL1\0"


class VolumeFormatError(ValueError):
    pass


@dataclass
class VolumeImage:
    data: np.ndarray
    spacing: tuple[float, ...]
    background_value: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim not in (2, 3):
            raise ValueError(f"images must be 2D or 3D, got {self.data.ndim} dimensions")
        if len(self.spacing) != self.data.ndim:
            raise ValueError("spacing needs one entry per axis")
        if not all(s > 0 for s in self.spacing):
            raise ValueError("spacing must be strictly positive")
        if not np.isfinite(self.data).all():
            raise ValueError("image contains non-finite values")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def foreground(self) -> np.ndarray:
        """Default mask: voxels brighter than the (zero) background."""
        return self.data > self.background_value


def _check_mask(img: VolumeImage, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape:
        raise ValueError(f"mask shape {mask.shape} does not match image {img.shape}")
    return mask


def percentile(values: np.ndarray, q: float) -> float:
    """Percentile with linear interpolation between sorted samples."""
    return float(np.percentile(values, q, method="linear"))


def normalize_intensity(img: VolumeImage, mask: np.ndarray) -> VolumeImage:
    """Zero the background and map the 1st..99th foreground percentiles onto [0, 1]."""
    mask = _check_mask(img, mask)
    if not mask.any():
        raise ValueError("cannot normalize with an empty foreground mask")
    fg = img.data[mask].astype(np.float64)
    lo, hi = percentile(fg, 1), percentile(fg, 99)
    if hi <= lo:
        raise ValueError(f"degenerate foreground range: 1st and 99th percentile both {lo}")
    out = np.zeros(img.shape, dtype=np.float64)
    out[mask] = np.clip((fg - lo) / (hi - lo), 0.0, 1.0)
    return VolumeImage(out, img.spacing)


def coordinate_of(index, shape) -> np.ndarray:
    """Voxel-center coordinate in [-0.5, 0.5] per axis."""
    index = np.asarray(index)
    shape = np.asarray(shape)
    if index.shape[-1] != shape.shape[0]:
        raise ValueError("index and shape differ in dimension")
    if np.any(index < 0) or np.any(index >= shape):
        raise IndexError(f"index {index.tolist()} outside shape {shape.tolist()}")
    return (index + 0.5) / shape - 0.5


def grid_coordinates(shape) -> np.ndarray:
    """Coordinates of every voxel, row-major (last axis fastest), shape (n_voxels, d)."""
    axes = [(np.arange(n) + 0.5) / n - 0.5 for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def normalize_time(pma_weeks: float) -> float:
    if not pma_weeks > 0:
        raise ValueError(f"postmenstrual age must be positive, got {pma_weeks}")
    return pma_weeks / 100.0


def save_volume(img: VolumeImage, path) -> None:
    data = np.ascontiguousarray(img.data, dtype="<f4")
    header = NDV_MAGIC + struct.pack("<B", img.ndim)
    header += struct.pack(f"<{img.ndim}I", *img.shape)
    header += struct.pack(f"<{img.ndim}f", *img.spacing)
    Path(path).write_bytes(header + data.tobytes())


def load_volume(path) -> VolumeImage:
    raw = Path(path).read_bytes()
    n_magic = len(NDV_MAGIC)
    if raw[:n_magic] != NDV_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic bytes")
    if len(raw) < n_magic + 1:
        raise VolumeFormatError(f"{path}: truncated header")
    d = raw[n_magic]
    if d not in (2, 3):
        raise VolumeFormatError(f"{path}: dimension count {d} not in {{2, 3}}")
    offset = n_magic + 1
    header_end = offset + 8 * d
    if len(raw) < header_end:
        raise VolumeFormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{d}I", raw, offset)
    spacing = struct.unpack_from(f"<{d}f", raw, offset + 4 * d)
    n_bytes = 4 * int(np.prod(shape))
    payload = raw[header_end:]
    if len(payload) != n_bytes:
        raise VolumeFormatError(f"{path}: expected {n_bytes} data bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return VolumeImage(data, spacing)


MANIFEST_FIELDS = ["subject_id", "scan_id", "pma_weeks", "path", "hc_cm"]


@dataclass(frozen=True)
class ScanRecord:
    subject_id: str
    scan_id: str
    pma_weeks: float
    path: str
    hc_cm: float | None = None

    @property
    def t(self) -> float:
        return normalize_time(self.pma_weeks)


def write_manifest(records: list[ScanRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            hc = "" if r.hc_cm is None else repr(float(r.hc_cm))
            writer.writerow([r.subject_id, r.scan_id, repr(float(r.pma_weeks)), r.path, hc])


def read_manifest(path) -> list[ScanRecord]:
    """Read a manifest; relative volume paths are resolved against its directory."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
        records = []
        for row in reader:
            vol = Path(row["path"])
            if not vol.is_absolute():
                vol = path.parent / vol
            hc = row["hc_cm"].strip()
            records.append(
                ScanRecord(row["subject_id"], row["scan_id"], float(row["pma_weeks"]), str(vol), float(hc) if hc else None)
            )
    return records
