"""Joint auto-decoder training of the network and the latent table.

One scan per iteration: draw a scan, sample a fraction of its pixels with a
fixed foreground share, look up its latent (shared per subject when
subject-specific latents are on), optionally swap in the global latent, then
take one AdamW step on the network and on whichever latent was used.

All randomness comes from per-iteration streams ``derive_rng(seed, name, it)``
so a run can be resumed mid-way and reproduce the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inr import GradientSet, InrNetwork, forward_backward
from .optim import AdamWState, MicroBatchPlan, accumulate, adamw_step
from .rng import derive_rng
from .volume import ScanRecord, VolumeImage, grid_coordinates, load_volume

log = logging.getLogger(__name__)

GLOBAL_KEY = "__global__"


class LatentTable:
    """Latent vectors keyed by subject (``per_subject``) or by scan (``per_scan``), plus the global latent."""

    def __init__(self, dim: int, mode: str = "per_subject", dtype=np.float32):
        if mode not in ("per_subject", "per_scan"):
            raise ValueError(f"unknown latent keying mode {mode!r}")
        self.dim = dim
        self.mode = mode
        self.dtype = dtype
        self.entries: dict[str, np.ndarray] = {}
        self.global_latent = np.zeros(dim, dtype=dtype)

    def key_for(self, subject_id: str, scan_id: str) -> str:
        return subject_id if self.mode == "per_subject" else scan_id

    def get(self, key: str) -> np.ndarray:
        if key == GLOBAL_KEY:
            return self.global_latent
        if key not in self.entries:
            self.entries[key] = np.zeros(self.dim, dtype=self.dtype)
        return self.entries[key]

    def resolve(self, subject_id: str, scan_id: str) -> np.ndarray:
        """The (mutable) latent for a scan; created as zeros on first use."""
        return self.get(self.key_for(subject_id, scan_id))

    def __len__(self) -> int:
        return len(self.entries)

    def copy(self) -> "LatentTable":
        out = LatentTable(self.dim, self.mode, self.dtype)
        out.entries = {k: v.copy() for k, v in self.entries.items()}
        out.global_latent = self.global_latent.copy()
        return out


@dataclass
class TrainConfig:
    steps: int = 200_000
    lr: float = 1e-4
    latent_lr: float | None = None
    weight_decay: float = 1e-2
    decay_latents: bool = False
    pixel_fraction: float = 0.05
    fg_bg_ratio: float = 0.9
    sgla_p: float = 0.10
    ssl_enabled: bool = True
    sgla_enabled: bool = True
    seed: int = 0
    micro_batch_size: int = 0

    def __post_init__(self):
        if not 0 < self.pixel_fraction <= 1:
            raise ValueError("pixel_fraction must be in (0, 1]")
        if not 0 <= self.sgla_p <= 1:
            raise ValueError("sgla_p must be in [0, 1]")
        if not 0 <= self.fg_bg_ratio <= 1:
            raise ValueError("fg_bg_ratio must be in [0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.micro_batch_size < 0:
            raise ValueError("micro_batch_size must be >= 0 (0 disables micro-batching)")


@dataclass
class PixelBatch:
    coords: np.ndarray
    targets: np.ndarray
    foreground: np.ndarray
    t: float
    subject_id: str = ""
    scan_id: str = ""

    def __post_init__(self):
        n = len(self.coords)
        if len(self.targets) != n or len(self.foreground) != n:
            raise ValueError("batch arrays differ in length")
        if n and (np.abs(self.coords) > 0.5).any():
            raise ValueError("coordinates outside [-0.5, 0.5]")
        if not 0 <= self.t <= 1:
            raise ValueError("time outside [0, 1]")

    def __len__(self) -> int:
        return len(self.coords)


@dataclass
class TrainingScan:
    """A training image held with its precomputed sampling tables."""

    subject_id: str
    scan_id: str
    t: float
    image: VolumeImage
    mask: np.ndarray
    coords: np.ndarray = field(init=False, repr=False)
    values: np.ndarray = field(init=False, repr=False)
    fg_index: np.ndarray = field(init=False, repr=False)
    bg_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.mask.shape != self.image.shape:
            raise ValueError("mask shape does not match the image")
        self.coords = grid_coordinates(self.image.shape).astype(np.float32)
        self.values = self.image.data.reshape(-1)
        flat = self.mask.reshape(-1)
        self.fg_index = np.flatnonzero(flat)
        self.bg_index = np.flatnonzero(~flat)

    @classmethod
    def from_record(cls, record: ScanRecord) -> "TrainingScan":
        img = load_volume(record.path)
        return cls(record.subject_id, record.scan_id, record.t, img, img.foreground())


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_counts(n_total: int, n_fg: int, n_bg: int, fraction: float, ratio: float) -> tuple[int, int]:
    n = int(math.floor(fraction * n_total))
    if n == 0:
        raise ValueError(f"pixel fraction {fraction} of {n_total} voxels selects nothing")
    take_fg = min(_round_half_up(ratio * n), n_fg)
    take_bg = min(n - take_fg, n_bg)
    take_fg = min(n - take_bg, n_fg)
    if take_fg + take_bg < n:
        raise ValueError("not enough foreground and background voxels for the requested sample")
    return take_fg, take_bg


def sample_pixels(scan: TrainingScan, fraction: float, ratio: float, rng: np.random.Generator) -> PixelBatch:
    """Uniform sampling without replacement inside each of the fg/bg classes."""
    n_fg, n_bg = sample_counts(scan.values.size, scan.fg_index.size, scan.bg_index.size, fraction, ratio)
    fg = rng.choice(scan.fg_index, size=n_fg, replace=False) if n_fg else np.empty(0, dtype=np.int64)
    bg = rng.choice(scan.bg_index, size=n_bg, replace=False) if n_bg else np.empty(0, dtype=np.int64)
    idx = np.concatenate([fg, bg])
    flags = np.zeros(idx.size, dtype=bool)
    flags[:n_fg] = True
    return PixelBatch(scan.coords[idx], scan.values[idx], flags, scan.t, scan.subject_id, scan.scan_id)


def sgla_rng(seed: int, iteration: int) -> np.random.Generator:
    """The stream of the SGLA draw at one iteration, drawn on every iteration whatever ``p`` is."""
    return derive_rng(seed, "sgla", iteration)


def sgla_select(rng: np.random.Generator, p: float, latent: np.ndarray, global_latent: np.ndarray) -> tuple[np.ndarray, bool]:
    """With probability ``p`` hand back the global latent instead of the scan's own."""
    if not 0 <= p <= 1:
        raise ValueError("p must be in [0, 1]")
    use_global = bool(rng.random() < p)
    return (global_latent if use_global else latent), use_global


@dataclass
class LogEntry:
    iteration: int
    loss: float
    latent_key: str
    used_global: bool


@dataclass
class TrainState:
    """Everything needed to continue a run: the network, latents and optimizer moments."""

    net: InrNetwork
    table: LatentTable
    net_opt: AdamWState
    latent_opt: dict[str, AdamWState] = field(default_factory=dict)
    iteration: int = 0


def new_state(net: InrNetwork, table: LatentTable, config: TrainConfig) -> TrainState:
    return TrainState(net, table, AdamWState(lr=config.lr, weight_decay=config.weight_decay))


def batch_loss_and_grads(net: InrNetwork, batch: PixelBatch, latent: np.ndarray, micro_batch_size: int = 0):
    if micro_batch_size <= 0 or len(batch) <= micro_batch_size:
        return forward_backward(net, batch.coords, batch.targets, batch.t, latent)
    plan = MicroBatchPlan(len(batch), micro_batch_size)
    return accumulate(plan, lambda s: forward_backward(net, batch.coords[s], batch.targets[s], batch.t, latent))


def train_step(state: TrainState, scans: list[TrainingScan], config: TrainConfig) -> LogEntry:
    it = state.iteration
    seed = config.seed
    scan = scans[int(derive_rng(seed, "scan", it).integers(len(scans)))]
    batch = sample_pixels(scan, config.pixel_fraction, config.fg_bg_ratio, derive_rng(seed, "pixels", it))
    key = state.table.key_for(scan.subject_id, scan.scan_id)
    own = state.table.get(key)
    p = config.sgla_p if config.sgla_enabled else 0.0
    latent, used_global = sgla_select(sgla_rng(seed, it), p, own, state.table.global_latent)
    if used_global:
        key = GLOBAL_KEY

    loss, grads = batch_loss_and_grads(state.net, batch, latent, config.micro_batch_size)
    state.iteration += 1
    if not (math.isfinite(loss) and grads.is_finite()):
        log.warning("iteration %d: non-finite loss or gradient, step skipped", it)
        return LogEntry(it, loss, key, used_global)

    adamw_step(state.net_opt, list(state.net.parameters()), list(grads.arrays()), decay=True)
    opt = state.latent_opt.get(key)
    if opt is None:
        latent_lr = config.latent_lr if config.latent_lr is not None else config.lr
        opt = state.latent_opt[key] = AdamWState(lr=latent_lr, weight_decay=config.weight_decay)
    adamw_step(opt, [latent], [grads.latent], decay=config.decay_latents)
    return LogEntry(it, loss, key, used_global)


def train(scans: list[TrainingScan], state: TrainState, config: TrainConfig, callback=None) -> list[LogEntry]:
    """Run until ``state.iteration == config.steps``; returns the per-iteration log."""
    if not scans:
        raise ValueError("no training scans")
    if state.table.mode != ("per_subject" if config.ssl_enabled else "per_scan"):
        raise ValueError("latent table keying does not match ssl_enabled")
    entries = []
    while state.iteration < config.steps:
        entry = train_step(state, scans, config)
        entries.append(entry)
        if callback is not None:
            callback(state, entry)
    return entries


def write_training_log(entries: list[LogEntry], path, append: bool = False) -> None:
    new = not append or not Path(path).exists()
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(["iteration", "loss", "latent_key", "used_global"])
        for e in entries:
            writer.writerow([e.iteration, repr(float(e.loss)), e.latent_key, int(e.used_global)])


def save_optimizer(state: TrainState, path) -> None:
    """Optimizer moments and the iteration counter, as a sidecar to the checkpoint."""
    arrays = {"iteration": np.array(state.iteration), "net_step": np.array(state.net_opt.step)}
    for i, (m, v) in enumerate(zip(state.net_opt.exp_avg, state.net_opt.exp_avg_sq)):
        arrays[f"net_m{i}"] = m
        arrays[f"net_v{i}"] = v
    keys = sorted(state.latent_opt)
    arrays["latent_keys"] = np.array(keys, dtype=str)
    for j, key in enumerate(keys):
        opt = state.latent_opt[key]
        arrays[f"lat_step{j}"] = np.array(opt.step)
        if opt.exp_avg:
            arrays[f"lat_m{j}"] = opt.exp_avg[0]
            arrays[f"lat_v{j}"] = opt.exp_avg_sq[0]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_optimizer(state: TrainState, path, config: TrainConfig) -> None:
    with np.load(path) as z:
        state.iteration = int(z["iteration"])
        state.net_opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay, step=int(z["net_step"]))
        n = sum(1 for _ in state.net.parameters())
        if "net_m0" in z:
            state.net_opt.exp_avg = [z[f"net_m{i}"] for i in range(n)]
            state.net_opt.exp_avg_sq = [z[f"net_v{i}"] for i in range(n)]
        latent_lr = config.latent_lr if config.latent_lr is not None else config.lr
        state.latent_opt = {}
        for j, key in enumerate(z["latent_keys"].tolist()):
            opt = AdamWState(lr=latent_lr, weight_decay=config.weight_decay, step=int(z[f"lat_step{j}"]))
            if f"lat_m{j}" in z:
                opt.exp_avg = [z[f"lat_m{j}"]]
                opt.exp_avg_sq = [z[f"lat_v{j}"]]
            state.latent_opt[key] = opt
