"""Latent inversion with a frozen network, and image prediction at new ages."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .inr import InrNetwork, forward_backward
from .optim import AdamWState, MicroBatchPlan, accumulate, adamw_step
from .rng import derive_rng
from .training import TrainingScan, sample_pixels
from .volume import VolumeImage, grid_coordinates

log = logging.getLogger(__name__)


class InversionError(RuntimeError):
    pass


@dataclass
class InversionConfig:
    steps: int = 2000
    lr: float = 1e-3
    pixel_policy: str = "all"  # "all" or "sampled"
    pixel_fraction: float = 0.05
    fg_bg_ratio: float = 0.9
    micro_batch_size: int = 4096
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.pixel_policy not in ("all", "sampled"):
            raise ValueError(f"unknown pixel policy {self.pixel_policy!r}")
        if self.micro_batch_size < 1:
            raise ValueError("micro_batch_size must be >= 1")

    @classmethod
    def for_dimension(cls, d: int, **overrides) -> "InversionConfig":
        """Defaults: 2000 full-image steps in 2D, 1000 sampled steps in 3D."""
        base = dict(steps=2000, pixel_policy="all") if d == 2 else dict(steps=1000, pixel_policy="sampled")
        base.update(overrides)
        return cls(**base)


@dataclass
class InversionResult:
    latent: np.ndarray
    loss: float
    history: list[float]


def _latent_loss_and_grad(net, coords, targets, t, latent, micro_batch_size):
    n = len(coords)
    if n <= micro_batch_size:
        return forward_backward(net, coords, targets, t, latent, param_grads=False)
    plan = MicroBatchPlan(n, micro_batch_size)
    return accumulate(
        plan,
        lambda s: forward_backward(net, coords[s], targets[s], t, latent, param_grads=False),
    )


def invert_latent(
    net: InrNetwork,
    img: VolumeImage,
    t1: float,
    config: InversionConfig,
    mask: np.ndarray | None = None,
) -> InversionResult:
    """Fit a latent (initialized at zero) so the frozen network reproduces ``img`` at time ``t1``.

    The network is never written to. ``history[k]`` is the loss evaluated
    before update ``k``; ``loss`` is the loss after the final update on the
    full image.
    """
    if not 0 <= t1 <= 1:
        raise ValueError("t1 must lie in [0, 1]")
    latent = np.zeros(net.config.latent_dim, dtype=net.dtype)
    scan = TrainingScan("", "", t1, img, img.foreground() if mask is None else np.asarray(mask, dtype=bool))
    opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    history = []
    for step in range(config.steps):
        if config.pixel_policy == "all":
            coords, targets = scan.coords, scan.values
        else:
            batch = sample_pixels(scan, config.pixel_fraction, config.fg_bg_ratio, derive_rng(config.seed, "inversion_pixels", step))
            coords, targets = batch.coords, batch.targets
        loss, grads = _latent_loss_and_grad(net, coords, targets, t1, latent, config.micro_batch_size)
        if not (math.isfinite(loss) and np.isfinite(grads.latent).all()):
            raise InversionError(f"non-finite loss at inversion step {step} (loss={loss}, |l|={np.linalg.norm(latent):.3g})")
        history.append(loss)
        adamw_step(opt, [latent], [grads.latent], decay=config.weight_decay > 0)
    final = reconstruction_loss(net, scan.coords, scan.values, t1, latent, config.micro_batch_size)
    return InversionResult(latent, final, history)


def reconstruction_loss(net, coords, targets, t, latent, micro_batch_size: int = 4096) -> float:
    pred = _predict_flat(net, coords, t, latent, micro_batch_size)
    resid = pred.astype(np.float64) - np.asarray(targets, dtype=np.float64)
    return float(np.dot(resid, resid) / resid.size)


def _predict_flat(net, coords, t, latent, micro_batch_size):
    out = np.empty(len(coords), dtype=net.dtype)
    for lo in range(0, len(coords), micro_batch_size):
        hi = min(lo + micro_batch_size, len(coords))
        out[lo:hi] = net.forward_batch(coords[lo:hi], t, latent)
    return out


def predict_image(net: InrNetwork, latent, t: float, shape, spacing, micro_batch_size: int = 4096) -> VolumeImage:
    """Evaluate the network at every voxel center; intensities clamped to [0, 1]."""
    if not 0 <= t <= 1:
        raise ValueError("t must lie in [0, 1]")
    if len(shape) != net.config.d:
        raise ValueError(f"network is {net.config.d}D but shape has {len(shape)} axes")
    coords = grid_coordinates(shape).astype(net.dtype)
    flat = _predict_flat(net, coords, t, latent, micro_batch_size)
    return VolumeImage(np.clip(flat, 0.0, 1.0).reshape(shape), spacing)


@dataclass
class DevelopmentPrediction:
    reconstruction: VolumeImage
    prediction: VolumeImage
    latent: np.ndarray
    inversion_loss: float


def predict_development(net: InrNetwork, img: VolumeImage, t1: float, t2: float, config: InversionConfig, mask=None) -> DevelopmentPrediction:
    """Invert at ``t1`` then render at ``t1`` and ``t2`` (``t2`` may precede ``t1``)."""
    res = invert_latent(net, img, t1, config, mask)
    recon = predict_image(net, res.latent, t1, img.shape, img.spacing, config.micro_batch_size)
    if t2 == t1:
        pred = VolumeImage(recon.data.copy(), recon.spacing)
    else:
        pred = predict_image(net, res.latent, t2, img.shape, img.spacing, config.micro_batch_size)
    return DevelopmentPrediction(recon, pred, res.latent, res.loss)


CASE_KEYS = ("subject_id", "scan_id_in", "scan_id_target", "t1", "t2", "inversion_loss")


def case_record_json(subject_id: str, scan_in: str, scan_target: str, t1: float, t2: float, loss: float) -> str:
    """One JSONL line with a fixed key order."""
    rec = dict(zip(CASE_KEYS, (subject_id, scan_in, scan_target, float(t1), float(t2), float(loss))))
    return json.dumps(rec)
