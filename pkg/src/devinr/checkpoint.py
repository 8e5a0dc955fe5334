"""INRCKPT1 checkpoint files.

Layout (all little-endian)::

    b"INRCKPT1"             magic
    u32                     format version (1)
    u8 d, u32 latent_dim, u32 hidden_dim, u32 n_layers, f64 omega0, f64 s0
    for each layer: f32 u_weight (row-major), u_bias, v_weight, v_bias
    u8                      latent keying (0 per subject, 1 per scan)
    u32                     number of table entries
    per entry: u32 byte length, UTF-8 key, latent_dim x f32
    latent_dim x f32        global latent

A checkpoint with zero table entries is an inference-only network.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .inr import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, CheckpointError, InrNetwork, NetworkConfig, WireLayer
from .training import LatentTable

_MODES = ("per_subject", "per_scan")


def checkpoint_bytes(net: InrNetwork, table: LatentTable | None = None) -> bytes:
    cfg = net.config
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<BIIIdd", cfg.d, cfg.latent_dim, cfg.hidden_dim, cfg.n_layers, cfg.omega0, cfg.s0),
    ]
    for arr in net.parameters():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if table is None:
        table = LatentTable(cfg.latent_dim)
    if table.dim != cfg.latent_dim:
        raise CheckpointError("latent table dimension does not match the network")
    parts.append(struct.pack("<BI", _MODES.index(table.mode), len(table.entries)))
    for key in sorted(table.entries):
        raw = key.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(np.asarray(table.entries[key], dtype="<f4").tobytes())
    parts.append(np.asarray(table.global_latent, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(net: InrNetwork, table: LatentTable | None, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net, table))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32)


def load_checkpoint(path) -> tuple[InrNetwork, LatentTable]:
    raw = Path(path).read_bytes()
    rd = _Reader(raw, path)
    if rd.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an INRCKPT1 file (bad magic)")
    (version,) = rd.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    d, lam, h, n_layers, omega0, s0 = rd.unpack("<BIIIdd")
    try:
        cfg = NetworkConfig(d=d, latent_dim=lam, hidden_dim=h, n_layers=n_layers, omega0=omega0, s0=s0)
    except ValueError as exc:
        raise CheckpointError(f"{path}: invalid network config: {exc}") from exc
    layers = []
    for m, n in cfg.layer_shapes():
        uw = rd.floats(m * n).reshape(m, n)
        ub = rd.floats(m)
        vw = rd.floats(m * n).reshape(m, n)
        vb = rd.floats(m)
        layers.append(WireLayer(uw, ub, vw, vb))
    net = InrNetwork(cfg, layers)
    mode, n_entries = rd.unpack("<BI")
    if mode >= len(_MODES):
        raise CheckpointError(f"{path}: unknown latent keying {mode}")
    table = LatentTable(lam, _MODES[mode])
    for _ in range(n_entries):
        (klen,) = rd.unpack("<I")
        key = rd.take(klen).decode("utf-8")
        table.entries[key] = rd.floats(lam)
    table.global_latent = rd.floats(lam)
    if rd.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - rd.pos} trailing bytes")
    return net, table


def checkpoint_digest(net: InrNetwork, table: LatentTable | None = None) -> str:
    return hashlib.sha256(checkpoint_bytes(net, table)).hexdigest()
