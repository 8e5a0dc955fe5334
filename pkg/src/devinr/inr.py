"""Residual WIRE network with hand-written reverse-mode gradients.

The network maps a spatial coordinate ``x``, a normalized time ``t`` and a
latent code ``l`` to a scalar intensity::

    f = phi_N o psi_{N-1} o ... o psi_2 o phi_1
    phi_i(z) = sin(omega0 * u_i(z)) * exp(-(s0 * v_i(z))**2)
    psi_i(z) = (z + phi_i(z)) / 2

where ``u_i`` and ``v_i`` are affine maps. The first-layer input is the
concatenation ``(x, t, l)`` in that order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

CHECKPOINT_MAGIC = b"INRCKPT1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed or incompatible checkpoint files."""


@dataclass(frozen=True)
class NetworkConfig:
    d: int = 2
    latent_dim: int = 128
    hidden_dim: int = 128
    n_layers: int = 8
    omega0: float = 10.0
    s0: float = 10.0

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"spatial dimension must be 2 or 3, got {self.d}")
        if self.n_layers < 2:
            raise ValueError("need at least two layers")
        if self.latent_dim < 1 or self.hidden_dim < 1:
            raise ValueError("latent and hidden dimensions must be >= 1")
        if not (self.omega0 > 0 and self.s0 > 0):
            raise ValueError("omega0 and s0 must be positive")

    @property
    def in_dim(self) -> int:
        return self.latent_dim + self.d + 1

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) per layer."""
        h = self.hidden_dim
        shapes = [(h, self.in_dim)]
        shapes += [(h, h)] * (self.n_layers - 2)
        shapes.append((1, h))
        return shapes

    def parameter_count(self) -> int:
        return sum(2 * m * (n + 1) for m, n in self.layer_shapes())


@dataclass
class WireLayer:
    """Two parallel affine maps ``u(z) = Uz + b_u`` and ``v(z) = Vz + b_v``."""

    u_weight: np.ndarray
    u_bias: np.ndarray
    v_weight: np.ndarray
    v_bias: np.ndarray

    def __post_init__(self):
        if self.u_weight.shape != self.v_weight.shape:
            raise ValueError("u and v weights must have identical shapes")
        m = self.u_weight.shape[0]
        if self.u_bias.shape != (m,) or self.v_bias.shape != (m,):
            raise ValueError("bias length must match the weight rows")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u_weight.shape

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.u_weight, self.u_bias, self.v_weight, self.v_bias

    def copy(self) -> "WireLayer":
        return WireLayer(*(a.copy() for a in self.arrays()))

    @classmethod
    def zeros_like(cls, other: "WireLayer", dtype=None) -> "WireLayer":
        return cls(*(np.zeros_like(a, dtype=dtype) for a in other.arrays()))


# exp(-87) is the smallest float32 power of e above the subnormal range;
# clamping keeps the Gaussian factor out of slow subnormal arithmetic.
_GAUSS_CLAMP = 87.0


def _wire(u: np.ndarray, v: np.ndarray, omega0: float, s0: float):
    sin_term = np.sin(omega0 * u)
    q = np.square(s0 * v)
    np.minimum(q, _GAUSS_CLAMP, out=q)
    gauss = np.exp(-q, out=q)
    return sin_term, gauss


def wire_block(layer: WireLayer, x: np.ndarray, omega0: float, s0: float) -> np.ndarray:
    """Apply ``sin(omega0 u(x)) * exp(-(s0 v(x))^2)`` to one vector or a batch of rows."""
    x = np.asarray(x)
    if x.shape[-1] != layer.shape[1]:
        raise ValueError(f"expected input width {layer.shape[1]}, got {x.shape[-1]}")
    u = x @ layer.u_weight.T + layer.u_bias
    v = x @ layer.v_weight.T + layer.v_bias
    s, g = _wire(u, v, omega0, s0)
    return s * g


def residual_block(layer: WireLayer, x: np.ndarray, omega0: float, s0: float) -> np.ndarray:
    m, n = layer.shape
    if m != n:
        raise ValueError(f"residual block needs a square layer, got {m}x{n}")
    return 0.5 * (x + wire_block(layer, x, omega0, s0))


@dataclass
class GradientSet:
    """Gradients mirroring the network layers, plus the gradient for the latent input."""

    layers: list[WireLayer]
    latent: np.ndarray

    @classmethod
    def zeros(cls, net: "InrNetwork", dtype=np.float64) -> "GradientSet":
        return cls(
            [WireLayer.zeros_like(layer, dtype=dtype) for layer in net.layers],
            np.zeros(net.config.latent_dim, dtype=dtype),
        )

    def arrays(self) -> Iterator[np.ndarray]:
        for layer in self.layers:
            yield from layer.arrays()

    def add_(self, other: "GradientSet", weight: float = 1.0) -> "GradientSet":
        for a, b in zip(self.arrays(), other.arrays()):
            a += weight * b
        self.latent += weight * other.latent
        return self

    def scale_(self, factor: float) -> "GradientSet":
        for a in self.arrays():
            a *= factor
        self.latent *= factor
        return self

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays()) and bool(np.isfinite(self.latent).all())


@dataclass
class InrNetwork:
    config: NetworkConfig
    layers: list[WireLayer] = field(default_factory=list)

    def __post_init__(self):
        shapes = self.config.layer_shapes()
        if len(self.layers) != len(shapes):
            raise ValueError(f"expected {len(shapes)} layers, got {len(self.layers)}")
        for i, (layer, shape) in enumerate(zip(self.layers, shapes)):
            if layer.shape != shape:
                raise ValueError(f"layer {i + 1} has shape {layer.shape}, expected {shape}")

    @property
    def dtype(self):
        return self.layers[0].u_weight.dtype

    def parameters(self) -> Iterator[np.ndarray]:
        """Parameter arrays in serialization order."""
        for layer in self.layers:
            yield from layer.arrays()

    def parameter_count(self) -> int:
        return sum(a.size for a in self.parameters())

    def copy(self) -> "InrNetwork":
        return InrNetwork(self.config, [layer.copy() for layer in self.layers])

    def astype(self, dtype) -> "InrNetwork":
        return InrNetwork(
            self.config,
            [WireLayer(*(a.astype(dtype) for a in layer.arrays())) for layer in self.layers],
        )

    def _inputs(self, coords: np.ndarray, t) -> np.ndarray:
        coords = np.asarray(coords, dtype=self.dtype)
        if coords.ndim == 1:
            coords = coords[None, :]
        if coords.shape[1] != self.config.d:
            raise ValueError(f"coordinates must have {self.config.d} columns")
        t_col = np.broadcast_to(np.asarray(t, dtype=self.dtype).reshape(-1, 1), (coords.shape[0], 1))
        xt = np.concatenate([coords, t_col], axis=1)
        if not np.isfinite(xt).all():
            raise ValueError("non-finite coordinate or time input")
        return xt

    def _check_latent(self, latent) -> np.ndarray:
        latent = np.asarray(latent, dtype=self.dtype)
        if latent.shape != (self.config.latent_dim,):
            raise ValueError(f"latent must have length {self.config.latent_dim}, got {latent.shape}")
        if not np.isfinite(latent).all():
            raise ValueError("non-finite latent")
        return latent

    def _first_preacts(self, xt: np.ndarray, latent: np.ndarray):
        # the latent is shared by the batch, so its contribution is one vector
        first = self.layers[0]
        k = self.config.d + 1
        u = xt @ first.u_weight[:, :k].T + (first.u_weight[:, k:] @ latent + first.u_bias)
        v = xt @ first.v_weight[:, :k].T + (first.v_weight[:, k:] @ latent + first.v_bias)
        return u, v

    def forward_batch(self, coords: np.ndarray, t, latent) -> np.ndarray:
        """Evaluate the network for a batch of coordinates sharing one latent.

        ``t`` is a scalar or one value per coordinate. Returns a 1-D array in
        the network dtype. Arithmetic runs in float64 and is rounded once at
        the output, so results do not depend on how a grid is split into
        batches.
        """
        cfg = self.config
        xt = self._inputs(coords, t).astype(np.float64)
        latent = self._check_latent(latent).astype(np.float64)
        net = self if self.dtype == np.float64 else self.astype(np.float64)
        u, v = net._first_preacts(xt, latent)
        s, g = _wire(u, v, cfg.omega0, cfg.s0)
        z = s * g
        for layer in net.layers[1:-1]:
            z = residual_block(layer, z, cfg.omega0, cfg.s0)
        return wire_block(net.layers[-1], z, cfg.omega0, cfg.s0)[:, 0].astype(self.dtype)

    def forward(self, x, t: float, latent) -> float:
        """Single-point evaluation ``f(x, t, l)``."""
        return float(self.forward_batch(np.asarray(x)[None, :], t, latent)[0])


def init_network(config: NetworkConfig, seed: int | np.random.Generator, dtype=np.float32) -> InrNetwork:
    """Uniform weights in ``[-1/sqrt(n), 1/sqrt(n)]``, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for m, n in config.layer_shapes():
        bound = 1.0 / np.sqrt(n)
        layers.append(
            WireLayer(
                rng.uniform(-bound, bound, size=(m, n)).astype(dtype),
                np.zeros(m, dtype=dtype),
                rng.uniform(-bound, bound, size=(m, n)).astype(dtype),
                np.zeros(m, dtype=dtype),
            )
        )
    return InrNetwork(config, layers)


def forward_backward(
    net: InrNetwork,
    coords: np.ndarray,
    targets: np.ndarray,
    t,
    latent,
    *,
    param_grads: bool = True,
) -> tuple[float, GradientSet]:
    """Mean squared error over the batch and its exact gradients.

    Gradients are returned in float64. With ``param_grads=False`` only the
    latent gradient is computed; layer gradients stay zero.
    """
    cfg = net.config
    targets = np.asarray(targets, dtype=net.dtype).reshape(-1)
    xt = net._inputs(coords, t)
    latent = net._check_latent(latent)
    batch = xt.shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    if targets.shape[0] != batch:
        raise ValueError("targets and coordinates differ in length")

    w0, s0 = cfg.omega0, cfg.s0
    # forward, keeping what the backward pass needs
    cache = []
    u, v = net._first_preacts(xt, latent)
    s, g = _wire(u, v, w0, s0)
    z_in = None
    z = s * g
    cache.append((z_in, u, v, s, g))
    for layer in net.layers[1:]:
        z_in = z
        u = z_in @ layer.u_weight.T + layer.u_bias
        v = z_in @ layer.v_weight.T + layer.v_bias
        s, g = _wire(u, v, w0, s0)
        phi = s * g
        cache.append((z_in, u, v, s, g))
        z = 0.5 * (z_in + phi)
    out = phi[:, 0]

    resid = (out - targets).astype(np.float64)
    loss = float(np.dot(resid, resid) / batch)

    grads = GradientSet.zeros(net)
    dz = (2.0 / batch * resid).astype(net.dtype)[:, None]
    n_layers = len(net.layers)
    for i in range(n_layers - 1, -1, -1):
        layer = net.layers[i]
        z_in, u, v, s, g = cache[i]
        is_residual = 0 < i < n_layers - 1
        dphi = 0.5 * dz if is_residual else dz
        du = dphi * (w0 * np.cos(w0 * u) * g)
        dv = dphi * (s * g * (-2.0 * s0 * s0) * v)
        gl = grads.layers[i]
        if i == 0:
            k = cfg.d + 1
            du_sum = du.sum(axis=0, dtype=np.float64)
            dv_sum = dv.sum(axis=0, dtype=np.float64)
            if param_grads:
                xt64 = xt.astype(np.float64)
                gl.u_weight[:, :k] = du.T.astype(np.float64) @ xt64
                gl.v_weight[:, :k] = dv.T.astype(np.float64) @ xt64
                lat64 = latent.astype(np.float64)
                gl.u_weight[:, k:] = np.outer(du_sum, lat64)
                gl.v_weight[:, k:] = np.outer(dv_sum, lat64)
                gl.u_bias[:] = du_sum
                gl.v_bias[:] = dv_sum
            grads.latent[:] = (
                layer.u_weight[:, k:].T.astype(np.float64) @ du_sum
                + layer.v_weight[:, k:].T.astype(np.float64) @ dv_sum
            )
            break
        if param_grads:
            gl.u_weight[:] = du.T.astype(np.float64) @ z_in.astype(np.float64)
            gl.v_weight[:] = dv.T.astype(np.float64) @ z_in.astype(np.float64)
            gl.u_bias[:] = du.sum(axis=0, dtype=np.float64)
            gl.v_bias[:] = dv.sum(axis=0, dtype=np.float64)
        dz_in = du @ layer.u_weight + dv @ layer.v_weight
        if is_residual:
            dz_in += 0.5 * dz
        dz = dz_in
    return loss, grads
