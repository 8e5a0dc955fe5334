"""AdamW with decoupled weight decay and micro-batched gradient accumulation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .inr import GradientSet

log = logging.getLogger(__name__)


@dataclass
class AdamWState:
    """Moments and step count for one parameter group."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)

    def copy(self) -> "AdamWState":
        return AdamWState(
            self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.step,
            [m.copy() for m in self.exp_avg], [v.copy() for v in self.exp_avg_sq],
        )


def adamw_step(state: AdamWState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], decay: bool = True) -> bool:
    """Update ``params`` in place. Returns False (and leaves everything untouched) on non-finite gradients."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    if not all(np.isfinite(g).all() for g in grads):
        log.warning("non-finite gradient at step %d; update skipped", state.step)
        return False
    if not state.exp_avg:
        state.exp_avg = [np.zeros(p.shape, dtype=np.float64) for p in params]
        state.exp_avg_sq = [np.zeros(p.shape, dtype=np.float64) for p in params]
    elif [m.shape for m in state.exp_avg] != [p.shape for p in params]:
        raise ValueError("optimizer state does not match the parameter shapes")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        g = np.asarray(g, dtype=np.float64)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = p.astype(np.float64)
        if decay and state.weight_decay:
            update *= 1.0 - state.lr * state.weight_decay
        update -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p[...] = update
    return True


@dataclass(frozen=True)
class MicroBatchPlan:
    """Contiguous partition of ``n_items`` indices into chunks of ``batch_size`` (last one shorter)."""

    n_items: int
    batch_size: int

    def __post_init__(self):
        if self.n_items < 1:
            raise ValueError("nothing to process")
        if self.batch_size < 1:
            raise ValueError("micro-batch size must be >= 1")

    def slices(self) -> list[slice]:
        return [slice(i, min(i + self.batch_size, self.n_items)) for i in range(0, self.n_items, self.batch_size)]


@dataclass(frozen=True)
class ExplicitPlan:
    """Partition given by increasing cut points ``0 = b0 < b1 < ... < bk = n``."""

    bounds: tuple[int, ...]

    def __post_init__(self):
        b = self.bounds
        if len(b) < 2 or b[0] != 0 or any(hi <= lo for lo, hi in zip(b, b[1:])):
            raise ValueError("bounds must start at 0 and strictly increase")

    @property
    def n_items(self) -> int:
        return self.bounds[-1]

    def slices(self) -> list[slice]:
        return [slice(lo, hi) for lo, hi in zip(self.bounds, self.bounds[1:])]


class MicroBatchError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"micro-batch {index} failed: {cause}")
        self.index = index


Evaluator = Callable[[slice], tuple[float, GradientSet]]


def accumulate(plan, evaluator: Evaluator) -> tuple[float, GradientSet]:
    """Combine per-chunk mean losses/gradients into the full-batch mean.

    ``evaluator(chunk)`` returns the mean loss and gradient over that chunk;
    each is weighted by its share of the items. Only one chunk's activations
    are alive at a time.
    """
    total_loss = 0.0
    total: GradientSet | None = None
    n = plan.n_items
    for i, chunk in enumerate(plan.slices()):
        try:
            loss, grads = evaluator(chunk)
        except Exception as exc:
            raise MicroBatchError(i, exc) from exc
        w = (chunk.stop - chunk.start) / n
        total_loss += w * loss
        if total is None:
            total = grads.scale_(w)
        else:
            total.add_(grads, w)
    return total_loss, total
