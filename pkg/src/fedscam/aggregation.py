"""Server-side weighting rules for the baseline aggregators.

Every rule returns a probability vector over clients (ordered by client id).
The loss-driven rules are written so that their degenerate settings (q=0,
equal losses) reproduce FedAvg's sample-count weights bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError

KINDS = ("fedavg", "uniform", "fedavgm", "qfedavg", "fedlw", "fednolowe")
QFEDAVG_EPS = 1e-10
NOLOWE_FLOOR = 0.5


def normalize(raw: np.ndarray) -> np.ndarray:
    total = raw.sum()
    if not total > 0:
        raise ContractError("cannot normalize weights with a non-positive total")
    return raw / total


def _counts(sizes: Sequence[int]) -> np.ndarray:
    n = np.asarray(sizes, dtype=np.float64)
    if n.ndim != 1 or n.size == 0:
        raise ContractError("need at least one client")
    return n


def fedavg_weights(sizes: Sequence[int]) -> np.ndarray:
    return normalize(_counts(sizes))


def uniform_weights(count: int) -> np.ndarray:
    if count < 1:
        raise ContractError("need at least one client")
    return np.full(count, 1.0 / count)


def qfedavg_weights(sizes: Sequence[int], losses: Sequence[float], q: float) -> np.ndarray:
    """Sample count times (loss + 1e-10)**q: emphasises clients that are doing badly."""
    n = _counts(sizes)
    loss = np.asarray(losses, dtype=np.float64)
    if np.any(loss < 0):
        raise ContractError("losses must be non-negative")
    return normalize(n * np.power(loss + QFEDAVG_EPS, q))


def fedlw_weights(sizes: Sequence[int], losses: Sequence[float],
                  temperature: float = 1.0) -> np.ndarray:
    """Softmin over losses, scaled by sample count."""
    if not temperature > 0:
        raise ContractError("temperature must be positive")
    n = _counts(sizes)
    loss = np.asarray(losses, dtype=np.float64)
    # shifting by the minimum loss cancels in the normalisation and avoids underflow
    return normalize(n * np.exp(-(loss - loss.min()) / temperature))


def fednolowe_weights(sizes: Sequence[int], losses: Sequence[float]) -> np.ndarray:
    n = _counts(sizes)
    loss = np.asarray(losses, dtype=np.float64)
    spread = loss.max() - loss.min()
    scaled = (loss - loss.min()) / spread if spread > 0 else np.zeros_like(loss)
    return normalize(n * (1.0 - scaled + NOLOWE_FLOOR))


def weighted_delta(deltas: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """sum_i w_i * delta_i, accumulated in float64 in client-id order."""
    if len(deltas) != len(weights):
        raise ContractError("one weight per delta is required")
    step = np.zeros(np.shape(deltas[0]), dtype=np.float64)
    for w, d in zip(weights, deltas):
        step += w * np.asarray(d, dtype=np.float64)
    return step


def apply_step(w_t: np.ndarray, step: np.ndarray) -> np.ndarray:
    return (np.asarray(w_t, dtype=np.float64) + step).astype(w_t.dtype)


@dataclass
class AggregatorState:
    kind: str = "fedavg"
    server_momentum: float = 0.9
    q: float = 1.0
    lw_temperature: float = 1.0
    momentum_buffer: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown aggregator {self.kind!r}")
        if not 0 <= self.server_momentum < 1:
            raise ContractError("server_momentum must lie in [0, 1)")
        if self.q < 0:
            raise ContractError("q must be non-negative")
        if not self.lw_temperature > 0:
            raise ContractError("lw_temperature must be positive")

    def weights(self, sizes: Sequence[int], losses: Sequence[float]) -> np.ndarray:
        if self.kind in ("fedavg", "fedavgm"):
            return fedavg_weights(sizes)
        if self.kind == "uniform":
            return uniform_weights(len(sizes))
        if self.kind == "qfedavg":
            return qfedavg_weights(sizes, losses, self.q)
        if self.kind == "fedlw":
            return fedlw_weights(sizes, losses, self.lw_temperature)
        return fednolowe_weights(sizes, losses)


def fedavgm_apply(w_t: np.ndarray, step: np.ndarray,
                  state: AggregatorState) -> tuple[np.ndarray, AggregatorState]:
    """buffer <- m * buffer + step; w <- w + buffer. Returns a new state."""
    if not 0 <= state.server_momentum < 1:
        raise ContractError("server_momentum must lie in [0, 1)")
    prev = state.momentum_buffer
    if prev is None:
        prev = np.zeros_like(step, dtype=np.float64)
    buffer = state.server_momentum * prev + step
    new_state = AggregatorState(
        kind=state.kind,
        server_momentum=state.server_momentum,
        q=state.q,
        lw_temperature=state.lw_temperature,
        momentum_buffer=buffer,
    )
    return apply_step(w_t, buffer), new_state


def aggregate(w_t: np.ndarray, deltas: Sequence[np.ndarray], weights: np.ndarray,
              state: AggregatorState) -> tuple[np.ndarray, AggregatorState]:
    step = weighted_delta(deltas, weights)
    if state.kind == "fedavgm":
        return fedavgm_apply(w_t, step, state)
    return apply_step(w_t, step), state
