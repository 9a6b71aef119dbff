"""Client-side update rules: SGD, proximal SGD, SAM and two cheaper SAM variants.

Each step takes an ``objective(params) -> (loss, grad)`` callable; use
:func:`batch_objective` to bind the MLP loss to one minibatch. Parameters are
stored as float32 but every update is computed in float64 and cast back once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .model import Batch, ModelSpec, loss_and_grad

GRAD_EPS = 1e-12
KINDS = ("sgd", "prox", "sam", "lesam", "wmsam")

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.01
    rho: float = 0.0
    mu: float = 0.0
    perturb_momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ContractError("lr must be positive")
        if self.rho < 0 or self.mu < 0:
            raise ContractError("rho and mu must be non-negative")
        if not 0 <= self.perturb_momentum < 1:
            raise ContractError("perturb_momentum must lie in [0, 1)")


@dataclass
class LocalReport:
    delta: np.ndarray
    mean_train_loss: float
    final_train_loss: float
    rho_used: float
    steps: int
    h: float = 0.0


def batch_objective(spec: ModelSpec, batch: Batch) -> Objective:
    return lambda w: loss_and_grad(spec, w, batch)


def _f64(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)


def unit_scaled(direction: np.ndarray, radius: float) -> np.ndarray:
    """radius * direction / ||direction||, or zeros if the direction is degenerate."""
    d = _f64(direction)
    norm = float(np.linalg.norm(d))
    if norm < GRAD_EPS:
        return np.zeros_like(d)
    return d * (radius / norm)


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return (_f64(params) - lr * _f64(grad)).astype(params.dtype)


def plain_step(objective: Objective, params: np.ndarray, lr: float) -> tuple[np.ndarray, float]:
    loss, g = objective(_f64(params))
    return sgd_step(params, g, lr), loss


def sam_step(objective: Objective, params: np.ndarray, lr: float,
             rho: float) -> tuple[np.ndarray, float]:
    """Ascend to params + rho * g/||g||, descend with the gradient found there."""
    w = _f64(params)
    loss, g1 = objective(w)
    eps = unit_scaled(g1, rho)
    _, g2 = objective(w + eps)
    return sgd_step(params, g2, lr), loss


def prox_step(objective: Objective, params: np.ndarray, anchor: np.ndarray, lr: float,
              mu: float) -> tuple[np.ndarray, float]:
    if anchor.shape != params.shape:
        raise ContractError("proximal anchor and params differ in length")
    w = _f64(params)
    loss, g = objective(w)
    return sgd_step(params, _f64(g) + mu * (w - _f64(anchor)), lr), loss


def lesam_step(objective: Objective, params: np.ndarray, lr: float, rho: float,
               global_dir: np.ndarray) -> tuple[np.ndarray, float]:
    """One gradient per step: perturb along a fixed server-supplied direction."""
    w = _f64(params)
    loss, g = objective(w + unit_scaled(global_dir, rho))
    return sgd_step(params, g, lr), loss


def wmsam_step(objective: Objective, params: np.ndarray, lr: float, rho: float,
               state: np.ndarray, momentum: float) -> tuple[np.ndarray, np.ndarray, float]:
    """SAM whose ascent direction is an exponential average of past gradients."""
    if not 0 <= momentum < 1:
        raise ContractError("momentum must lie in [0, 1)")
    w = _f64(params)
    loss, g1 = objective(w)
    new_state = momentum * _f64(state) + (1.0 - momentum) * _f64(g1)
    _, g2 = objective(w + unit_scaled(new_state, rho))
    return sgd_step(params, g2, lr), new_state, loss


def local_train(spec: ModelSpec, w_t: np.ndarray, epoch_batches: Sequence[Sequence[Batch]],
                cfg: OptimizerConfig, global_dir: np.ndarray | None = None) -> LocalReport:
    """Run ``cfg.kind`` over the given per-epoch batch lists starting from ``w_t``.

    ``global_dir`` is the previous global step, used only by ``lesam``.
    """
    if len(epoch_batches) < 1:
        raise ContractError("local_train needs at least one epoch")
    w = np.array(w_t, copy=True)
    if cfg.kind == "lesam":
        direction = np.zeros(w.shape) if global_dir is None else _f64(global_dir)
    state = np.zeros(w.shape, dtype=np.float64)
    epoch_means = []
    all_losses = []
    steps = 0
    for batches in epoch_batches:
        losses = []
        for batch in batches:
            obj = batch_objective(spec, batch)
            if cfg.kind == "sgd":
                w, loss = plain_step(obj, w, cfg.lr)
            elif cfg.kind == "prox":
                w, loss = prox_step(obj, w, w_t, cfg.lr, cfg.mu)
            elif cfg.kind == "sam":
                w, loss = sam_step(obj, w, cfg.lr, cfg.rho)
            elif cfg.kind == "lesam":
                w, loss = lesam_step(obj, w, cfg.lr, cfg.rho, direction)
            else:
                w, state, loss = wmsam_step(obj, w, cfg.lr, cfg.rho, state, cfg.perturb_momentum)
            losses.append(loss)
            steps += 1
        epoch_means.append(float(np.mean(losses)))
        all_losses.extend(losses)

    # float64 difference of two float32 vectors is exact, so w_t + delta == w
    delta = _f64(w) - _f64(w_t)
    if not np.all(np.isfinite(delta)):
        raise FloatingPointError("local training produced a non-finite update")
    rho_used = cfg.rho if cfg.kind in ("sam", "lesam", "wmsam") else 0.0
    return LocalReport(
        delta=delta,
        mean_train_loss=float(np.mean(all_losses)),
        final_train_loss=epoch_means[-1],
        rho_used=rho_used,
        steps=steps,
    )
