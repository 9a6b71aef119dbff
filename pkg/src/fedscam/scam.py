"""FedSCAM client signals and server-side weighting.

Client side, per round: a heterogeneity score ``h`` (mean gradient norm over
the first few batches at the broadcast model), a projected pilot direction
``s``, its alignment ``c`` with the server's direction memory, the adjusted
score ``h_adj = h * max(0, 1 - kappa * c)`` and the SAM radius
``rho = rho_max / (1 + alpha_rho * h_adj)``. After local training the update
is summarised as ``z = Proj(delta / ||delta||)``.

Server side: optional k-means over the ``z`` summaries with within-cluster
conflict dampening, then weights
``S_i = N_i * m_i / (1 + gamma * h_adj) * max(0, 1 + beta * c)``.
"""
from __future__ import annotations

import functools
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .aggregation import apply_step, fedavg_weights, normalize, weighted_delta
from .errors import ContractError
from .model import Batch, ModelSpec, cosine, l2norm, loss_and_grad
from .optimizers import GRAD_EPS, batch_objective, sam_step

log = logging.getLogger(__name__)

VARIANTS = ("full", "wa_only", "sam_only")
PILOTS = ("sam_step", "gradient")
KMEANS_ITERS = 20


@dataclass(frozen=True)
class FedScamConfig:
    rho_max: float = 0.05
    alpha_rho: float = 1.0
    gamma: float = 1.0
    beta: float = 0.0
    kappa: float = 0.5
    lam: float = 0.5
    clusters: int = 3
    summary_dim: int = 256
    het_batches: int = 3
    clustering_enabled: bool = True
    variant: str = "full"
    # overrides the adaptive radius for local training (degeneracy checks)
    fixed_rho: float | None = None
    pilot: str = "sam_step"

    def __post_init__(self):
        if not self.rho_max > 0:
            raise ContractError("rho_max must be positive")
        for name in ("alpha_rho", "gamma", "beta", "kappa"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        if not 0 < self.lam <= 1:
            raise ContractError("lambda must lie in (0,1]")
        if self.clusters < 1 or self.summary_dim < 1 or self.het_batches < 1:
            raise ContractError("clusters, summary_dim and het_batches must be >= 1")
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}")
        if self.pilot not in PILOTS:
            raise ContractError(f"pilot must be one of {PILOTS}")
        if self.fixed_rho is not None and self.fixed_rho < 0:
            raise ContractError("fixed_rho must be non-negative")


@dataclass
class DirectionMemory:
    u: np.ndarray | None = None

    @property
    def is_set(self) -> bool:
        return self.u is not None


@dataclass
class ClientSignals:
    h: float
    c: float
    h_adj: float
    rho: float
    s: np.ndarray
    z: np.ndarray | None = None


# -- heterogeneity ------------------------------------------------------------

def estimate_heterogeneity(spec: ModelSpec, w_t: np.ndarray, batches: Sequence[Batch],
                           num_batches: int = 3) -> float:
    """Mean gradient L2 norm at ``w_t`` over the first ``num_batches`` batches.

    Uses whatever is available when the client has fewer batches.
    """
    if len(batches) < 1:
        raise ContractError("heterogeneity estimate needs at least one batch")
    use = batches[:num_batches]
    norms = [l2norm(loss_and_grad(spec, w_t, b)[1]) for b in use]
    return float(np.mean(norms))


# -- projection ---------------------------------------------------------------

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


@functools.lru_cache(maxsize=8)
def projection_signs(length: int, d: int, seed: int) -> np.ndarray:
    """(d, length) int8 matrix of +-1.

    Column j is a pure function of (seed, j): a per-column key is hashed from
    the seed and the coordinate index, then each row hashes (key + row).
    """
    with np.errstate(over="ignore"):
        cols = np.arange(length, dtype=np.uint64)
        seed_key = _splitmix64(np.array([seed], dtype=np.uint64) & _M64)
        col_keys = _splitmix64(seed_key ^ (cols * np.uint64(0xD1B54A32D192ED03)))
        rows = np.arange(d, dtype=np.uint64)
        bits = _splitmix64(col_keys[None, :] + rows[:, None]) >> np.uint64(63)
    signs = np.where(bits == 1, 1, -1).astype(np.int8)
    signs.flags.writeable = False
    return signs


def random_projection(v: np.ndarray, d: int, seed: int, chunk: int = 8192) -> np.ndarray:
    """y = R v with R[r, j] = +-1/sqrt(d). Linear in v."""
    if d < 1:
        raise ContractError("projection dimension must be >= 1")
    v = np.asarray(v, dtype=np.float64)
    signs = projection_signs(v.shape[0], int(d), int(seed))
    y = np.zeros(d, dtype=np.float64)
    for start in range(0, v.shape[0], chunk):
        y += signs[:, start:start + chunk] @ v[start:start + chunk]
    return y / math.sqrt(d)


def summarize(v: np.ndarray, d: int, seed: int) -> np.ndarray:
    """Proj(v / ||v||), zero for a degenerate v."""
    norm = l2norm(v)
    if norm < GRAD_EPS:
        return np.zeros(d)
    return random_projection(np.asarray(v, dtype=np.float64) / norm, d, seed)


# -- pilot, alignment, modulation ---------------------------------------------

def pilot_radius(h: float, cfg: FedScamConfig) -> float:
    return 0.5 * cfg.rho_max / (1.0 + cfg.alpha_rho * h)


def pilot_direction(spec: ModelSpec, w_t: np.ndarray, batch: Batch, lr: float,
                    rho_pilot: float, mode: str = "sam_step") -> np.ndarray:
    """Displacement of one SAM step at ``w_t`` (or the negative gradient)."""
    obj = batch_objective(spec, batch)
    w64 = np.asarray(w_t, dtype=np.float64)
    if mode == "gradient":
        return -np.asarray(obj(w64)[1], dtype=np.float64)
    w_next, _ = sam_step(obj, w_t, lr, rho_pilot)
    return np.asarray(w_next, dtype=np.float64) - w64


def pilot_summary(spec: ModelSpec, w_t: np.ndarray, batch: Batch, lr: float, rho_pilot: float,
                  d: int, proj_seed: int, mode: str = "sam_step") -> np.ndarray:
    return summarize(pilot_direction(spec, w_t, batch, lr, rho_pilot, mode), d, proj_seed)


def alignment(s: np.ndarray, memory: DirectionMemory) -> float:
    if not memory.is_set:
        return 0.0
    return cosine(s, memory.u)


def adjust_and_modulate(h: float, c: float, cfg: FedScamConfig) -> tuple[float, float]:
    if h < 0:
        raise ContractError("heterogeneity score must be non-negative")
    h_adj = h * max(0.0, 1.0 - cfg.kappa * c)
    return h_adj, cfg.rho_max / (1.0 + cfg.alpha_rho * h_adj)


def update_summary(delta: np.ndarray, d: int, proj_seed: int) -> np.ndarray:
    return summarize(delta, d, proj_seed)


# -- clustered conflict dampening ---------------------------------------------

def kmeans(points: np.ndarray, k: int, seed: int, iters: int = KMEANS_ITERS) -> np.ndarray:
    """k-means++ seeding then a fixed number of Lloyd iterations. Returns labels.

    ``k`` is clamped to the number of points; an emptied cluster keeps its
    previous center; distance ties go to the lowest cluster index.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    k = max(1, min(int(k), n))
    rng = np.random.default_rng(seed)
    centers = [x[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = ((x[:, None, :] - np.array(centers)[None, :, :]) ** 2).sum(-1).min(axis=1)
        total = d2.sum()
        pick = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centers.append(x[pick])
    centers = np.array(centers)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        labels = d2.argmin(axis=1)
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return labels


def dampen_within_clusters(labels: Sequence[int], summaries: Sequence[np.ndarray],
                           norms: Sequence[float], lam: float) -> np.ndarray:
    """Multiply the smaller-norm member of each same-cluster negative-cosine pair by lam.

    Equal norms: the higher client id counts as the smaller one.
    """
    m = np.ones(len(norms))
    for i, j in itertools.combinations(range(len(norms)), 2):
        if labels[i] != labels[j]:
            continue
        if cosine(summaries[i], summaries[j]) < 0:
            m[j if norms[i] >= norms[j] else i] *= lam
    return m


def cluster_conflict_dampen(summaries: Sequence[np.ndarray], norms: Sequence[float], k: int,
                            lam: float, seed: int) -> np.ndarray:
    if not 0 < lam <= 1:
        raise ContractError("lambda must lie in (0,1]")
    if len(summaries) != len(norms):
        raise ContractError("one norm per summary is required")
    labels = kmeans(np.stack(summaries), k, seed)
    return dampen_within_clusters(labels, summaries, norms, lam)


# -- weights and aggregation --------------------------------------------------

def scam_weights(sizes: Sequence[int], h_adj: Sequence[float], c: Sequence[float],
                 m: Sequence[float], gamma: float, beta: float) -> np.ndarray:
    n = np.asarray(sizes, dtype=np.float64)
    h = np.asarray(h_adj, dtype=np.float64)
    cs = np.asarray(c, dtype=np.float64)
    raw = n * np.asarray(m, dtype=np.float64) / (1.0 + gamma * h) * np.maximum(0.0, 1.0 + beta * cs)
    if not raw.sum() > 0:
        log.warning("all FedSCAM weights are zero; falling back to sample-count weights")
        return fedavg_weights(sizes)
    return normalize(raw)


def scam_aggregate(w_t: np.ndarray, deltas: Sequence[np.ndarray], weights: np.ndarray,
                   memory: DirectionMemory, d: int,
                   proj_seed: int) -> tuple[np.ndarray, DirectionMemory]:
    """Weighted step plus direction-memory refresh (kept as-is on a zero step)."""
    w_next = apply_step(w_t, weighted_delta(deltas, weights))
    actual = np.asarray(w_next, dtype=np.float64) - np.asarray(w_t, dtype=np.float64)
    if l2norm(actual) < GRAD_EPS:
        return w_next, memory
    u = update_summary(actual, d, proj_seed)
    norm = l2norm(u)
    if norm < GRAD_EPS:
        return w_next, memory
    return w_next, DirectionMemory(u / norm)
