"""Round orchestration: broadcast, client work, barrier, aggregation, evaluation.

All randomness comes from :func:`fedscam.seeding.derive_seed` with these labels:

==============================  =============================================
``("model",)``                  initial parameters
``("partition",)``              Dirichlet split and min-size repair
``("centers",)``                synthetic class centers (train and test)
``("train",)`` / ``("test",)``  synthetic sample draws
``("batches", t, e)``           batch order of epoch ``e`` in round ``t``
                                (further mixed with the client id)
``("projection",)``             random projection matrix, fixed for the run
``("kmeans", t)``               k-means++ seeding in round ``t``
==============================  =============================================
"""
from __future__ import annotations

import dataclasses
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import aggregation as agg
from . import scam
from .config import ExperimentConfig, flatten, validate
from .data import (
    ClientPartition,
    Dataset,
    DirichletSpec,
    batch_iter,
    dirichlet_partition,
    generate_synthetic,
    load_idx,
)
from .errors import ConfigError
from .model import ModelSpec, evaluate, init_params, l2norm
from .optimizers import LocalReport, OptimizerConfig, local_train
from .seeding import derive_seed

# algorithm -> (local optimizer kind, server weighting rule)
BASELINES = {
    "fedavg": ("sgd", "fedavg"),
    "uniform": ("sgd", "uniform"),
    "fedavgm": ("sgd", "fedavgm"),
    "qfedavg": ("sgd", "qfedavg"),
    "fedprox": ("prox", "fedavg"),
    "fedlw": ("sgd", "fedlw"),
    "fednolowe": ("sgd", "fednolowe"),
    "fedlwsam": ("sam", "fedlw"),
    "fedsam": ("sam", "fedavg"),
    "fedlesam": ("lesam", "fedavg"),
    "fedwmsam": ("wmsam", "fedavg"),
}
SCAM_VARIANTS = {"fedscam": None, "fedscam_wa": "wa_only", "fedscam_sam": "sam_only"}
APPROXIMATE = {"fedlesam", "fedwmsam", "qfedavg", "fedlw", "fedlwsam"}


@dataclass
class RoundRecord:
    round: int
    test_accuracy: float | None
    test_loss: float | None
    drift: float
    mean_rho: float | None
    weights: list[float]
    train_loss: float
    clients: list[dict] | None = None
    wall_millis: float = 0.0


@dataclass
class EngineState:
    round: int
    params: np.ndarray
    aggregator: agg.AggregatorState
    memory: scam.DirectionMemory = field(default_factory=scam.DirectionMemory)
    prev_step: np.ndarray | None = None


@dataclass
class ClientResult:
    client: int
    report: LocalReport
    signals: scam.ClientSignals | None = None


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    summary: dict


def client_drift(client_models: Sequence[np.ndarray], w_t: np.ndarray) -> float:
    """Mean L2 distance of the local models from the pre-aggregation global model."""
    if len(client_models) == 0:
        raise ValueError("client drift needs at least one client")
    base = np.asarray(w_t, dtype=np.float64)
    return float(np.mean([l2norm(np.asarray(w, dtype=np.float64) - base) for w in client_models]))


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "idx":
        train = load_idx(d.train_images, d.train_labels)
        test = load_idx(d.test_images, d.test_labels, classes=train.classes)
        return train, test
    centers = derive_seed(cfg.seed, "centers")
    train = generate_synthetic(d.classes, d.dim, d.per_class, d.spread,
                               derive_seed(cfg.seed, "train"), center_seed=centers)
    test = generate_synthetic(d.classes, d.dim, d.test_per_class, d.spread,
                              derive_seed(cfg.seed, "test"), center_seed=centers)
    return train, test


class Experiment:
    """A prepared run: datasets, partition and model are fixed at construction."""

    def __init__(self, cfg: ExperimentConfig, train: Dataset | None = None,
                 test: Dataset | None = None, partition: ClientPartition | None = None):
        validate(cfg)
        self.cfg = cfg
        if train is None or test is None:
            train, test = load_datasets(cfg)
        self.train, self.test = train, test
        if cfg.data.source == "synthetic" and train.dim != cfg.data.dim:
            raise ConfigError("data.dim does not match the supplied dataset")
        self.model = ModelSpec((train.dim, *cfg.hidden, train.classes),
                               seed=derive_seed(cfg.seed, "model"))
        self.dirichlet = DirichletSpec(cfg.dirichlet.alpha, cfg.dirichlet.num_clients,
                                       cfg.dirichlet.min_size, derive_seed(cfg.seed, "partition"))
        self.partition = partition if partition is not None else dirichlet_partition(
            train, self.dirichlet)
        self.sizes = self.partition.sizes()
        self.proj_seed = derive_seed(cfg.seed, "projection")

        algo = cfg.algorithm
        self.is_scam = algo in SCAM_VARIANTS
        if self.is_scam:
            variant = SCAM_VARIANTS[algo] or cfg.scam.variant
            self.scam_cfg = dataclasses.replace(cfg.scam, variant=variant)
            local_kind, rule = ("sgd" if variant == "wa_only" else "sam"), "fedavg"
        else:
            self.scam_cfg = None
            local_kind, rule = BASELINES[algo]
        self.local_kind = local_kind
        self.rule = rule

    # -- state ---------------------------------------------------------------

    def initial_state(self) -> EngineState:
        a = self.cfg.agg
        return EngineState(
            round=0,
            params=init_params(self.model),
            aggregator=agg.AggregatorState(self.rule, a.server_momentum, a.q, a.lw_temperature),
        )

    def optimizer_config(self, rho: float | None = None) -> OptimizerConfig:
        o = self.cfg.opt
        return OptimizerConfig(
            kind=self.local_kind,
            lr=self.cfg.lr,
            rho=o.rho if rho is None else rho,
            mu=o.mu if self.local_kind == "prox" else 0.0,
            perturb_momentum=o.perturb_momentum,
        )

    def epoch_batches(self, t: int, client: int):
        return [
            batch_iter(self.train, self.partition, client, self.cfg.batch_size,
                       derive_seed(self.cfg.seed, "batches", t, e))
            for e in range(self.cfg.local_epochs)
        ]

    # -- client phase --------------------------------------------------------

    def client_work(self, state: EngineState, client: int) -> ClientResult:
        batches = self.epoch_batches(state.round, client)
        if not self.is_scam:
            report = local_train(self.model, state.params, batches, self.optimizer_config(),
                                 global_dir=state.prev_step)
            return ClientResult(client, report)

        sc = self.scam_cfg
        first = batches[0]
        h = scam.estimate_heterogeneity(self.model, state.params, first, sc.het_batches)
        s = scam.pilot_summary(self.model, state.params, first[0], self.cfg.lr,
                               scam.pilot_radius(h, sc), sc.summary_dim, self.proj_seed,
                               mode=sc.pilot)
        c = scam.alignment(s, state.memory)
        h_adj, rho_i = scam.adjust_and_modulate(h, c, sc)
        train_rho = rho_i if sc.fixed_rho is None else sc.fixed_rho
        report = local_train(self.model, state.params, batches, self.optimizer_config(train_rho))
        report.h = h
        z = scam.update_summary(report.delta, sc.summary_dim, self.proj_seed)
        return ClientResult(client, report, scam.ClientSignals(h, c, h_adj, rho_i, s, z))

    def _run_clients(self, state: EngineState, workers: int) -> list[ClientResult]:
        ids = range(self.partition.num_clients)
        if workers <= 1:
            return [self.client_work(state, i) for i in ids]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda i: self.client_work(state, i), ids))
        return sorted(results, key=lambda r: r.client)

    # -- server phase --------------------------------------------------------

    def server_step(self, state: EngineState, results: list[ClientResult]):
        deltas = [r.report.delta for r in results]
        losses = [r.report.final_train_loss for r in results]
        memory = state.memory
        aggregator = state.aggregator
        if self.is_scam:
            sc = self.scam_cfg
            sig = [r.signals for r in results]
            if sc.variant == "sam_only":
                weights = agg.fedavg_weights(self.sizes)
                multipliers = np.ones(len(results))
            else:
                if sc.clustering_enabled:
                    multipliers = scam.cluster_conflict_dampen(
                        [x.z for x in sig], [l2norm(d) for d in deltas], sc.clusters, sc.lam,
                        derive_seed(self.cfg.seed, "kmeans", state.round))
                else:
                    multipliers = np.ones(len(results))
                weights = scam.scam_weights(self.sizes, [x.h_adj for x in sig],
                                            [x.c for x in sig], multipliers, sc.gamma, sc.beta)
            params, memory = scam.scam_aggregate(state.params, deltas, weights, memory,
                                                 sc.summary_dim, self.proj_seed)
        else:
            multipliers = None
            weights = aggregator.weights(self.sizes, losses)
            params, aggregator = agg.aggregate(state.params, deltas, weights, aggregator)
        step = np.asarray(params, dtype=np.float64) - np.asarray(state.params, dtype=np.float64)
        new_state = EngineState(state.round + 1, params, aggregator, memory, step)
        return new_state, weights, multipliers

    def run_round(self, state: EngineState, workers: int | None = None,
                  ) -> tuple[EngineState, RoundRecord]:
        started = time.perf_counter()
        t = state.round
        results = self._run_clients(state, workers or self.cfg.workers)
        new_state, weights, multipliers = self.server_step(state, results)

        drift = float(np.mean([l2norm(r.report.delta) for r in results]))
        acc = loss = None
        if t % self.cfg.eval_every == 0 or t == self.cfg.rounds - 1:
            acc, loss = evaluate(self.model, new_state.params, self.test)

        clients = mean_rho = None
        if self.is_scam:
            clients = [
                {"h": r.signals.h, "c": r.signals.c, "h_adj": r.signals.h_adj,
                 "rho": r.signals.rho, "rho_used": r.report.rho_used,
                 "multiplier": float(multipliers[k]), "weight": float(weights[k])}
                for k, r in enumerate(results)
            ]
            mean_rho = float(np.mean([c["rho"] for c in clients]))
        record = RoundRecord(
            round=t,
            test_accuracy=acc,
            test_loss=loss,
            drift=drift,
            mean_rho=mean_rho,
            weights=[float(w) for w in weights],
            train_loss=float(np.mean([r.report.final_train_loss for r in results])),
            clients=clients,
            wall_millis=(time.perf_counter() - started) * 1000.0,
        )
        return new_state, record

    # -- whole run -----------------------------------------------------------

    def metadata(self) -> dict:
        return {
            "algorithm": self.cfg.algorithm,
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in flatten(self.cfg)},
            "partition_checksum": self.partition.checksum(),
            "client_sizes": self.sizes,
            "approx": self.cfg.algorithm in APPROXIMATE,
            "seeds": {
                "master": self.cfg.seed,
                "model": self.model.seed,
                "partition": self.dirichlet.seed,
                "projection": self.proj_seed,
            },
        }

    def run(self, on_round=None, workers: int | None = None) -> ExperimentResult:
        started = time.perf_counter()
        state = self.initial_state()
        records = []
        for _ in range(self.cfg.rounds):
            state, record = self.run_round(state, workers)
            records.append(record)
            if on_round is not None:
                on_round(record)
        accs = [r.test_accuracy for r in records if r.test_accuracy is not None]
        summary = {
            "final_accuracy": records[-1].test_accuracy,
            "best_accuracy": max(accs),
            "rounds": len(records),
            "mean_drift": float(np.mean([r.drift for r in records])),
            "total_wall_seconds": time.perf_counter() - started,
            **self.metadata(),
        }
        self.final_params = state.params
        return ExperimentResult(records, summary)


def run_experiment(cfg: ExperimentConfig, **kwargs) -> ExperimentResult:
    return Experiment(cfg, **kwargs).run()
