"""Federated optimisation lab: FedSCAM and baseline aggregators on an MLP kernel."""
from .config import ExperimentConfig, parse_config, to_text
from .data import (
    ClientPartition,
    Dataset,
    DirichletSpec,
    batch_iter,
    dirichlet_partition,
    generate_synthetic,
    load_idx,
)
from .engine import Experiment, RoundRecord, client_drift, run_experiment
from .model import Batch, ModelSpec, evaluate, init_params, loss_and_grad, vec_metrics
from .scam import FedScamConfig

__version__ = "0.1.0"
