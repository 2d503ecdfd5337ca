"""Desk-scale experiment drivers shared by the command line and the acceptance suite."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_io import Dataset, binarize_labels, load_csv_dataset, partition, standardize_and_normalize, train_test_split
from .gossip import iter_dropout_matrices, run_until_consensus
from .optim import Objective, OptimConfig, central_baseline, evaluate, muffliato_gd, muffliato_sgd
from .privacy import PrivacyParams, observer_terms

__all__ = [
    "HOUSING_CSV",
    "HOUSING_LABEL",
    "trial_seed",
    "map_trials",
    "load_housing",
    "HousingTrial",
    "housing_trial",
    "never_adjacent",
    "coefficient_of_variation",
    "DropoutRun",
    "dropout_run",
]

HOUSING_CSV = Path(__file__).resolve().parents[2] / "data" / "california_housing.csv"
HOUSING_LABEL = "MedHouseVal"


def trial_seed(seed: int, trial: int) -> int:
    """Independent integer seed for repetition ``trial`` of a run seeded with ``seed``."""
    return int(np.random.SeedSequence([seed, trial]).generate_state(1, np.uint64)[0] >> 1)


def map_trials(fn, args: list, jobs: int = 1) -> list:
    """``[fn(*a) for a in args]``, optionally in worker processes; order is preserved."""
    if jobs <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, *zip(*args)))


def load_housing(path: str | Path = HOUSING_CSV, label: str = HOUSING_LABEL) -> Dataset:
    """Housing data with the price binarized at its median and normalized features."""
    ds = load_csv_dataset(path, label)
    ds.y = binarize_labels(ds.y)
    return standardize_and_normalize(ds)


@dataclass
class HousingTrial:
    seed: int
    gossip_acc: float
    central_acc: float
    gossip_curve: list[float]
    central_curve: list[float]
    K: list[int]
    ledger_max_never_adjacent: float | None = None
    ledger_max_all: float | None = None
    ledger_mean: float | None = None
    ldp_value: float | None = None
    extra: dict = field(default_factory=dict)


def never_adjacent(rounds, n: int) -> np.ndarray:
    """Boolean ``(n, n)`` mask of distinct pairs that are never neighbors in any round."""
    A = np.zeros((n, n), dtype=bool)
    for m in rounds:
        c = m.tocoo()
        A[c.row, c.col] = True
    np.fill_diagonal(A, True)
    return ~A


def coefficient_of_variation(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    return float(values.std() / values.mean())


def housing_trial(ds: Dataset, n: int, T: int, step: float, sigma2: float, seed: int,
                  q: float | None = None, mu_reg: float = 1e-3, alpha: float = 2.0,
                  ledger: bool = False, mode: str = "gd") -> HousingTrial:
    """One trial: split, shard, run Muffliato-GD on fresh ER graphs and the trusted-aggregator baseline."""
    q = math.log(n) / n if q is None else q
    train, test = train_test_split(ds, 0.8, seed=seed)
    obj = Objective(partition(train, n, seed=seed), mu_reg=mu_reg)
    cfg = OptimConfig(T=T, step=step, sigma2=sigma2, mode=mode, seed=seed, graph_source="fresh_er", q=q,
                      alpha=alpha, ledger=ledger, eig_method="sparse")
    algo = muffliato_gd if mode == "gd" else muffliato_sgd
    run = algo(obj, cfg, test=(test.X, test.y))
    base = central_baseline(obj, cfg, test=(test.X, test.y))
    out = HousingTrial(
        seed=seed,
        gossip_acc=evaluate(run.theta_out, test.X, test.y)[1],
        central_acc=evaluate(base.theta_out, test.X, test.y)[1],
        gossip_curve=run.test_acc.tolist(),
        central_curve=base.test_acc.tolist(),
        K=list(run.K),
    )
    if run.ledger is not None:
        eps = run.ledger.eps
        mask = never_adjacent(run.rounds, n)
        off = ~np.eye(n, dtype=bool)
        out.ledger_max_never_adjacent = float(eps[mask].max()) if mask.any() else 0.0
        out.ledger_max_all = float(eps[off].max())
        out.ledger_mean = float(eps[off].mean())
        out.ldp_value = T * PrivacyParams(alpha, obj.delta_phi, sigma2).per_message
    return out


@dataclass
class DropoutRun:
    dropout_rate: float
    seed: int
    steps: int
    final_mse: float
    mean_loss: float
    mse_curve: np.ndarray
    loss_per_node: np.ndarray


def dropout_run(n: int, q: float, rate: float, seed: int, sigma2: float = 1.0, alpha: float = 2.0,
                delta: float = 1.0, tol: float = 0.1, max_steps: int = 100_000,
                weights: str = "hamilton") -> DropoutRun:
    """Gossip under dropout until consensus, with the exact ledger of the steps used.

    ``mean_loss`` averages over observers ``v`` the mean loss
    ``(1/n) sum_{u != v} eps[u, v]``.
    """
    x = np.random.default_rng([seed, 0]).standard_normal(n)
    run, sched = run_until_consensus(x, iter_dropout_matrices(n, q, rate, [seed, 1], weights), sigma2,
                                     seed=[seed, 2], tol=tol, max_steps=max_steps)
    acc, _ = observer_terms(sched)
    c = PrivacyParams(alpha, delta, sigma2).per_message
    per_node = c * (acc.sum(axis=1) - np.diag(acc)) / n
    return DropoutRun(rate, seed, sched.T, run.final_mse, float(per_node.mean()), run.mse_per_step, per_node)
