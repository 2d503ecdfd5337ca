"""Muffliato-GD/SGD for l2-regularized logistic regression.

Each outer step every node takes a local (stochastic) gradient step, then
the nodes run ``K`` rounds of accelerated noisy gossip on the updated
parameters with per-coordinate noise variance ``step**2 * sigma2``. The
privacy ledger of the realized communication rounds is attached to the run.

Randomness is derived per (step, stream) from the run seed, so the noise
does not depend on whether gradients are full or sampled.
"""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, log_expit

from .errors import DivergenceError, InvalidParameter
from .gossip import GossipMatrix, chebyshev_average, hamilton_matrix, spectral_gap
from .graph import Graph, gen_erdos_renyi
from .privacy import PairwiseLossMatrix, PrivacyParams, sgd_privacy_loss, sgd_privacy_loss_schedule

__all__ = [
    "Objective",
    "OptimConfig",
    "OptimRun",
    "logistic_loss",
    "logistic_gradient",
    "k_rounds",
    "heterogeneity",
    "muffliato_gd",
    "muffliato_sgd",
    "central_baseline",
    "ldp_baseline",
    "evaluate",
]

# streams of the per-step generators
_GRAPH, _SAMPLE, _NOISE = 0, 1, 2


def logistic_loss(theta: np.ndarray, x: np.ndarray, y) -> np.ndarray:
    """``ln(1 + exp(-y theta.x))`` for one sample or a batch (rows of ``x``)."""
    return -log_expit(np.asarray(y) * (np.asarray(x) @ theta))


def logistic_gradient(theta: np.ndarray, x: np.ndarray, y: float, mu_reg: float = 0.0) -> np.ndarray:
    """Gradient of the regularized logistic loss of one sample."""
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    return -y * x * expit(-y * (theta @ x)) + mu_reg * theta


class Objective:
    """Average over nodes of ``phi_v(theta) = mean_i loss(theta; x_i, y_i) + mu_reg/2 ||theta||^2``.

    ``shards`` is one ``(X_v, y_v)`` pair per node; features must have
    L2 norm at most 1 and labels must be +-1.
    """

    def __init__(self, shards: Sequence[tuple[np.ndarray, np.ndarray]], mu_reg: float = 1e-3):
        if not shards:
            raise InvalidParameter("need at least one shard")
        if mu_reg < 0:
            raise InvalidParameter("mu_reg must be >= 0")
        Xs, ys, owner = [], [], []
        for v, (X, y) in enumerate(shards):
            X = np.atleast_2d(np.asarray(X, dtype=float))
            y = np.asarray(y, dtype=float).ravel()
            if len(X) == 0 or len(X) != len(y):
                raise InvalidParameter(f"shard {v} is empty or has mismatched labels")
            Xs.append(X)
            ys.append(y)
            owner.append(np.full(len(y), v))
        self.X = np.vstack(Xs)
        self.y = np.concatenate(ys)
        self.owner = np.concatenate(owner)
        if np.any(np.linalg.norm(self.X, axis=1) > 1 + 1e-9):
            raise InvalidParameter("feature vectors must have L2 norm <= 1")
        if not np.all(np.isin(self.y, (-1.0, 1.0))):
            raise InvalidParameter("labels must be -1 or +1")
        self.mu_reg = float(mu_reg)
        self.n = len(shards)
        self.counts = np.bincount(self.owner, minlength=self.n)
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
        N = len(self.y)
        # row v averages node v's samples
        self._avg = sp.csr_matrix((1.0 / self.counts[self.owner], (self.owner, np.arange(N))), shape=(self.n, N))

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def smoothness(self) -> float:
        return 0.25 + self.mu_reg

    @property
    def strong_convexity(self) -> float:
        return self.mu_reg

    @property
    def condition_number(self) -> float:
        return math.inf if self.mu_reg == 0 else self.smoothness / self.mu_reg

    @property
    def delta_phi(self) -> float:
        """Bound on the distance between two per-sample gradients."""
        return 2.0

    def shard(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        s = slice(self.offsets[v], self.offsets[v] + self.counts[v])
        return self.X[s], self.y[s]

    def local_gradients(self, thetas: np.ndarray) -> np.ndarray:
        """``(n, D)`` array of ``grad phi_v(theta_v)``."""
        margins = self.y * np.einsum("ij,ij->i", self.X, thetas[self.owner])
        coef = -self.y * expit(-margins)
        return self._avg @ (coef[:, None] * self.X) + self.mu_reg * thetas

    def sampled_gradients(self, thetas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One uniformly drawn sample per node."""
        idx = self.offsets + np.floor(rng.random(self.n) * self.counts).astype(np.int64)
        X, y = self.X[idx], self.y[idx]
        m = y * np.einsum("ij,ij->i", X, thetas)
        return (-y * expit(-m))[:, None] * X + self.mu_reg * thetas

    def value(self, theta: np.ndarray) -> float:
        """Global objective at a common parameter ``theta``."""
        per = self._avg @ logistic_loss(theta, self.X, self.y)
        return float(per.mean() + 0.5 * self.mu_reg * theta @ theta)

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        return self.local_gradients(np.broadcast_to(theta, (self.n, self.dim))).mean(axis=0)


def heterogeneity(obj: Objective, theta: np.ndarray, stochastic: bool) -> tuple[float, float]:
    """Empirical ``(zeta2, rho2)`` at ``theta``.

    ``zeta2`` is the spread of local gradients around the global one and
    ``rho2`` the mean within-node variance of per-sample gradients (0 for
    full gradients).
    """
    G = obj.local_gradients(np.broadcast_to(theta, (obj.n, obj.dim)))
    zeta2 = float(((G - G.mean(axis=0)) ** 2).sum(axis=1).mean())
    if not stochastic:
        return zeta2, 0.0
    m = obj.y * (obj.X @ theta)
    per = (-obj.y * expit(-m))[:, None] * obj.X
    dev = per - (G - obj.mu_reg * theta)[obj.owner]
    rho2 = float((obj._avg @ (dev ** 2).sum(axis=1)).mean())
    return zeta2, rho2


def k_rounds(gap: float, n: int, zeta2: float, rho2: float, sigma2: float, D: int) -> int:
    """Gossip rounds per optimization step for spectral gap ``gap``."""
    if gap <= 0:
        raise InvalidParameter("spectral gap is 0 (use lazy(W))")
    denom = D * sigma2 + rho2
    if denom <= 0:
        if zeta2 > 0:
            raise InvalidParameter("noise and gradient variance are both 0: the heterogeneity ratio is unbounded")
        ratio = 0.0
    else:
        ratio = zeta2 / denom
    return max(1, math.ceil(math.log(max(n, ratio)) / math.sqrt(gap)))


@dataclass
class OptimConfig:
    """Parameters of a Muffliato-GD/SGD run.

    ``K=None`` picks the number of gossip rounds per step from the spectral
    gap of that step's matrix. With ``sigma2 = 0`` the heterogeneity ratio is
    computed with ``precision`` in place of the noise variance.
    ``step=None`` means ``1 / (2L)``.
    """

    T: int
    step: float | None = None
    K: int | None = None
    sigma2: float = 1.0
    mode: str = "gd"
    seed: int = 0
    graph_source: str = "fixed"
    q: float | None = None
    step_decay: bool = False
    output: str = "tail"
    alpha: float = 2.0
    ledger: bool = True
    ledger_observers: Sequence[int] | None = None
    precision: float = 1e-12
    eig_method: str = "dense"

    def __post_init__(self):
        if self.T < 1:
            raise InvalidParameter("T must be >= 1")
        if self.K is not None and self.K < 1:
            raise InvalidParameter("K must be >= 1")
        if self.step is not None and self.step <= 0:
            raise InvalidParameter("step size must be > 0")
        if self.sigma2 < 0:
            raise InvalidParameter("sigma2 must be >= 0")
        if self.mode not in ("gd", "sgd"):
            raise InvalidParameter(f"mode must be 'gd' or 'sgd', got {self.mode!r}")
        if self.graph_source not in ("fixed", "fresh_er"):
            raise InvalidParameter(f"graph_source must be 'fixed' or 'fresh_er', got {self.graph_source!r}")
        if self.output not in ("tail", "final"):
            raise InvalidParameter(f"output must be 'tail' or 'final', got {self.output!r}")


@dataclass
class OptimRun:
    theta_bar: np.ndarray
    theta_out: np.ndarray
    train_loss: np.ndarray
    train_acc: np.ndarray
    test_loss: np.ndarray | None = None
    test_acc: np.ndarray | None = None
    K: list[int] = field(default_factory=list)
    gaps: list[float] = field(default_factory=list)
    rounds: list[sp.csr_matrix] = field(default_factory=list)
    ledger: PairwiseLossMatrix | None = None
    final_thetas: np.ndarray | None = None

    @property
    def T(self) -> int:
        return len(self.theta_bar) - 1

    def metrics(self) -> dict:
        out = {
            "train_loss": self.train_loss.tolist(),
            "train_acc": self.train_acc.tolist(),
            "K": list(self.K),
            "theta_out": self.theta_out.tolist(),
        }
        if self.test_acc is not None:
            out["test_loss"] = self.test_loss.tolist()
            out["test_acc"] = self.test_acc.tolist()
        return out


def evaluate(theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Mean unregularized logistic loss and accuracy; a zero margin predicts +1."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(y) == 0:
        raise InvalidParameter("cannot evaluate on an empty dataset")
    scores = X @ theta
    pred = np.where(scores >= 0, 1.0, -1.0)
    return float(logistic_loss(theta, X, y).mean()), float(np.mean(pred == y))


def _rng(seed: int, t: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, t, stream])


def _step_size(cfg: OptimConfig, obj: Objective, t: int) -> float:
    nu = cfg.step if cfg.step is not None else 1.0 / (2.0 * obj.smoothness)
    if cfg.step_decay and obj.mu_reg > 0:
        nu = nu / (1.0 + t / obj.condition_number)
    return nu


def _output(theta_bar: np.ndarray, how: str) -> np.ndarray:
    if how == "final":
        return theta_bar[-1].copy()
    T = len(theta_bar) - 1
    return theta_bar[T // 2 + (T % 2):].mean(axis=0) if T else theta_bar[0].copy()


class _Tracker:
    def __init__(self, obj: Objective, T: int, test):
        self.obj = obj
        self.test = test
        self.theta_bar = np.zeros((T + 1, obj.dim))
        self.train_loss = np.zeros(T + 1)
        self.train_acc = np.zeros(T + 1)
        self.test_loss = np.zeros(T + 1) if test is not None else None
        self.test_acc = np.zeros(T + 1) if test is not None else None

    def __call__(self, t: int, theta: np.ndarray) -> None:
        self.theta_bar[t] = theta
        self.train_loss[t], self.train_acc[t] = evaluate(theta, self.obj.X, self.obj.y)
        if self.test is not None:
            self.test_loss[t], self.test_acc[t] = evaluate(theta, *self.test)
        if t > 0 and self.train_loss[t] > 10.0 * self.train_loss[0]:
            raise DivergenceError(
                f"train loss {self.train_loss[t]:.4g} at step {t} exceeds 10x its initial value"
            )

    def run(self, how: str, **extra) -> OptimRun:
        return OptimRun(self.theta_bar, _output(self.theta_bar, how), self.train_loss, self.train_acc,
                        self.test_loss, self.test_acc, **extra)


def _decentralized(obj: Objective, cfg: OptimConfig, graph: Graph | GossipMatrix | None, test) -> OptimRun:
    n, D = obj.n, obj.dim
    if cfg.graph_source == "fixed":
        if graph is None:
            if cfg.q is None:
                raise InvalidParameter("a fixed-graph run needs a graph or an edge probability q")
            graph = gen_erdos_renyi(n, cfg.q, seed=_rng(cfg.seed, 0, _GRAPH).integers(2**63))
        fixed = graph if isinstance(graph, GossipMatrix) else hamilton_matrix(graph)
        if fixed.n != n:
            raise InvalidParameter(f"graph has {fixed.n} nodes but the objective has {n}")
    else:
        if cfg.q is None:
            raise InvalidParameter("fresh_er needs an edge probability q")
        fixed = None

    theta0 = np.zeros(D)
    zeta2, rho2 = heterogeneity(obj, theta0, cfg.mode == "sgd")
    thetas = np.zeros((n, D))
    track = _Tracker(obj, cfg.T, test)
    track(0, thetas.mean(axis=0))
    Ks, gaps, mats = [], [], []
    for t in range(cfg.T):
        nu = _step_size(cfg, obj, t)
        if cfg.mode == "gd":
            G = obj.local_gradients(thetas)
        else:
            G = obj.sampled_gradients(thetas, _rng(cfg.seed, t, _SAMPLE))
        half = thetas - nu * G
        if fixed is None:
            g = gen_erdos_renyi(n, cfg.q, seed=_rng(cfg.seed, t, _GRAPH).integers(2**63))
            W = hamilton_matrix(g)
        else:
            W = fixed
        if "spectral_gap" not in W.__dict__ and n > 1:
            W.__dict__["spectral_gap"] = spectral_gap(W, cfg.eig_method)
        gap = W.spectral_gap if n > 1 else 1.0
        if cfg.K is not None:
            K = cfg.K
        else:
            K = k_rounds(gap, n, zeta2, rho2, max(cfg.sigma2, cfg.precision), D)
        noise = math.sqrt(nu * nu * cfg.sigma2) * _rng(cfg.seed, t, _NOISE).standard_normal((n, D))
        thetas = chebyshev_average(half + noise, W, K)
        Ks.append(K)
        gaps.append(gap)
        mats.append(W)
        track(t + 1, thetas.mean(axis=0))

    ledger = None
    if cfg.ledger and cfg.sigma2 > 0:
        if fixed is not None and len(set(Ks)) == 1 and cfg.ledger_observers is None:
            ledger = sgd_privacy_loss(fixed, cfg.T, Ks[0], obj.delta_phi, cfg.sigma2, cfg.alpha)
        else:
            ledger = sgd_privacy_loss_schedule(list(zip(mats, Ks)), obj.delta_phi, cfg.sigma2, cfg.alpha,
                                               observers=cfg.ledger_observers)
    run = track.run(cfg.output, K=Ks, gaps=gaps, rounds=[m.sparse for m in mats], ledger=ledger)
    run.final_thetas = thetas
    return run


def muffliato_gd(obj: Objective, cfg: OptimConfig, graph: Graph | GossipMatrix | None = None,
                 test: tuple[np.ndarray, np.ndarray] | None = None) -> OptimRun:
    """Full local gradients followed by ``K`` rounds of noisy accelerated gossip, ``T`` times."""
    if cfg.mode != "gd":
        raise InvalidParameter("muffliato_gd needs mode='gd'")
    return _decentralized(obj, cfg, graph, test)


def muffliato_sgd(obj: Objective, cfg: OptimConfig, graph: Graph | GossipMatrix | None = None,
                  test: tuple[np.ndarray, np.ndarray] | None = None) -> OptimRun:
    """As :func:`muffliato_gd` with one uniformly sampled point per node and step."""
    if cfg.mode != "sgd":
        raise InvalidParameter("muffliato_sgd needs mode='sgd'")
    return _decentralized(obj, cfg, graph, test)


def central_baseline(obj: Objective, cfg: OptimConfig, test=None) -> OptimRun:
    """Trusted aggregator: exact average of the local steps plus N(0, step^2 sigma2 / n) noise."""
    n, D = obj.n, obj.dim
    theta = np.zeros(D)
    track = _Tracker(obj, cfg.T, test)
    track(0, theta)
    for t in range(cfg.T):
        nu = _step_size(cfg, obj, t)
        thetas = np.broadcast_to(theta, (n, D))
        G = obj.local_gradients(thetas) if cfg.mode == "gd" else obj.sampled_gradients(thetas, _rng(cfg.seed, t, _SAMPLE))
        noise = math.sqrt(nu * nu * cfg.sigma2 / n) * _rng(cfg.seed, t, _NOISE).standard_normal(D)
        theta = theta - nu * G.mean(axis=0) + noise
        track(t + 1, theta)
    return track.run(cfg.output)


def ldp_baseline(obj: Objective, cfg: OptimConfig, test=None) -> OptimRun:
    """Local DP: every node publishes its noisy update and all nodes average them.

    The attached ledger charges every pair one Gaussian release per step.
    """
    n, D = obj.n, obj.dim
    theta = np.zeros(D)
    track = _Tracker(obj, cfg.T, test)
    track(0, theta)
    for t in range(cfg.T):
        nu = _step_size(cfg, obj, t)
        thetas = np.broadcast_to(theta, (n, D))
        G = obj.local_gradients(thetas) if cfg.mode == "gd" else obj.sampled_gradients(thetas, _rng(cfg.seed, t, _SAMPLE))
        noise = math.sqrt(nu * nu * cfg.sigma2) * _rng(cfg.seed, t, _NOISE).standard_normal((n, D))
        theta = (theta - nu * G + noise).mean(axis=0)
        track(t + 1, theta)
    ledger = None
    if cfg.sigma2 > 0:
        params = PrivacyParams(cfg.alpha, obj.delta_phi, cfg.sigma2)
        eps = np.full((n, n), cfg.T * params.per_message)
        np.fill_diagonal(eps, 0.0)
        # each node receives the n - 1 other releases every step
        ledger = PairwiseLossMatrix(eps, np.full(n, cfg.T * (n - 1)), params)
    return track.run(cfg.output, ledger=ledger)
