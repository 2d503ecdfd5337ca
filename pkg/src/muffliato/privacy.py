"""Pairwise network DP accounting for Gaussian gossip.

With ``M_0 = I`` and ``M_{t+1} = W_t M_t``, node ``w`` holds
``x^t_w = sum_u M_t[w, u] (x_u + eta_u)`` at time ``t``. When an observer
``v`` receives ``x^t_w`` it learns about ``u`` through a Gaussian mechanism
with sensitivity ``Delta * |M_t[w, u]|`` and noise variance
``sigma2 * ||M_t[w]||^2``; the Renyi losses of all such messages add up.

The per-message terms ``M_t[w, u]^2 / ||M_t[w]||^2`` sum to 1 over ``u``
(including ``u = v``). Every accounting run checks that identity and raises
:class:`AccountingError` if it is violated.
"""
from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import AccountingError, InvalidParameter, SigmaTooSmall
from .gossip import EdgeStep, GossipMatrix, MatrixStep, Schedule
from .graph import Graph, all_pairs_distances

__all__ = [
    "PrivacyParams",
    "PairwiseLossMatrix",
    "gaussian_renyi_divergence",
    "pairwise_loss_schedule",
    "pairwise_loss_sync",
    "observer_terms",
    "random_walk_bound",
    "mean_loss",
    "closed_form_mean",
    "er_bound",
    "collusion_loss",
    "group_loss",
    "sgd_privacy_loss",
    "sgd_privacy_loss_schedule",
    "rdp_to_dp",
    "by_distance",
    "IDENTITY_RTOL",
]

IDENTITY_RTOL = 1e-9


@dataclass(frozen=True)
class PrivacyParams:
    alpha: float
    delta: float = 1.0
    sigma2: float = 1.0

    def __post_init__(self):
        if not self.alpha > 1:
            raise InvalidParameter(f"Renyi order alpha must be > 1, got {self.alpha}")
        if not self.delta > 0:
            raise InvalidParameter(f"sensitivity delta must be > 0, got {self.delta}")
        if not self.sigma2 > 0:
            raise InvalidParameter(f"sigma2 must be > 0, got {self.sigma2}")

    @property
    def per_message(self) -> float:
        """Loss of one message carrying a node's raw noisy value."""
        return gaussian_renyi_divergence(self.delta, self.sigma2, self.alpha)


@dataclass
class PairwiseLossMatrix:
    """``eps[u, v]``: Renyi loss of ``u``'s data towards observer ``v``.

    The diagonal of ``eps`` is 0; what ``v``'s view reveals about its own
    input is kept separately in ``self_loss`` so that the column identity
    stays checkable. ``msg_count[v]`` is the number of messages ``v`` received.
    """

    eps: np.ndarray
    msg_count: np.ndarray
    params: PrivacyParams
    self_loss: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.eps.shape[0]
        if self.self_loss is None:
            self.self_loss = np.zeros(n)

    @property
    def n(self) -> int:
        return self.eps.shape[0]

    def column_identity_residual(self) -> np.ndarray:
        """Relative error of ``(1/n) sum_u eps[u, v]`` (self term included) against the closed form."""
        lhs = (self.eps.sum(axis=0) + self.self_loss) / self.n
        rhs = closed_form_mean(self.msg_count, self.n, self.params)
        scale = np.maximum(np.abs(rhs), self.params.per_message / self.n)
        return np.abs(lhs - rhs) / scale

    def check_column_identity(self, rtol: float = IDENTITY_RTOL) -> None:
        res = self.column_identity_residual()
        if res.size and res.max() > rtol:
            v = int(np.argmax(res))
            raise AccountingError(f"column identity violated at observer {v}: relative error {res[v]:.3g}")

    def off_diagonal(self) -> np.ndarray:
        return self.eps[~np.eye(self.n, dtype=bool)]

    def scaled(self, factor: float) -> PairwiseLossMatrix:
        """Losses of ``factor`` independent repetitions (additive composition)."""
        return PairwiseLossMatrix(self.eps * factor, self.msg_count * factor, self.params, self.self_loss * factor)

    def __add__(self, other: PairwiseLossMatrix) -> PairwiseLossMatrix:
        if other.params != self.params:
            raise InvalidParameter("cannot add ledgers with different privacy parameters")
        return PairwiseLossMatrix(self.eps + other.eps, self.msg_count + other.msg_count,
                                  self.params, self.self_loss + other.self_loss)

    def to_dict(self) -> dict:
        return {
            "alpha": self.params.alpha,
            "delta": self.params.delta,
            "sigma2": self.params.sigma2,
            "eps": self.eps.tolist(),
            "msg_count": np.asarray(self.msg_count).tolist(),
            "self_loss": self.self_loss.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PairwiseLossMatrix:
        params = PrivacyParams(d["alpha"], d["delta"], d["sigma2"])
        n = len(d["eps"])
        self_loss = np.asarray(d.get("self_loss", np.zeros(n)), dtype=float)
        return cls(np.asarray(d["eps"], dtype=float), np.asarray(d["msg_count"]), params, self_loss)


def gaussian_renyi_divergence(shift: float, sigma2: float, alpha: float) -> float:
    """Order-``alpha`` Renyi divergence between N(0, sigma2) and N(shift, sigma2)."""
    if sigma2 <= 0:
        raise InvalidParameter("sigma2 must be > 0")
    if alpha <= 1:
        raise InvalidParameter("alpha must be > 1")
    return alpha * shift * shift / (2.0 * sigma2)


# --------------------------------------------------------------------------
# exact accountant
# --------------------------------------------------------------------------


def _nontrivial_rows(W: sp.csr_matrix) -> np.ndarray:
    """Rows with off-diagonal weight (the only rows of ``W M`` that differ from ``M``)."""
    coo = W.tocoo()
    off = (coo.row != coo.col) & (coo.data != 0)
    return np.unique(coo.row[off])


class _Product:
    """Running product ``M_t`` with cached squared row norms."""

    def __init__(self, n: int):
        self.M = np.eye(n)
        self.norm2 = np.ones(n)

    def ratios(self, rows) -> np.ndarray:
        Mr = self.M[rows]
        return Mr * Mr / self.norm2[rows, None]

    def apply(self, W: sp.csr_matrix, rows: np.ndarray) -> None:
        if rows.size == 0:
            return
        new = W[rows] @ self.M
        self.M[rows] = new
        self.norm2[rows] = np.einsum("ij,ij->i", new, new)

    def apply_edge(self, v: int, w: int) -> None:
        mid = 0.5 * (self.M[v] + self.M[w])
        self.M[v] = mid
        self.M[w] = mid
        self.norm2[v] = self.norm2[w] = mid @ mid


class _MatrixInfo:
    def __init__(self, sched: Schedule, mid: int):
        self.support = sched.support(mid)
        self.rows = _nontrivial_rows(sched.matrices[mid])
        self.sub = self.support[:, self.rows].tocsr()
        self.degree = np.diff(self.support.indptr)


def observer_terms(sched: Schedule, observers: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sum of normalized squared coefficients seen by each observer.

    Returns ``(acc, msg)`` where ``acc[i, u] = sum_t sum_{w in N_t(v_i)} M_t[w, u]^2 / ||M_t[w]||^2``
    for ``v_i = observers[i]`` (all nodes by default) and ``msg[i]`` is the
    number of messages ``v_i`` received.
    """
    n = sched.n
    obs = np.arange(n) if observers is None else np.asarray(observers, dtype=np.int64)
    full = observers is None
    pos = np.full(n, -1, dtype=np.int64)
    pos[obs] = np.arange(len(obs))
    acc = np.zeros((len(obs), n))
    msg = np.zeros(len(obs), dtype=np.int64)
    prod = _Product(n)
    info: dict[int, _MatrixInfo] = {}
    for s in sched.steps:
        if isinstance(s, EdgeStep):
            for a, b in ((s.v, s.w), (s.w, s.v)):
                i = pos[a]
                if i >= 0:
                    acc[i] += prod.ratios(b)
                    msg[i] += 1
            prod.apply_edge(s.v, s.w)
            continue
        if s.id not in info:
            info[s.id] = _MatrixInfo(sched, s.id)
        mi = info[s.id]
        if mi.rows.size:
            R = prod.ratios(mi.rows)
            if full:
                acc += mi.sub @ R
                msg += mi.degree
            else:
                acc += mi.sub[obs] @ R
                msg += mi.degree[obs]
        prod.apply(sched.matrices[s.id], mi.rows)
    return acc, msg


def _check_terms(acc: np.ndarray, msg: np.ndarray, rtol: float = IDENTITY_RTOL) -> None:
    tot = acc.sum(axis=1)
    err = np.abs(tot - msg) / np.maximum(msg, 1)
    if err.size and err.max() > rtol:
        i = int(np.argmax(err))
        raise AccountingError(
            f"normalized coefficients of observer row {i} sum to {tot[i]!r} for {msg[i]} messages"
        )


def pairwise_loss_schedule(sched: Schedule, params: PrivacyParams) -> PairwiseLossMatrix:
    """Exact pairwise losses for plain gossip along ``sched``."""
    acc, msg = observer_terms(sched)
    _check_terms(acc, msg)
    c = params.per_message
    eps = c * acc.T
    self_loss = np.diag(eps).copy()
    np.fill_diagonal(eps, 0.0)
    plm = PairwiseLossMatrix(eps, msg, params, self_loss)
    plm.check_column_identity()
    return plm


def pairwise_loss_sync(W: GossipMatrix, T: int, params: PrivacyParams) -> PairwiseLossMatrix:
    """Losses of ``T`` synchronous rounds on ``W``.

    Accelerated iterates are fixed linear combinations of the plain ones,
    so this also bounds the leakage of the Chebyshev protocol.
    """
    if T < 1:
        raise InvalidParameter("T must be >= 1")
    return pairwise_loss_schedule(Schedule.constant(W, T), params)


def mean_loss(plm: PairwiseLossMatrix, v: int) -> float:
    """``(1/n) sum_{u != v} eps[u, v]``."""
    return float(plm.eps[:, v].sum() - plm.eps[v, v]) / plm.n


def closed_form_mean(T_v, n: int, params: PrivacyParams):
    """Average loss towards ``v`` over all ``n`` sources, own input included."""
    out = params.alpha * params.delta ** 2 * np.asarray(T_v, dtype=float) / (2.0 * n * params.sigma2)
    return out if out.ndim else float(out)


def random_walk_bound(W: GossipMatrix, T: int, u: int, v: int, params: PrivacyParams) -> float:
    """Upper bound on ``eps[u, v]`` through return probabilities of the random walk with kernel ``W``."""
    if u == v:
        raise InvalidParameter("u and v must differ")
    if T < 1:
        raise InvalidParameter("T must be >= 1")
    A = W.sparse
    row = A.getrow(v).tocoo()
    wts = row.data[(row.col != v) & (row.data > 0)]
    if wts.size == 0:
        return 0.0
    factor = 1.0 / wts.min() ** 2
    p = np.zeros(W.n)
    p[u] = 1.0
    s = 0.0
    for _ in range(T):
        p = A.T @ p
        s += p[v] ** 2
    return params.alpha * params.delta ** 2 * W.n / (2.0 * params.sigma2) * factor * s


def er_bound(n: int, q: float, d_v: int, T: int, params: PrivacyParams) -> tuple[float, float, float]:
    """Loss on an Erdos-Renyi graph: ``(eps if neighbors, eps otherwise, P(neighbors))``."""
    a, D, s2 = params.alpha, params.delta, params.sigma2
    threshold = D * D * a * (a - 1) / 2.0
    if s2 < threshold:
        raise SigmaTooSmall(f"sigma2={s2} is below Delta^2 alpha (alpha - 1) / 2 = {threshold}")
    if not 0.0 < q < 1.0:
        raise InvalidParameter(f"q must lie in (0, 1), got {q}")
    if d_v < 1:
        raise InvalidParameter(f"degree must be >= 1, got {d_v}")
    if d_v >= n - 1:
        # a node adjacent to everyone has no non-neighbor to bound
        raise InvalidParameter(f"degree d_v={d_v} leaves no non-neighbor among n={n} nodes")
    if T < 1:
        raise InvalidParameter("T must be >= 1")
    near = gaussian_renyi_divergence(D, s2, a)
    far = a * D * D / s2 * T * d_v / (n - d_v)
    return near, far, q


def _node_set(nodes: Iterable[int], n: int, name: str) -> np.ndarray:
    arr = np.unique(np.asarray(list(nodes), dtype=np.int64))
    if arr.size == 0:
        raise InvalidParameter(f"{name} must be non-empty")
    if arr.min() < 0 or arr.max() >= n:
        raise InvalidParameter(f"{name} contains out-of-range nodes")
    return arr


def collusion_loss(sched: Schedule, u: int, V: Iterable[int], params: PrivacyParams) -> float:
    """Loss of ``u`` towards the union of the views of the colluding set ``V``.

    Each value ``x^t_w`` sent to at least one member of ``V`` counts once.
    """
    n = sched.n
    V = _node_set(V, n, "colluding set")
    if u in set(V.tolist()):
        raise InvalidParameter(f"u={u} belongs to the colluding set")
    inV = np.zeros(n)
    inV[V] = 1.0
    prod = _Product(n)
    total = 0.0
    for s in sched.steps:
        if isinstance(s, EdgeStep):
            for a, b in ((s.v, s.w), (s.w, s.v)):
                if inV[a]:
                    total += prod.M[b, u] ** 2 / prod.norm2[b]
            prod.apply_edge(s.v, s.w)
            continue
        A = sched.support(s.id)
        senders = np.flatnonzero(A @ inV > 0)
        if senders.size:
            total += float(np.sum(prod.M[senders, u] ** 2 / prod.norm2[senders]))
        prod.apply(sched.matrices[s.id], _nontrivial_rows(sched.matrices[s.id]))
    return params.per_message * total


def group_loss(sched: Schedule, U: Iterable[int], v: int, params: PrivacyParams) -> float:
    """Loss of the joint data of group ``U`` towards observer ``v``."""
    n = sched.n
    U = _node_set(U, n, "group")
    if v in set(U.tolist()):
        raise InvalidParameter(f"v={v} belongs to the group")
    prod = _Product(n)
    total = 0.0
    for t, s in enumerate(sched.steps):
        nbrs = sched.neighbors_at(t, v)
        if nbrs.size:
            Mg = prod.M[np.ix_(nbrs, U)]
            total += float(np.sum(np.sum(Mg * Mg, axis=1) / prod.norm2[nbrs]))
        if isinstance(s, EdgeStep):
            prod.apply_edge(s.v, s.w)
        else:
            prod.apply(sched.matrices[s.id], _nontrivial_rows(sched.matrices[s.id]))
    return params.per_message * total


def sgd_privacy_loss(W: GossipMatrix, T: int, K: int, delta_phi: float, sigma2: float,
                     alpha: float) -> PairwiseLossMatrix:
    """Ledger of ``T`` optimization rounds, each followed by ``K`` gossip steps on ``W``."""
    if T < 1 or K < 1:
        raise InvalidParameter("T and K must be >= 1")
    params = PrivacyParams(alpha, delta_phi, sigma2)
    return pairwise_loss_sync(W, K, params).scaled(T)


def sgd_privacy_loss_schedule(rounds: Sequence[tuple[GossipMatrix | sp.spmatrix, int]], delta_phi: float,
                              sigma2: float, alpha: float,
                              observers: Sequence[int] | None = None) -> PairwiseLossMatrix:
    """Ledger for time-varying rounds ``[(W_t, K_t), ...]``, composed additively.

    With ``observers`` only those columns of ``eps`` are computed (the others
    are left at 0) and the column identity is checked on them only.
    """
    if not rounds:
        raise InvalidParameter("need at least one round")
    params = PrivacyParams(alpha, delta_phi, sigma2)
    n = (rounds[0][0].n if isinstance(rounds[0][0], GossipMatrix) else rounds[0][0].shape[0])
    obs = np.arange(n) if observers is None else np.asarray(observers, dtype=np.int64)
    acc = np.zeros((len(obs), n))
    msg = np.zeros(len(obs), dtype=np.int64)
    for W, K in rounds:
        if K < 1:
            raise InvalidParameter("every round needs K >= 1")
        a, m = observer_terms(Schedule.constant(W, K), None if observers is None else obs)
        _check_terms(a, m)
        acc += a
        msg += m
    c = params.per_message
    eps = np.zeros((n, n))
    eps[:, obs] = c * acc.T
    self_loss = np.zeros(n)
    self_loss[obs] = eps[obs, obs]
    eps[obs, obs] = 0.0
    counts = np.zeros(n, dtype=np.int64)
    counts[obs] = msg
    plm = PairwiseLossMatrix(eps, counts, params, self_loss)
    if observers is None:
        plm.check_column_identity()
    else:
        res = plm.column_identity_residual()[obs]
        if res.max() > IDENTITY_RTOL:
            raise AccountingError(f"column identity violated (relative error {res.max():.3g})")
    return plm


def rdp_to_dp(alpha: float, eps: float, delta: float) -> float:
    """Convert an ``(alpha, eps)``-RDP guarantee to ``(eps', delta)``-DP."""
    if alpha <= 1:
        raise InvalidParameter("alpha must be > 1")
    if not 0.0 < delta < 1.0:
        raise InvalidParameter(f"delta must lie in (0, 1), got {delta}")
    return eps + math.log(1.0 / delta) / (alpha - 1.0)


def by_distance(plm: PairwiseLossMatrix, g: Graph) -> list[tuple[int, float, float, float]]:
    """``(distance, min, mean, max)`` of ``eps[u, v]`` over pairs ``u != v`` at each hop distance."""
    if g.n != plm.n:
        raise InvalidParameter("graph and ledger sizes differ")
    dist = all_pairs_distances(g)
    off = ~np.eye(g.n, dtype=bool)
    rows = []
    for d in np.unique(dist[off]):
        vals = plm.eps[(dist == d) & off]
        rows.append((int(d), float(vals.min()), float(vals.mean()), float(vals.max())))
    return rows
