"""Gossip matrices, spectral gaps and noisy gossip averaging.

Three protocols are simulated, all starting from noisy inputs
``x^0 = x + eta`` with ``eta ~ N(0, sigma2)`` per coordinate:

* synchronous, Chebyshev-accelerated gossip on a fixed matrix,
* randomized pairwise gossip (one edge averaged per step),
* plain gossip along an arbitrary time-varying :class:`Schedule`.

Noise is drawn from ``np.random.default_rng(seed)`` as an ``(n, D)`` array,
so draws are ordered node-major then coordinate-major.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidParameter, MultiplePerronEigenvalues, NormalizationFailure
from .graph import Graph, sample_erdos_renyi_edges

__all__ = [
    "GossipMatrix",
    "EdgeActivation",
    "MatrixStep",
    "EdgeStep",
    "Schedule",
    "AveragingRun",
    "hamilton_matrix",
    "hamilton_sparse",
    "lazy",
    "spectral_gap",
    "chebyshev_gamma",
    "chebyshev_average",
    "muffliato_sync",
    "t_stop_sync",
    "uniform_edge_activation",
    "muffliato_randomized",
    "t_stop_randomized",
    "dropout_schedule",
    "iter_dropout_matrices",
    "run_until_consensus",
    "run_schedule",
    "PERRON_TOL",
    "STOCHASTIC_TOL",
]

PERRON_TOL = 1e-9
STOCHASTIC_TOL = 1e-12
DENSE_EIG_LIMIT = 8192
ZERO_GAP_TOL = 1e-12


def _as_csr(a) -> sp.csr_matrix:
    return sp.csr_matrix(a, dtype=float)


def _check_gossip(W: sp.csr_matrix, graph: Graph | None, tol: float = STOCHASTIC_TOL) -> None:
    n = W.shape[0]
    if W.shape != (n, n):
        raise InvalidParameter(f"gossip matrix must be square, got {W.shape}")
    if W.nnz and W.data.min() < 0:
        raise InvalidParameter("gossip matrix has negative entries")
    asym = abs(W - W.T)
    if asym.nnz and asym.max() > tol:
        raise InvalidParameter(f"gossip matrix is not symmetric (max |W - W^T| = {asym.max():.3g})")
    rows = np.asarray(W.sum(axis=1)).ravel()
    dev = np.abs(rows - 1.0).max()
    if dev > tol:
        raise InvalidParameter(f"gossip matrix rows do not sum to 1 (max deviation {dev:.3g})")
    if graph is not None:
        if graph.n != n:
            raise InvalidParameter(f"matrix size {n} does not match graph with n={graph.n}")
        supp = W.copy()
        supp.setdiag(0)
        supp.eliminate_zeros()
        supp.data[:] = 1.0
        extra = (supp - supp.multiply(graph.adjacency_matrix())).tocoo()
        extra.eliminate_zeros()
        if extra.nnz:
            raise InvalidParameter(
                f"weight on ({extra.row[0]}, {extra.col[0]}) which is not an edge of the graph"
            )


class GossipMatrix:
    """Symmetric stochastic matrix supported on a graph.

    Stored sparse; ``entries`` gives a dense copy. The spectral gap is
    computed on first access and cached.
    """

    def __init__(self, entries, graph: Graph | None = None, validate: bool = True):
        self.sparse = _as_csr(entries)
        self.sparse.eliminate_zeros()
        self.graph = graph
        if validate:
            _check_gossip(self.sparse, graph)

    @property
    def n(self) -> int:
        return self.sparse.shape[0]

    @cached_property
    def entries(self) -> np.ndarray:
        return self.sparse.toarray()

    @cached_property
    def spectral_gap(self) -> float:
        return spectral_gap(self)

    @cached_property
    def off_diagonal_support(self) -> sp.csr_matrix:
        """0/1 adjacency of the communication graph implied by ``W``."""
        a = self.sparse.copy()
        a.setdiag(0)
        a.eliminate_zeros()
        a.data[:] = 1.0
        return a

    def __matmul__(self, x):
        return self.sparse @ x

    def __repr__(self):
        return f"GossipMatrix(n={self.n}, nnz={self.sparse.nnz})"


def hamilton_sparse(n: int, edges: np.ndarray, degrees: np.ndarray | None = None,
                    weights: str = "hamilton") -> sp.csr_matrix:
    """Hamilton weights ``min(1/d_v, 1/d_w)`` for ``edges``; diagonal absorbs the rest.

    ``weights="metropolis"`` uses ``min(1/(d_v+1), 1/(d_w+1))`` instead, which
    averages (rather than swaps) the endpoints of an isolated edge. Nodes
    without edges get a unit diagonal.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if degrees is None:
        degrees = np.bincount(edges.ravel(), minlength=n)
    if weights not in ("hamilton", "metropolis"):
        raise InvalidParameter(f"unknown weight rule {weights!r}")
    u, w = edges[:, 0], edges[:, 1]
    wt = 1.0 / (np.maximum(degrees[u], degrees[w]) + (weights == "metropolis"))
    diag = 1.0 - np.bincount(u, wt, n) - np.bincount(w, wt, n)
    # e.g. 1 - 3*(1/3) rounds to -5.6e-17
    diag[np.abs(diag) < 1e-14] = 0.0
    rows = np.concatenate([u, w, np.arange(n)])
    cols = np.concatenate([w, u, np.arange(n)])
    data = np.concatenate([wt, wt, diag])
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def hamilton_matrix(g: Graph, weights: str = "hamilton") -> GossipMatrix:
    return GossipMatrix(hamilton_sparse(g.n, g.edge_array, g.degrees, weights), graph=g)


def lazy(W: GossipMatrix) -> GossipMatrix:
    """``(I + W) / 2``; removes the eigenvalue -1 of bipartite gossip matrices."""
    L = (sp.identity(W.n, format="csr") + W.sparse) * 0.5
    return GossipMatrix(L, graph=W.graph)


def _gap_from_eigs(eigs: np.ndarray) -> float:
    eigs = np.sort(eigs)
    if abs(eigs[-1] - 1.0) > PERRON_TOL:
        raise InvalidParameter(f"largest eigenvalue {eigs[-1]!r} is not 1: matrix is not stochastic")
    if len(eigs) > 1 and eigs[-2] > 1.0 - PERRON_TOL:
        raise MultiplePerronEigenvalues(
            f"second eigenvalue {eigs[-2]!r} is within {PERRON_TOL} of 1: the graph is disconnected"
        )
    rest = eigs[:-1]
    if rest.size == 0:
        return 1.0
    gap = float(np.min(1.0 - np.abs(rest)))
    # an eigenvalue at -1 comes back as -1 + O(eps); report it as an exact 0
    return 0.0 if gap < ZERO_GAP_TOL else min(gap, 1.0)


def spectral_gap(W: GossipMatrix | np.ndarray | sp.spmatrix, method: str = "dense") -> float:
    """``min(1 - |mu|)`` over the eigenvalues ``mu`` other than the Perron eigenvalue.

    ``method="sparse"`` uses a Lanczos solver for the two extreme
    non-trivial eigenvalues; it is faster for large sparse matrices but only
    accurate to the solver tolerance.
    """
    if isinstance(W, GossipMatrix):
        if method == "dense" and "entries" not in W.__dict__ and W.n > DENSE_EIG_LIMIT:
            method = "sparse"
        mat = W.entries if method == "dense" else W.sparse
    else:
        mat = W
    if method == "dense":
        a = mat.toarray() if sp.issparse(mat) else np.asarray(mat, dtype=float)
        return _gap_from_eigs(np.linalg.eigvalsh(a))
    if method != "sparse":
        raise InvalidParameter(f"unknown eigen method {method!r}")
    a = _as_csr(mat)
    n = a.shape[0]
    if n <= 3:
        return _gap_from_eigs(np.linalg.eigvalsh(a.toarray()))
    v0 = np.full(n, 1.0 / math.sqrt(n))
    top = spla.eigsh(a, k=2, which="LA", v0=v0 + 1e-3 * np.cos(np.arange(n)), return_eigenvectors=False, tol=1e-12)
    low = spla.eigsh(a, k=1, which="SA", v0=v0 + 1e-3 * np.cos(np.arange(n)), return_eigenvectors=False, tol=1e-12)
    return _gap_from_eigs(np.concatenate([np.sort(top), low]))


def chebyshev_gamma(gap: float) -> float:
    """Heavy-ball scale of the re-scaled Chebyshev recursion for spectral gap ``gap``."""
    if not 0.0 < gap <= 1.0:
        if gap == 0.0:
            raise InvalidParameter("spectral gap is 0; acceleration is undefined (use lazy(W))")
        raise InvalidParameter(f"spectral gap must lie in (0, 1], got {gap}")
    return 2.0 * (1.0 - math.sqrt(gap * (1.0 - gap / 4.0))) / (1.0 - gap / 2.0) ** 2


def _gap_of(W) -> float:
    return W.spectral_gap if isinstance(W, GossipMatrix) else float(W)


# --------------------------------------------------------------------------
# synchronous protocol
# --------------------------------------------------------------------------


@dataclass
class AveragingRun:
    """Outcome of a noisy gossip-averaging simulation.

    ``mse_per_step[t]`` is ``(1/n) sum_v ||x^t_v - xbar||^2`` where ``xbar``
    is the mean of the noiseless inputs. ``trajectory`` has shape
    ``(T+1, n, D)``, or ``None`` when only the final state was kept.
    """

    x: np.ndarray
    noise: np.ndarray
    sigma2: float
    seed: object
    mse_per_step: np.ndarray
    final_state: np.ndarray
    trajectory: np.ndarray | None = None

    @property
    def T(self) -> int:
        return len(self.mse_per_step) - 1

    @property
    def x_bar(self) -> np.ndarray:
        return self.x.mean(axis=0)

    @property
    def final_mse(self) -> float:
        return float(self.mse_per_step[-1])

    def to_dict(self, include_final_state: bool = False) -> dict:
        out = {
            "seed": self.seed if isinstance(self.seed, (int, type(None))) else str(self.seed),
            "sigma2": self.sigma2,
            "T": self.T,
            "mse_per_step": [float(m) for m in self.mse_per_step],
        }
        if include_final_state:
            out["final_state"] = self.final_state.tolist()
        return out


def _as_nodes(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise InvalidParameter(f"inputs must have shape (n,) or (n, D), got {x.shape}")
    return x


def _draw_noise(rng: np.random.Generator, shape, sigma2: float) -> np.ndarray:
    if sigma2 < 0:
        raise InvalidParameter(f"sigma2 must be >= 0, got {sigma2}")
    return math.sqrt(sigma2) * rng.standard_normal(shape)


class _Recorder:
    def __init__(self, x: np.ndarray, T: int, keep: bool):
        self.xbar = x.mean(axis=0)
        self.mse = np.empty(T + 1)
        self.traj = np.empty((T + 1,) + x.shape) if keep else None

    def __call__(self, t: int, state: np.ndarray):
        d = state - self.xbar
        self.mse[t] = np.einsum("ij,ij->", d, d) / state.shape[0]
        if self.traj is not None:
            self.traj[t] = state


def chebyshev_average(x0: np.ndarray, W: GossipMatrix, T: int, gamma: float | None = None, record=None):
    """Noiseless accelerated gossip from ``x0``: returns ``x^T``.

    ``x^1 = W x^0`` and ``x^{t+1} = gamma W x^t + (1 - gamma) x^{t-1}``.
    """
    if T < 0:
        raise InvalidParameter("T must be >= 0")
    if W.n == 1:
        if record is not None:
            for t in range(T + 1):
                record(t, x0)
        return x0.copy()
    if gamma is None:
        gamma = chebyshev_gamma(W.spectral_gap)
    prev, cur = None, x0
    if record is not None:
        record(0, cur)
    for t in range(T):
        if t == 0:
            nxt = W @ cur
        else:
            nxt = gamma * (W @ cur) + (1.0 - gamma) * prev
        prev, cur = cur, nxt
        if record is not None:
            record(t + 1, cur)
    return cur


def muffliato_sync(x, W: GossipMatrix, T: int, sigma2: float, seed=None,
                   keep_trajectory: bool = True, gamma: float | None = None) -> AveragingRun:
    """Chebyshev-accelerated Muffliato: noisy inputs followed by ``T`` gossip steps."""
    x = _as_nodes(x)
    if x.shape[0] != W.n:
        raise InvalidParameter(f"{x.shape[0]} inputs for a gossip matrix over {W.n} nodes")
    rng = np.random.default_rng(seed)
    eta = _draw_noise(rng, x.shape, sigma2)
    rec = _Recorder(x, T, keep_trajectory)
    final = chebyshev_average(x + eta, W, T, gamma=gamma, record=rec)
    return AveragingRun(x, eta, sigma2, seed, rec.mse, final, rec.traj)


def _stop_time(rate: float, n: int, x, sigma2: float, D: int | None) -> int:
    if sigma2 <= 0:
        raise InvalidParameter(f"sigma2 must be > 0 for a stopping time, got {sigma2}")
    x = _as_nodes(x)
    if D is None:
        D = x.shape[1]
    if x.shape[0] != n:
        raise InvalidParameter(f"{x.shape[0]} inputs for {n} nodes")
    spread = float(((x - x.mean(axis=0)) ** 2).sum() / n)
    arg = (n / (D * sigma2)) * max(D * sigma2, spread)
    return max(1, math.ceil(math.log(arg) / rate))


def t_stop_sync(W, x, sigma2: float, D: int | None = None) -> int:
    """Stopping time of accelerated gossip; ``W`` may be a matrix or its gap."""
    gap = _gap_of(W)
    if gap <= 0:
        raise InvalidParameter("spectral gap is 0 (use lazy(W))")
    x = _as_nodes(x)
    return _stop_time(math.sqrt(gap), x.shape[0], x, sigma2, D)


# --------------------------------------------------------------------------
# schedules
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MatrixStep:
    id: int


@dataclass(frozen=True)
class EdgeStep:
    v: int
    w: int


Step = Union[MatrixStep, EdgeStep]


@dataclass
class Schedule:
    """Time-indexed gossip: full matrices (by id into ``matrices``) or single edges.

    At step ``t`` every node ``v`` observes ``x^t_w`` for each neighbor
    ``w`` of ``v`` in the step's communication graph, then ``x^{t+1} = W_t x^t``.
    An edge step ``{v, w}`` has matrix ``I - (e_v - e_w)(e_v - e_w)^T / 2``.
    """

    n: int
    steps: list[Step]
    matrices: list[sp.csr_matrix] = field(default_factory=list)

    def __post_init__(self):
        self.matrices = [_as_csr(m) for m in self.matrices]
        for m in self.matrices:
            if m.shape != (self.n, self.n):
                raise InvalidParameter(f"schedule matrix of shape {m.shape} for n={self.n}")
        for s in self.steps:
            if isinstance(s, MatrixStep):
                if not 0 <= s.id < len(self.matrices):
                    raise InvalidParameter(f"unknown matrix id {s.id}")
            elif isinstance(s, EdgeStep):
                if s.v == s.w or not (0 <= s.v < self.n and 0 <= s.w < self.n):
                    raise InvalidParameter(f"invalid edge step ({s.v}, {s.w})")
            else:
                raise InvalidParameter(f"unknown step type {type(s).__name__}")
        self._support: dict[int, sp.csr_matrix] = {}

    @classmethod
    def constant(cls, W: GossipMatrix | sp.spmatrix, T: int) -> Schedule:
        m = W.sparse if isinstance(W, GossipMatrix) else W
        return cls(m.shape[0], [MatrixStep(0)] * T, [m])

    @classmethod
    def from_matrices(cls, mats) -> Schedule:
        mats = [m.sparse if isinstance(m, GossipMatrix) else m for m in mats]
        if not mats:
            raise InvalidParameter("need at least one matrix")
        return cls(mats[0].shape[0], [MatrixStep(i) for i in range(len(mats))], mats)

    @classmethod
    def from_edges(cls, n: int, edges) -> Schedule:
        return cls(n, [EdgeStep(int(v), int(w)) for v, w in edges])

    @property
    def T(self) -> int:
        return len(self.steps)

    def support(self, mid: int) -> sp.csr_matrix:
        """Off-diagonal 0/1 support of matrix ``mid``."""
        if mid not in self._support:
            a = self.matrices[mid].copy()
            a.setdiag(0)
            a.eliminate_zeros()
            a.data[:] = 1.0
            self._support[mid] = a
        return self._support[mid]

    def step_matrix(self, t: int) -> sp.csr_matrix:
        s = self.steps[t]
        if isinstance(s, MatrixStep):
            return self.matrices[s.id]
        m = sp.lil_matrix((self.n, self.n))
        m.setdiag(1.0)
        m[s.v, s.v] = m[s.w, s.w] = 0.5
        m[s.v, s.w] = m[s.w, s.v] = 0.5
        return m.tocsr()

    def neighbors_at(self, t: int, v: int) -> np.ndarray:
        s = self.steps[t]
        if isinstance(s, EdgeStep):
            if v == s.v:
                return np.array([s.w])
            if v == s.w:
                return np.array([s.v])
            return np.array([], dtype=np.int64)
        a = self.support(s.id)
        return a.indices[a.indptr[v]:a.indptr[v + 1]].copy()

    def observation_set(self, v: int, w: int) -> list[int]:
        """Steps ``t`` at which ``{v, w}`` communicates."""
        out = []
        for t, s in enumerate(self.steps):
            if isinstance(s, EdgeStep):
                if {s.v, s.w} == {v, w}:
                    out.append(t)
            elif self.support(s.id)[v, w] != 0:
                out.append(t)
        return out

    def msg_count(self) -> np.ndarray:
        """Number of messages each node receives over the whole schedule."""
        cnt = np.zeros(self.n, dtype=np.int64)
        deg_cache: dict[int, np.ndarray] = {}
        for s in self.steps:
            if isinstance(s, EdgeStep):
                cnt[s.v] += 1
                cnt[s.w] += 1
            else:
                if s.id not in deg_cache:
                    deg_cache[s.id] = np.diff(self.support(s.id).indptr)
                cnt += deg_cache[s.id]
        return cnt

    def truncate(self, T: int) -> Schedule:
        if not 0 <= T <= self.T:
            raise InvalidParameter(f"cannot truncate a schedule of length {self.T} to {T}")
        return Schedule(self.n, list(self.steps[:T]), self.matrices)

    def to_json(self) -> dict:
        steps = [
            {"type": "matrix", "id": s.id} if isinstance(s, MatrixStep) else {"type": "edge", "v": s.v, "w": s.w}
            for s in self.steps
        ]
        mats = []
        for m in self.matrices:
            c = m.tocoo()
            mats.append({"rows": c.row.tolist(), "cols": c.col.tolist(), "data": c.data.tolist()})
        return {"n": self.n, "steps": steps, "matrices": mats}

    @classmethod
    def from_json(cls, obj: dict | str) -> Schedule:
        if isinstance(obj, str):
            obj = json.loads(obj)
        n = int(obj["n"])
        steps: list[Step] = []
        for s in obj["steps"]:
            if s["type"] == "matrix":
                steps.append(MatrixStep(int(s["id"])))
            elif s["type"] == "edge":
                steps.append(EdgeStep(int(s["v"]), int(s["w"])))
            else:
                raise InvalidParameter(f"unknown step type {s['type']!r}")
        mats = [sp.csr_matrix((m["data"], (m["rows"], m["cols"])), shape=(n, n)) for m in obj.get("matrices", [])]
        return cls(n, steps, mats)


def _apply_edge(state: np.ndarray, v: int, w: int) -> None:
    mid = 0.5 * (state[v] + state[w])
    state[v] = mid
    state[w] = mid


def run_schedule(x, sched: Schedule, sigma2: float, seed=None, keep_trajectory: bool = True) -> AveragingRun:
    """Plain (non-accelerated) gossip along ``sched`` from noisy inputs."""
    x = _as_nodes(x)
    if x.shape[0] != sched.n:
        raise InvalidParameter(f"{x.shape[0]} inputs for a schedule over {sched.n} nodes")
    rng = np.random.default_rng(seed)
    eta = _draw_noise(rng, x.shape, sigma2)
    return _replay(x, eta, sched, sigma2, seed, keep_trajectory)


def _replay(x, eta, sched: Schedule, sigma2, seed, keep) -> AveragingRun:
    rec = _Recorder(x, sched.T, keep)
    state = x + eta
    rec(0, state)
    for t, s in enumerate(sched.steps):
        if isinstance(s, EdgeStep):
            _apply_edge(state, s.v, s.w)
        else:
            state = sched.matrices[s.id] @ state
        rec(t + 1, state)
    return AveragingRun(x, eta, sigma2, seed, rec.mse, state.copy(), rec.traj)


# --------------------------------------------------------------------------
# randomized protocol
# --------------------------------------------------------------------------


@dataclass
class EdgeActivation:
    """Edge sampling distribution for randomized gossip."""

    n: int
    edges: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.p = np.asarray(self.p, dtype=float)
        if len(self.p) != len(self.edges):
            raise InvalidParameter("one probability per edge required")
        if len(self.p) == 0:
            raise InvalidParameter("edge activation needs at least one edge")
        if self.p.min() < 0:
            raise InvalidParameter("negative activation probability")
        if abs(self.p.sum() - 1.0) > STOCHASTIC_TOL:
            raise NormalizationFailure(f"activation probabilities sum to {self.p.sum()!r}, not 1")

    @property
    def node_totals(self) -> np.ndarray:
        """``pi_v``: probability that node ``v`` takes part in a step."""
        return np.bincount(self.edges[:, 0], self.p, self.n) + np.bincount(self.edges[:, 1], self.p, self.n)

    def expected_matrix(self) -> np.ndarray:
        """``I - sum_e p_e (e_v - e_w)(e_v - e_w)^T / 2``."""
        E = np.eye(self.n)
        v, w = self.edges[:, 0], self.edges[:, 1]
        h = 0.5 * self.p
        np.add.at(E, (v, v), -h)
        np.add.at(E, (w, w), -h)
        np.add.at(E, (v, w), h)
        np.add.at(E, (w, v), h)
        return E

    @cached_property
    def spectral_gap(self) -> float:
        return spectral_gap(self.expected_matrix())


def uniform_edge_activation(W: GossipMatrix, renormalize: bool = False) -> EdgeActivation:
    """Activation probabilities ``2 W_vw / n`` on the edges of ``W``."""
    c = sp.triu(W.sparse, k=1).tocoo()
    keep = c.data > 0
    edges = np.stack([c.row[keep], c.col[keep]], axis=1)
    p = 2.0 * c.data[keep] / W.n
    total = p.sum()
    if abs(total - 1.0) > PERRON_TOL:
        if not renormalize:
            raise NormalizationFailure(
                f"2W/n sums to {total:.12g} over the edges, not 1 (pass renormalize=True to rescale)"
            )
    # exact renormalisation also removes rounding drift below the tolerance
    p = p / total
    return EdgeActivation(W.n, edges, p)


def muffliato_randomized(x, act: EdgeActivation, T: int, sigma2: float, seed=None,
                         keep_trajectory: bool = True) -> tuple[AveragingRun, Schedule]:
    """Randomized Muffliato: noisy inputs then ``T`` random pairwise averages.

    Noise is drawn first, then the ``T`` edge indices, from the same
    generator; :func:`run_schedule` on the returned schedule with the same
    seed replays the run exactly.
    """
    if T < 0:
        raise InvalidParameter("T must be >= 0")
    x = _as_nodes(x)
    if x.shape[0] != act.n:
        raise InvalidParameter(f"{x.shape[0]} inputs for an activation over {act.n} nodes")
    rng = np.random.default_rng(seed)
    eta = _draw_noise(rng, x.shape, sigma2)
    idx = rng.choice(len(act.p), size=T, p=act.p)
    sched = Schedule.from_edges(act.n, act.edges[idx])
    return _replay(x, eta, sched, sigma2, seed, keep_trajectory), sched


def t_stop_randomized(act: EdgeActivation | float, x, sigma2: float, D: int | None = None) -> int:
    gap = act.spectral_gap if isinstance(act, EdgeActivation) else float(act)
    if gap <= 0:
        raise InvalidParameter("activation spectral gap is 0")
    x = _as_nodes(x)
    return _stop_time(gap, x.shape[0], x, sigma2, D)


# --------------------------------------------------------------------------
# dropout
# --------------------------------------------------------------------------


def iter_dropout_matrices(n: int, q: float, dropout_rate: float, seed=None, weights: str = "hamilton"):
    """Endless stream of dropout gossip matrices (see :func:`dropout_schedule`)."""
    if not 0.0 <= dropout_rate < 1.0:
        raise InvalidParameter(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
    if not 0.0 <= q <= 1.0:
        raise InvalidParameter(f"q must lie in [0, 1], got {q}")
    rng = np.random.default_rng(seed)
    while True:
        active = np.flatnonzero(rng.random(n) >= dropout_rate)
        edges = sample_erdos_renyi_edges(active, q, rng)
        yield hamilton_sparse(n, edges, weights=weights)


def dropout_schedule(n: int, q: float, dropout_rate: float, T: int, seed=None,
                     weights: str = "hamilton") -> Schedule:
    """Time-varying gossip with node dropout.

    Each step, every node is independently active with probability
    ``1 - dropout_rate``; a fresh ER(q) graph is drawn over the active nodes
    and its Hamilton matrix is used, with identity rows for inactive and
    isolated nodes. Steps need not be connected.
    """
    if T < 0:
        raise InvalidParameter("T must be >= 0")
    stream = iter_dropout_matrices(n, q, dropout_rate, seed, weights)
    mats = [next(stream) for _ in range(T)]
    return Schedule.from_matrices(mats) if mats else Schedule(n, [], [])


def run_until_consensus(x, matrices, sigma2: float, seed=None, tol: float = 0.1,
                        max_steps: int = 100_000) -> tuple[AveragingRun, Schedule]:
    """Plain gossip along ``matrices`` until nodes agree.

    Stops at the first ``t`` where ``(1/n) sum_v ||x^t_v - mean(x^0)||^2``
    is at most ``tol * sigma2 / n`` (or ``tol / n**2`` when ``sigma2 = 0``).
    Returns the run and the schedule of the steps actually used.
    """
    x = _as_nodes(x)
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    eta = _draw_noise(rng, x.shape, sigma2)
    state = x + eta
    centre = state.mean(axis=0)
    target = tol * (sigma2 if sigma2 > 0 else 1.0 / n) / n
    xbar = x.mean(axis=0)
    mse = [float(((state - xbar) ** 2).sum() / n)]
    used = []
    it = iter(matrices)
    while ((state - centre) ** 2).sum() / n > target:
        if len(used) >= max_steps:
            break
        try:
            W = next(it)
        except StopIteration:
            break
        state = W @ state
        used.append(W)
        mse.append(float(((state - xbar) ** 2).sum() / n))
    sched = Schedule.from_matrices(used) if used else Schedule(n, [], [])
    return AveragingRun(x, eta, sigma2, seed, np.array(mse), state), sched
