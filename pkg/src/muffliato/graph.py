"""Communication graphs: generators, edge-list ingestion and hop distances.

Graphs are immutable, undirected and simple. Random generators are pure
functions of their parameters and seed; when a sampled graph is
disconnected they resample with a derived seed (up to ``max_attempts``).
"""
from __future__ import annotations

import itertools
import json
import math
from collections import deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DisconnectedAfterRetries, DisconnectedGraph, EmptyInput, InvalidParameter

__all__ = [
    "Graph",
    "DistanceTable",
    "UNREACHABLE",
    "MAX_ATTEMPTS",
    "gen_hypercube",
    "gen_erdos_renyi",
    "sample_erdos_renyi_edges",
    "gen_ring",
    "gen_path",
    "gen_star",
    "gen_grid",
    "gen_complete",
    "gen_torus",
    "gen_geometric",
    "from_edge_list",
    "bfs_distances",
    "all_pairs_distances",
    "read_edge_list",
    "write_edge_list",
    "graph_to_json",
    "graph_from_json",
]

UNREACHABLE = np.iinfo(np.int64).max
MAX_ATTEMPTS = 100


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected simple graph on nodes ``0..n-1``.

    ``edges`` is normalised on construction to a sorted tuple of ``(u, w)``
    pairs with ``u < w``. Self-loops and duplicate edges are rejected here;
    use :func:`from_edge_list` to clean raw data.
    """

    n: int
    edges: tuple[tuple[int, int], ...]
    positions: np.ndarray | None = None
    adjacency: tuple[tuple[int, ...], ...] = field(init=False, repr=False)
    degrees: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise InvalidParameter(f"graph needs at least one node, got n={self.n}")
        norm = []
        for u, w in self.edges:
            u, w = int(u), int(w)
            if u == w:
                raise InvalidParameter(f"self-loop on node {u}")
            if not (0 <= u < self.n and 0 <= w < self.n):
                raise InvalidParameter(f"edge ({u}, {w}) out of range for n={self.n}")
            norm.append((u, w) if u < w else (w, u))
        norm.sort()
        for a, b in zip(norm, norm[1:]):
            if a == b:
                raise InvalidParameter(f"duplicate edge {a}")
        nbrs: list[list[int]] = [[] for _ in range(self.n)]
        for u, w in norm:
            nbrs[u].append(w)
            nbrs[w].append(u)
        object.__setattr__(self, "edges", tuple(norm))
        object.__setattr__(self, "adjacency", tuple(tuple(sorted(a)) for a in nbrs))
        object.__setattr__(self, "degrees", np.array([len(a) for a in nbrs], dtype=np.int64))
        if self.positions is not None:
            pos = np.asarray(self.positions, dtype=float)
            if pos.shape != (self.n, 2):
                raise InvalidParameter(f"positions must have shape ({self.n}, 2)")
            object.__setattr__(self, "positions", pos)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def connected(self) -> bool:
        dist = bfs_distances(self, 0).dist
        return bool(np.all(dist != UNREACHABLE))

    @cached_property
    def edge_array(self) -> np.ndarray:
        """Edges as an ``(m, 2)`` integer array."""
        return np.array(self.edges, dtype=np.int64).reshape(-1, 2)

    def adjacency_matrix(self) -> sp.csr_matrix:
        e = self.edge_array
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        data = np.ones(len(rows))
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))

    def has_edge(self, u: int, w: int) -> bool:
        nb = self.adjacency[u]
        i = np.searchsorted(nb, w)
        return i < len(nb) and nb[i] == w

    def same_as(self, other: Graph) -> bool:
        return self.n == other.n and self.edges == other.edges


@dataclass(frozen=True)
class DistanceTable:
    source: int
    dist: np.ndarray


def _require_connected(g: Graph) -> Graph:
    if not g.connected:
        raise DisconnectedGraph("graph is disconnected")
    return g


# --------------------------------------------------------------------------
# deterministic topologies
# --------------------------------------------------------------------------


def gen_hypercube(log2_n: int) -> Graph:
    if log2_n < 1:
        raise InvalidParameter("log2_n must be >= 1")
    n = 1 << log2_n
    edges = [(u, u ^ (1 << b)) for u in range(n) for b in range(log2_n) if u < u ^ (1 << b)]
    return Graph(n, tuple(edges))


def gen_complete(n: int) -> Graph:
    if n < 1:
        raise InvalidParameter("n must be >= 1")
    return Graph(n, tuple(itertools.combinations(range(n), 2)))


def gen_ring(n: int) -> Graph:
    if n < 3:
        raise InvalidParameter("ring needs n >= 3")
    return Graph(n, tuple((i, (i + 1) % n) for i in range(n)))


def gen_path(n: int) -> Graph:
    if n < 1:
        raise InvalidParameter("n must be >= 1")
    return Graph(n, tuple((i, i + 1) for i in range(n - 1)))


def gen_star(leaves: int) -> Graph:
    """Star with centre 0 and ``leaves`` leaf nodes."""
    if leaves < 1:
        raise InvalidParameter("star needs at least one leaf")
    return Graph(leaves + 1, tuple((0, i) for i in range(1, leaves + 1)))


def _lattice(dims: Sequence[int], wrap: bool) -> Graph:
    dims = [int(d) for d in dims]
    if not dims or any(d < 1 for d in dims):
        raise InvalidParameter(f"every dimension must be >= 1, got {dims}")
    n = math.prod(dims)
    strides = np.cumprod([1] + dims[::-1][:-1])[::-1]
    edges = set()
    for idx in itertools.product(*(range(d) for d in dims)):
        u = int(np.dot(idx, strides))
        for axis, d in enumerate(dims):
            nxt = idx[axis] + 1
            if nxt == d:
                if not wrap or d < 3:
                    # side 2 would duplicate the direct edge; side 1 has none
                    continue
                nxt = 0
            w = u + (nxt - idx[axis]) * int(strides[axis])
            edges.add((min(u, w), max(u, w)))
    return Graph(n, tuple(edges))


def gen_grid(rows: int, cols: int) -> Graph:
    return _lattice([rows, cols], wrap=False)


def gen_torus(dims: Sequence[int]) -> Graph:
    return _lattice(dims, wrap=True)


# --------------------------------------------------------------------------
# random topologies
# --------------------------------------------------------------------------


def _attempt_rng(seed, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(attempt,)))


def _triu_pair(lin: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column of linear indices into the strict upper triangle of a k x k matrix (row-major)."""
    b = 2 * k - 1
    i = np.floor((b - np.sqrt(b * b - 8.0 * lin)) / 2).astype(np.int64)
    start = i * k - i * (i + 1) // 2
    # guard float rounding of the square root
    over = start > lin
    i[over] -= 1
    start = i * k - i * (i + 1) // 2
    nxt = (i + 1) * k - (i + 1) * (i + 2) // 2
    under = nxt <= lin
    i[under] += 1
    start = i * k - i * (i + 1) // 2
    return i, lin - start + i + 1


def sample_erdos_renyi_edges(nodes: np.ndarray | int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(q) edges over ``nodes``; no connectivity check.

    The edge count is drawn from Binomial(k(k-1)/2, q) and the edge set
    uniformly among sets of that size, which is the same law as one coin
    per pair but costs O(edges). Returns an ``(m, 2)`` array of node ids.
    """
    nodes = np.arange(nodes) if np.isscalar(nodes) else np.asarray(nodes)
    k = len(nodes)
    if k < 2:
        return np.empty((0, 2), dtype=np.int64)
    total = k * (k - 1) // 2
    m = rng.binomial(total, q)
    lin = np.sort(rng.choice(total, size=m, replace=False))
    i, j = _triu_pair(lin, k)
    return np.stack([nodes[i], nodes[j]], axis=1).astype(np.int64)


def gen_erdos_renyi(n: int, q: float, seed=None, max_attempts: int = MAX_ATTEMPTS) -> Graph:
    if n < 2:
        raise InvalidParameter("Erdos-Renyi graph needs n >= 2")
    if not 0.0 <= q <= 1.0:
        raise InvalidParameter(f"edge probability must lie in [0, 1], got {q}")
    for attempt in range(max_attempts):
        edges = sample_erdos_renyi_edges(n, q, _attempt_rng(seed, attempt))
        g = Graph(n, tuple(map(tuple, edges)))
        if g.connected:
            return g
    raise DisconnectedAfterRetries(
        f"ER(n={n}, q={q}) disconnected after {max_attempts} attempts; q is likely too small"
    )


def gen_geometric(n: int, radius: float, seed=None, max_attempts: int = MAX_ATTEMPTS) -> Graph:
    """Random geometric graph in the unit square; edge iff distance < radius."""
    if n < 1:
        raise InvalidParameter("n must be >= 1")
    if not 0.0 < radius <= math.sqrt(2.0):
        raise InvalidParameter(f"radius must lie in (0, sqrt(2)], got {radius}")
    for attempt in range(max_attempts):
        pos = _attempt_rng(seed, attempt).random((n, 2))
        d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
        iu, iw = np.triu_indices(n, 1)
        keep = d2[iu, iw] < radius * radius
        g = Graph(n, tuple(zip(iu[keep].tolist(), iw[keep].tolist())), positions=pos)
        if g.connected:
            return g
    raise DisconnectedAfterRetries(
        f"geometric graph (n={n}, radius={radius}) disconnected after {max_attempts} attempts"
    )


# --------------------------------------------------------------------------
# ingestion
# --------------------------------------------------------------------------


def _components(n: int, adjacency) -> list[list[int]]:
    seen = np.zeros(n, dtype=bool)
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        seen[s] = True
        comp, queue = [s], deque([s])
        while queue:
            x = queue.popleft()
            for y in adjacency[x]:
                if not seen[y]:
                    seen[y] = True
                    comp.append(y)
                    queue.append(y)
        comps.append(comp)
    return comps


def from_edge_list(pairs: Iterable[tuple[int, int]], giant_component: bool = False) -> Graph:
    """Build a graph from raw node-id pairs.

    Self-loops and duplicates are dropped and ids are compacted to
    ``0..n-1`` in order of first appearance. With ``giant_component`` the
    largest connected component is kept (ties go to the component holding
    the smallest original id); otherwise a disconnected input raises.
    """
    ids: dict[int, int] = {}
    original: list[int] = []
    raw = []
    for a, b in pairs:
        a, b = int(a), int(b)
        if a < 0 or b < 0:
            raise InvalidParameter(f"node ids must be non-negative, got ({a}, {b})")
        for x in (a, b):
            if x not in ids:
                ids[x] = len(original)
                original.append(x)
        raw.append((ids[a], ids[b]))
    if not original:
        raise EmptyInput("edge list is empty")
    edges = {(min(a, b), max(a, b)) for a, b in raw if a != b}
    g = Graph(len(original), tuple(edges))
    if g.connected:
        return g
    if not giant_component:
        raise DisconnectedGraph("edge list describes a disconnected graph (use giant_component=True)")
    comps = _components(g.n, g.adjacency)
    best = max(comps, key=lambda c: (len(c), -min(original[i] for i in c)))
    # keep first-appearance order inside the component
    keep = sorted(best)
    remap = {old: new for new, old in enumerate(keep)}
    sub = [(remap[u], remap[w]) for u, w in g.edges if u in remap and w in remap]
    return Graph(len(keep), tuple(sub))


def read_edge_list(path: str | Path, giant_component: bool = False) -> Graph:
    """Whitespace-separated integer pairs, one per line; ``#`` lines are comments."""
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise InvalidParameter(f"{path}:{lineno}: expected two node ids")
            pairs.append((int(parts[0]), int(parts[1])))
    return from_edge_list(pairs, giant_component=giant_component)


def write_edge_list(g: Graph, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# n={g.n} m={g.num_edges}\n")
        for u, w in g.edges:
            fh.write(f"{u} {w}\n")


def graph_to_json(g: Graph) -> dict:
    out = {"n": g.n, "edges": [list(e) for e in g.edges]}
    if g.positions is not None:
        out["positions"] = g.positions.tolist()
    return out


def graph_from_json(obj: dict | str) -> Graph:
    if isinstance(obj, str):
        obj = json.loads(obj)
    return Graph(int(obj["n"]), tuple(tuple(e) for e in obj["edges"]), positions=obj.get("positions"))


# --------------------------------------------------------------------------
# distances
# --------------------------------------------------------------------------


def bfs_distances(g: Graph, source: int) -> DistanceTable:
    if not 0 <= source < g.n:
        raise InvalidParameter(f"source {source} out of range")
    dist = np.full(g.n, UNREACHABLE, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        x = queue.popleft()
        for y in g.adjacency[x]:
            if dist[y] == UNREACHABLE:
                dist[y] = dist[x] + 1
                queue.append(y)
    return DistanceTable(source, dist)


def all_pairs_distances(g: Graph) -> np.ndarray:
    """``(n, n)`` hop-distance matrix, one BFS per node."""
    return np.stack([bfs_distances(g, s).dist for s in range(g.n)])
