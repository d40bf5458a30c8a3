"""Communication topologies over agents 0..N-1."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ..errors import InvalidN
from ..trace import TOPOLOGIES

MESH_MEAN_DEGREE = 4.0


@dataclass
class Topology:
    kind: str
    N: int
    neighbors: list[set[int]]

    def edges(self) -> set[tuple[int, int]]:
        return {(a, b) for a, nb in enumerate(self.neighbors) for b in nb if a < b}

    def degrees(self) -> list[int]:
        return [len(nb) for nb in self.neighbors]

    def add_edge(self, a: int, b: int) -> None:
        self.neighbors[a].add(b)
        self.neighbors[b].add(a)

    def remove_edge(self, a: int, b: int) -> None:
        self.neighbors[a].discard(b)
        self.neighbors[b].discard(a)


def _from_edges(kind: str, N: int, edges) -> Topology:
    nb: list[set[int]] = [set() for _ in range(N)]
    for a, b in edges:
        if a != b:
            nb[a].add(b)
            nb[b].add(a)
    return Topology(kind, N, nb)


def _connected(N: int, edges: list[tuple[int, int]]) -> bool:
    if N == 1:
        return True
    if not edges:
        return False
    a, b = zip(*edges)
    m = coo_matrix((np.ones(len(a)), (a, b)), shape=(N, N))
    n, _ = connected_components(m, directed=False)
    return n == 1


def _sparse_mesh(N: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    p = min(1.0, MESH_MEAN_DEGREE / (N - 1))
    iu, ju = np.triu_indices(N, k=1)
    while True:
        keep = rng.random(iu.size) < p
        edges = list(zip(iu[keep].tolist(), ju[keep].tolist()))
        if _connected(N, edges):
            return edges


def _hierarchical(N: int) -> list[tuple[int, int]]:
    # coordinator -> managers -> workers, managers sized ~ sqrt(N)
    m = min(N - 1, max(1, round(math.sqrt(N - 1))))
    edges = [(0, i) for i in range(1, m + 1)]
    for j, w in enumerate(range(m + 1, N)):
        edges.append((1 + j % m, w))
    return edges


def build_topology(kind: str, N: int, seed: int = 0) -> Topology:
    if N < 2:
        raise InvalidN(f"topology needs N >= 2, got {N}")
    if kind not in TOPOLOGIES:
        raise ValueError(f"unknown topology {kind!r}")
    if kind == "chain":
        edges = [(i, i + 1) for i in range(N - 1)]
    elif kind == "star":
        edges = [(0, i) for i in range(1, N)]
    elif kind == "tree":
        edges = [((i - 1) // 2, i) for i in range(1, N)]
    elif kind == "hierarchical":
        edges = _hierarchical(N)
    elif kind == "fully_connected":
        edges = [(a, b) for a in range(N) for b in range(a + 1, N)]
    else:
        # dynamic reputation starts from a sparse mesh; the engine rewires it
        edges = _sparse_mesh(N, np.random.default_rng([seed, N, 7919]))
    return _from_edges(kind, N, edges)


def rewire_toward_effort(topo: Topology, effort: list[int], rng: np.random.Generator, prob: float = 0.5) -> None:
    """Each agent, with probability ``prob``, redirects one edge to the
    highest-effort non-neighbour (ties to the lowest index)."""
    order = sorted(range(topo.N), key=lambda a: (-effort[a], a))
    for a in range(topo.N):
        if rng.random() >= prob:
            continue
        target = next((b for b in order if b != a and b not in topo.neighbors[a]), None)
        if target is None:
            continue
        nb = sorted(topo.neighbors[a])
        if nb:
            drop = nb[int(rng.integers(len(nb)))]
            # never isolate the dropped neighbour
            if len(topo.neighbors[drop]) > 1:
                topo.remove_edge(a, drop)
        topo.add_edge(a, target)
