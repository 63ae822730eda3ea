import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from nashlearn.errors import TopologyError


class CommGraph:
    """Undirected, connected communication graph over robots ``0..m-1``."""

    def __init__(self, m, edges):
        self.m = int(m)
        if self.m < 1:
            raise TopologyError("a graph needs at least one robot")

        normalised = set()
        for a, b in edges:
            a, b = int(a), int(b)
            if a == b:
                raise TopologyError("self-loop on robot {}".format(a))
            for node in (a, b):
                if not 0 <= node < self.m:
                    raise TopologyError(
                        "edge ({}, {}) references unknown robot {}".format(a, b, node)
                    )
            normalised.add((min(a, b), max(a, b)))
        self.edges = frozenset(normalised)

        self._neighbors = {i: [] for i in range(self.m)}
        for a, b in sorted(self.edges):
            self._neighbors[a].append(b)
            self._neighbors[b].append(a)
        self._neighbors = {i: tuple(sorted(n)) for i, n in self._neighbors.items()}

        if self.m > 1 and self.components() != 1:
            raise TopologyError("communication graph is not connected")

    @classmethod
    def line(cls, m):
        return cls(m, [(i, i + 1) for i in range(m - 1)])

    @classmethod
    def ring(cls, m):
        if m < 3:
            return cls.line(m)
        return cls(m, [(i, (i + 1) % m) for i in range(m)])

    @classmethod
    def complete(cls, m):
        return cls(m, [(i, j) for i in range(m) for j in range(i + 1, m)])

    @property
    def nodes(self):
        return tuple(range(self.m))

    def neighbors(self, i):
        return self._neighbors[i]

    def degree(self, i):
        return len(self._neighbors[i])

    @property
    def max_degree(self):
        return max(self.degree(i) for i in self.nodes)

    def has_edge(self, a, b):
        return (min(a, b), max(a, b)) in self.edges

    def adjacency(self):
        adj = np.zeros((self.m, self.m))
        for a, b in self.edges:
            adj[a, b] = adj[b, a] = 1.0
        return adj

    def laplacian(self):
        adj = self.adjacency()
        return np.diag(adj.sum(axis=1)) - adj

    def components(self):
        count, _ = connected_components(csr_matrix(self.adjacency()), directed=False)
        return count

    def __repr__(self):
        return "<CommGraph m={} edges={}>".format(self.m, sorted(self.edges))

    def to_json(self):
        return {"m": self.m, "edges": [list(e) for e in sorted(self.edges)]}
