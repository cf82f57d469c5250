"""Gradient-similarity clustering: split tests, bipartition, cluster tree.

Devices whose shared model has stalled (small aggregated gradient) while
individual gradients stay large are pulling in conflicting directions.
The engine detects that, splits the device set by pairwise gradient
cosine similarity, and tracks the resulting tree of specialized models.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import StateError
from .models import GradientUpdate, ModelParams

EXHAUSTIVE_LIMIT = 15


def _as_vector(g) -> np.ndarray:
    if isinstance(g, GradientUpdate):
        return g.grad
    return np.asarray(g, dtype=np.float64)


def cosine_similarity(g1, g2) -> float:
    """Cosine of the angle between two gradients (arrays or updates)."""
    a, b = _as_vector(g1), _as_vector(g2)
    if a.shape != b.shape:
        raise ValueError(f"gradient shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for zero-norm gradient")
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class SimilarityMatrix:
    ids: tuple
    values: np.ndarray

    def __post_init__(self):
        n = len(self.ids)
        if self.values.shape != (n, n):
            raise ValueError("similarity matrix shape does not match id list")


def similarity_matrix(gradients: dict) -> SimilarityMatrix:
    """Pairwise cosine similarities, rows/columns in ascending device id.

    The matrix is exactly symmetric with a unit diagonal; a zero-norm
    gradient is reported with the offending device id.
    """
    if len(gradients) < 2:
        raise ValueError("similarity matrix needs at least 2 devices")
    ids = tuple(sorted(gradients))
    vecs = []
    for dev in ids:
        v = _as_vector(gradients[dev])
        if np.linalg.norm(v) == 0:
            raise ValueError(f"device {dev}: zero-norm gradient, similarity undefined")
        vecs.append(v)
    n = len(ids)
    values = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            s = cosine_similarity(vecs[i], vecs[j])
            values[i, j] = s
            values[j, i] = s
    return SimilarityMatrix(ids, values)


@dataclass(frozen=True)
class SplitCheck:
    split: bool
    agg_norm: float
    max_norm: float


def check_split_conditions(gradients: dict, sample_weights: dict, eps1: float, eps2: float) -> SplitCheck:
    """Stationarity test on a cluster's member gradients.

    Splitting requires the sample-weighted mean gradient to have stalled
    (norm < eps1) while at least one member still has a large gradient
    (norm > eps2). Weights are normalized by their sum.
    """
    if eps1 <= 0 or eps2 <= 0:
        raise ValueError("eps1 and eps2 must be > 0")
    if not gradients:
        raise ValueError("check_split_conditions needs at least one gradient")
    ids = sorted(gradients)
    weights = np.array([float(sample_weights[d]) for d in ids])
    if np.any(weights <= 0):
        raise ValueError("sample weights must be positive")
    weights = weights / weights.sum()
    stacked = np.stack([_as_vector(gradients[d]) for d in ids])
    agg_norm = float(np.linalg.norm(weights @ stacked))
    max_norm = float(np.max(np.linalg.norm(stacked, axis=1)))
    return SplitCheck(agg_norm < eps1 and max_norm > eps2, agg_norm, max_norm)


def _max_cross(values: np.ndarray, c1: tuple, c2: tuple) -> float:
    return float(values[np.ix_(c1, c2)].max())


def _exhaustive_bipartition(values: np.ndarray, n: int):
    best = None
    rest = range(1, n)
    # Index 0 stays in c1, so each unordered bipartition appears once.
    for r in range(0, n - 1):
        for extra in itertools.combinations(rest, r):
            c1 = (0,) + extra
            c2 = tuple(i for i in rest if i not in extra)
            key = (_max_cross(values, c1, c2), abs(len(c1) - len(c2)), c1)
            if best is None or key < best[0]:
                best = (key, c1, c2)
    return best[1], best[2]


def _complete_linkage_bipartition(values: np.ndarray, n: int):
    """Agglomerative merge on distance 1 - similarity until two clusters
    remain. Ties merge the lexicographically smallest cluster pair, so the
    result is deterministic."""
    dist = 1.0 - values
    clusters = [(i,) for i in range(n)]
    while len(clusters) > 2:
        best = None
        for a, b in itertools.combinations(range(len(clusters)), 2):
            d = float(dist[np.ix_(clusters[a], clusters[b])].max())
            key = (d, clusters[a], clusters[b])
            if best is None or key < best[0]:
                best = (key, a, b)
        _, a, b = best
        merged = tuple(sorted(clusters[a] + clusters[b]))
        clusters = [c for k, c in enumerate(clusters) if k not in (a, b)]
        clusters.append(merged)
        clusters.sort()
    c1, c2 = sorted(clusters)
    return c1, c2


def bipartition(sim: SimilarityMatrix):
    """Split the device set in two, minimizing the largest cross-pair
    similarity. Exact search up to 15 devices, complete linkage beyond.
    Ties prefer the more balanced split; c1 holds the lowest device id.
    """
    n = len(sim.ids)
    if n < 2:
        raise ValueError("bipartition needs at least 2 devices")
    if n <= EXHAUSTIVE_LIMIT:
        i1, i2 = _exhaustive_bipartition(sim.values, n)
    else:
        i1, i2 = _complete_linkage_bipartition(sim.values, n)
    c1 = tuple(sim.ids[i] for i in i1)
    c2 = tuple(sim.ids[i] for i in i2)
    if min(c2) < min(c1):
        c1, c2 = c2, c1
    return c1, c2


ACTIVE = "active"
STOPPED = "stopped"


@dataclass
class ClusterNode:
    """One node of the specialization tree."""

    cluster_id: int
    edge_id: int | None
    members: frozenset
    model: ModelParams
    status: str = ACTIVE
    parent: int | None = None
    children: tuple = ()
    merged_into: int | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def is_current(self) -> bool:
        """A live leaf: not split further and not absorbed by a merge."""
        return self.is_leaf and self.merged_into is None


class ClusterTree:
    """Forest of cluster nodes, one root per edge, mutated by the
    orchestrator as splits, stops, and cloud merges happen."""

    def __init__(self):
        self.nodes: dict[int, ClusterNode] = {}
        self._next_id = 0

    def _new_id(self) -> int:
        cid = self._next_id
        self._next_id += 1
        return cid

    def add_root(self, edge_id: int, members, model: ModelParams) -> int:
        cid = self._new_id()
        self.nodes[cid] = ClusterNode(cid, edge_id, frozenset(members), model)
        return cid

    def node(self, cluster_id: int) -> ClusterNode:
        return self.nodes[cluster_id]

    def split(self, cluster_id: int, parts) -> tuple:
        """Replace a leaf with two children partitioning its members.

        Children start from a copy of the parent's model.
        """
        node = self.nodes[cluster_id]
        if node.status == STOPPED:
            raise StateError(f"cluster {cluster_id} is stopped and cannot split")
        if not node.is_leaf:
            raise StateError(f"cluster {cluster_id} was already split")
        if node.merged_into is not None:
            raise StateError(f"cluster {cluster_id} was merged away and cannot split")
        c1, c2 = frozenset(parts[0]), frozenset(parts[1])
        if c1 | c2 != node.members or c1 & c2:
            raise ValueError(
                f"split parts must partition cluster {cluster_id} members exactly"
            )
        if not c1 or not c2:
            raise ValueError("split parts must both be nonempty")
        ids = []
        for part in (c1, c2):
            cid = self._new_id()
            self.nodes[cid] = ClusterNode(
                cid,
                node.edge_id,
                part,
                node.model.with_weights(node.model.weights.copy()),
                parent=cluster_id,
            )
            ids.append(cid)
        node.children = tuple(ids)
        return tuple(ids)

    def stop(self, cluster_id: int):
        node = self.nodes[cluster_id]
        if not node.is_leaf:
            raise StateError(f"cluster {cluster_id} is internal and cannot stop")
        node.status = STOPPED

    def merge(self, cluster_ids, model: ModelParams) -> int:
        """Fuse current leaves into one new parentless cluster (cloud-level).

        The old leaves stay in the tree but point at the merged node and
        never train or split again.
        """
        if len(cluster_ids) < 2:
            raise ValueError("merge needs at least 2 clusters")
        nodes = [self.nodes[c] for c in cluster_ids]
        for n in nodes:
            if not n.is_current:
                raise StateError(f"cluster {n.cluster_id} is not a live leaf")
        members = frozenset().union(*(n.members for n in nodes))
        edge_ids = {n.edge_id for n in nodes}
        edge_id = edge_ids.pop() if len(edge_ids) == 1 else None
        cid = self._new_id()
        self.nodes[cid] = ClusterNode(cid, edge_id, members, model)
        for n in nodes:
            n.merged_into = cid
        return cid

    def leaves(self, edge_id: int | None = None) -> list:
        out = [n for n in self.nodes.values() if n.is_current]
        if edge_id is not None:
            out = [n for n in out if n.edge_id == edge_id]
        return sorted(out, key=lambda n: n.cluster_id)

    def active_leaves(self, edge_id: int | None = None) -> list:
        return [n for n in self.leaves(edge_id) if n.status == ACTIVE]

    def specialized(self, edge_id: int | None = None) -> list:
        """Current leaves that exist because of a split or merge; an
        unsplit root is the shared model, not a specialized one."""
        return [
            n
            for n in self.leaves(edge_id)
            if n.parent is not None or self.is_merge_product(n)
        ]

    def is_merge_product(self, node: ClusterNode) -> bool:
        return node.parent is None and any(
            other.merged_into == node.cluster_id for other in self.nodes.values()
        )

    def cluster_of(self, device_id: int) -> ClusterNode:
        """The current leaf that owns a device."""
        for n in self.leaves():
            if device_id in n.members:
                return n
        raise KeyError(f"device {device_id} belongs to no current cluster")

    def root_of_edge(self, edge_id: int) -> ClusterNode:
        roots = [
            n
            for n in self.nodes.values()
            if n.edge_id == edge_id and n.parent is None and n.merged_into is None
            and not self.is_merge_product(n)
        ]
        if len(roots) != 1:
            raise KeyError(f"edge {edge_id} has {len(roots)} roots")
        return roots[0]

    def snapshot(self) -> list:
        """JSON-ready state of every node, ordered by cluster id."""
        return [
            {
                "cluster_id": n.cluster_id,
                "edge_id": n.edge_id,
                "members": sorted(n.members),
                "status": n.status,
                "parent": n.parent,
                "children": list(n.children),
                "merged_into": n.merged_into,
            }
            for n in sorted(self.nodes.values(), key=lambda x: x.cluster_id)
        ]
