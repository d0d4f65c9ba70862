"""Clustered networks: storage, synthetic generators and edge-list ingestion.

A :class:`ClusteredNetwork` is a directed graph whose edges never leave a
cluster, i.e. its global adjacency matrix is block diagonal. Units are indexed
globally ``0..N-1`` in cluster order; the original ``(cluster, node)`` labels
are kept for reporting.
"""

from __future__ import annotations

import logging
from collections.abc import Hashable, Iterable, Sequence
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)


class NetworkError(ValueError):
    """Base class for malformed network input."""


class CrossClusterEdge(NetworkError):
    pass


class SelfLoop(NetworkError):
    pass


class UnknownNode(NetworkError):
    pass


class InvalidProbability(NetworkError):
    pass


class AttributeLengthMismatch(NetworkError):
    pass


@dataclass(frozen=True)
class Neighborhood:
    unit: tuple[Hashable, Hashable]
    members: frozenset
    degree: int


class ClusteredNetwork:
    """Directed network with block-diagonal adjacency.

    Parameters
    ----------
    cluster_ids : sequence
        Label of each cluster, in storage order.
    nodes : sequence of sequences
        Node labels of each cluster.
    edges : sequence of iterables of (int, int)
        Per cluster, directed edges as pairs of *local* positions.

    Notes
    -----
    Instances are treated as immutable. Duplicate edges collapse silently here;
    :func:`build_from_edge_list` is the place that counts them.
    """

    def __init__(
        self,
        cluster_ids: Sequence[Hashable],
        nodes: Sequence[Sequence[Hashable]],
        edges: Sequence[Iterable[tuple[int, int]]],
    ) -> None:
        if not (len(cluster_ids) == len(nodes) == len(edges)):
            raise ValueError("cluster_ids, nodes and edges must have equal length")
        self._cluster_ids = tuple(cluster_ids)
        self._nodes = tuple(tuple(block) for block in nodes)
        sizes = np.array([len(block) for block in self._nodes], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        self._offsets = offsets

        rows: list[int] = []
        cols: list[int] = []
        for k, (block, block_edges) in enumerate(zip(self._nodes, edges)):
            if len(set(block)) != len(block):
                raise NetworkError(f"duplicate node ids in cluster {self._cluster_ids[k]!r}")
            n_k = len(block)
            base = int(offsets[k])
            for src, dst in block_edges:
                if not (0 <= src < n_k and 0 <= dst < n_k):
                    raise NetworkError("edge endpoint outside its cluster")
                if src == dst:
                    raise SelfLoop(f"self-loop on node {block[src]!r}")
                rows.append(base + src)
                cols.append(base + dst)
        n = int(offsets[-1])
        adj = sp.csr_matrix(
            (np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n)
        )
        adj.sum_duplicates()
        adj.data[:] = 1
        adj.sort_indices()
        self._adj = adj
        self._cluster_of = np.repeat(np.arange(len(self._nodes), dtype=np.int64), sizes)

    # -- size and labels -------------------------------------------------
    @property
    def n_clusters(self) -> int:
        return len(self._cluster_ids)

    @property
    def n_units(self) -> int:
        return int(self._offsets[-1])

    @property
    def cluster_ids(self) -> tuple:
        return self._cluster_ids

    @property
    def cluster_index(self) -> np.ndarray:
        """Block position (0..K-1) of every unit."""
        return self._cluster_of

    @property
    def adjacency(self) -> sp.csr_matrix:
        """Global out-adjacency, ``A[i, j] = 1`` when ``j`` is a neighbour of ``i``."""
        return self._adj

    def cluster_nodes(self, k: int) -> tuple:
        return self._nodes[k]

    def cluster_slice(self, k: int) -> slice:
        return slice(int(self._offsets[k]), int(self._offsets[k + 1]))

    @cached_property
    def units(self) -> list[tuple[Hashable, Hashable]]:
        return [(cid, node) for cid, block in zip(self._cluster_ids, self._nodes) for node in block]

    @cached_property
    def _index(self) -> dict:
        return {unit: i for i, unit in enumerate(self.units)}

    def index_of(self, cluster_id: Hashable, node_id: Hashable) -> int:
        try:
            return self._index[(cluster_id, node_id)]
        except KeyError:
            raise UnknownNode(f"no node {node_id!r} in cluster {cluster_id!r}") from None

    # -- degrees and neighbourhoods -------------------------------------
    @cached_property
    def out_degree(self) -> np.ndarray:
        return np.diff(self._adj.indptr).astype(np.int64)

    @cached_property
    def in_degree(self) -> np.ndarray:
        return np.bincount(self._adj.indices, minlength=self.n_units).astype(np.int64)

    def out_neighbors(self, i: int) -> np.ndarray:
        return self._adj.indices[self._adj.indptr[i] : self._adj.indptr[i + 1]]

    def neighborhood(self, i: int) -> Neighborhood:
        members = frozenset(self.units[j] for j in self.out_neighbors(i))
        return Neighborhood(unit=self.units[i], members=members, degree=len(members))

    @property
    def n_edges(self) -> int:
        return int(self._adj.nnz)

    def edges(self) -> list[tuple[Hashable, Hashable, Hashable]]:
        """All directed edges as ``(cluster, src, dst)`` labels."""
        coo = self._adj.tocoo()
        units = self.units
        out = []
        for i, j in sorted(zip(coo.row.tolist(), coo.col.tolist())):
            out.append((units[i][0], units[i][1], units[j][1]))
        return out

    def cross_cluster_edges(self) -> int:
        coo = self._adj.tocoo()
        return int(np.count_nonzero(self._cluster_of[coo.row] != self._cluster_of[coo.col]))

    def local_edges(self, k: int) -> list[tuple[int, int]]:
        block = self._adj[self.cluster_slice(k)][:, self.cluster_slice(k)].tocoo()
        return sorted(zip(block.row.tolist(), block.col.tolist()))

    def subnetwork(self, keep: np.ndarray) -> "ClusteredNetwork":
        """Induced subgraph on the units where ``keep`` is true (clusters may become empty)."""
        keep = np.asarray(keep, dtype=bool)
        sub = self._adj[keep][:, keep].tocoo()
        kept = np.flatnonzero(keep)
        cluster_of = self._cluster_of[kept]
        local_pos = np.empty(len(kept), dtype=np.int64)
        nodes: list[list] = [[] for _ in range(self.n_clusters)]
        units = self.units
        for pos, i in enumerate(kept):
            k = cluster_of[pos]
            local_pos[pos] = len(nodes[k])
            nodes[k].append(units[i][1])
        edges: list[list[tuple[int, int]]] = [[] for _ in range(self.n_clusters)]
        for r, c in zip(sub.row.tolist(), sub.col.tolist()):
            edges[cluster_of[r]].append((int(local_pos[r]), int(local_pos[c])))
        return ClusteredNetwork(self._cluster_ids, nodes, edges)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClusteredNetwork):
            return NotImplemented
        return (
            self._cluster_ids == other._cluster_ids
            and self._nodes == other._nodes
            and (self._adj != other._adj).nnz == 0
        )

    def __repr__(self) -> str:
        return f"ClusteredNetwork(K={self.n_clusters}, N={self.n_units}, edges={self.n_edges})"


def build_from_edge_list(
    rows: Iterable[tuple[Hashable, Hashable, Hashable]],
    directed: bool = True,
    nodes: Iterable[tuple[Hashable, Hashable]] | None = None,
) -> ClusteredNetwork:
    """Build a network from ``(cluster, src, dst)`` rows.

    If ``nodes`` (``(cluster, node)`` pairs) is given it fixes membership and
    ordering, lets isolated nodes exist, and edges touching a node registered
    in another cluster raise :class:`CrossClusterEdge`. Without it, node ids
    are local to the cluster named on the row.

    Duplicate edges are ignored; the count is stored on the returned network as
    ``duplicate_edges``.
    """
    order: dict[Hashable, list] = {}
    seen_nodes: dict[Hashable, set] = {}
    home: dict[Hashable, Hashable] = {}
    registered = nodes is not None
    if registered:
        for cid, node in nodes:
            block = order.setdefault(cid, [])
            if node in home:
                raise NetworkError(f"node {node!r} registered twice")
            home[node] = cid
            block.append(node)
            seen_nodes.setdefault(cid, set()).add(node)

    edge_sets: dict[Hashable, list[tuple[Hashable, Hashable]]] = {}
    seen_edges: set = set()
    duplicates = 0
    for cid, src, dst in rows:
        if src == dst:
            raise SelfLoop(f"self-loop on node {src!r} in cluster {cid!r}")
        for node in (src, dst):
            if registered:
                if node not in home:
                    raise UnknownNode(f"edge references unknown node {node!r}")
                if home[node] != cid:
                    raise CrossClusterEdge(
                        f"edge ({src!r}, {dst!r}) listed in cluster {cid!r} but node "
                        f"{node!r} belongs to cluster {home[node]!r}"
                    )
            else:
                block_seen = seen_nodes.setdefault(cid, set())
                if node not in block_seen:
                    block_seen.add(node)
                    order.setdefault(cid, []).append(node)
        pairs = [(src, dst)] if directed else [(src, dst), (dst, src)]
        for a, b in pairs:
            key = (cid, a, b)
            if key in seen_edges:
                duplicates += 1
                continue
            seen_edges.add(key)
            edge_sets.setdefault(cid, []).append((a, b))

    if duplicates:
        logger.warning("ignored %d duplicate edge(s)", duplicates)
    cluster_ids = list(order)
    blocks = [order[cid] for cid in cluster_ids]
    local = []
    for cid, block in zip(cluster_ids, blocks):
        pos = {node: p for p, node in enumerate(block)}
        local.append([(pos[a], pos[b]) for a, b in edge_sets.get(cid, [])])
    net = ClusteredNetwork(cluster_ids, blocks, local)
    net.duplicate_edges = duplicates
    return net


def _check_probability(name: str, p: float) -> None:
    if not (0.0 <= p <= 1.0) or not np.isfinite(p):
        raise InvalidProbability(f"{name}={p!r} is not in [0, 1]")


def _cluster_rngs(K: int, seed: int) -> list[np.random.Generator]:
    # One independent stream per cluster so block generation order never matters.
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(K)]


def _bernoulli_graph(rng: np.random.Generator, prob: np.ndarray | float, n: int) -> list[tuple[int, int]]:
    iu, ju = np.triu_indices(n, k=1)
    u = rng.random(len(iu))
    p = prob if np.isscalar(prob) else prob[iu, ju]
    hit = u < p
    a, b = iu[hit].tolist(), ju[hit].tolist()
    return list(zip(a, b)) + list(zip(b, a))


def generate_er_clusters(K: int, n: int, p: float, seed: int) -> ClusteredNetwork:
    """``K`` independent undirected Erdős-Rényi graphs ``G(n, p)``."""
    _check_probability("p", p)
    if n < 1:
        raise ValueError("cluster size n must be >= 1")
    rngs = _cluster_rngs(K, seed)
    edges = [_bernoulli_graph(rng, p, n) for rng in rngs]
    return ClusteredNetwork(list(range(K)), [list(range(n))] * K, edges)


def generate_homophilous_clusters(
    K: int,
    n: int,
    p_base: float,
    p_same: float,
    covariate: Sequence[int] | np.ndarray,
    seed: int,
) -> ClusteredNetwork:
    """Undirected Bernoulli graphs where like attracts like.

    Each within-cluster pair is linked with probability ``p_same`` when the two
    nodes share the binary ``covariate`` value (length ``K * n``, cluster
    order) and ``p_base`` otherwise. With ``p_base == p_same`` the draws are
    identical to :func:`generate_er_clusters` for the same seed.
    """
    _check_probability("p_base", p_base)
    _check_probability("p_same", p_same)
    if p_base > p_same:
        raise InvalidProbability(f"p_base={p_base} exceeds p_same={p_same}")
    attr = np.asarray(covariate)
    if attr.shape != (K * n,):
        raise AttributeLengthMismatch(f"covariate has length {attr.size}, expected {K * n}")
    rngs = _cluster_rngs(K, seed)
    edges = []
    for k, rng in enumerate(rngs):
        a = attr[k * n : (k + 1) * n]
        prob = np.where(a[:, None] == a[None, :], p_same, p_base)
        edges.append(_bernoulli_graph(rng, prob, n))
    return ClusteredNetwork(list(range(K)), [list(range(n))] * K, edges)


def drop_isolated(network: ClusteredNetwork) -> tuple[ClusteredNetwork, list]:
    """Remove units with neither incoming nor outgoing edges.

    Returns the reduced network and the removed ``(cluster, node)`` labels.
    Dropping such units never changes anyone else's neighbourhood.
    """
    isolated = (network.out_degree + network.in_degree) == 0
    if not isolated.any():
        return network, []
    removed = [network.units[i] for i in np.flatnonzero(isolated)]
    return network.subnetwork(~isolated), removed
