"""Treatment assignment, threshold exposure and exposure probabilities.

Joint exposure conditions ``(w, g)`` are stored as a cell index
``c = w + 2 g`` so that the four cells appear in the order
``(0,0), (1,0), (0,1), (1,1)``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.stats import binom

from nctree import kernels
from nctree.netgraph import ClusteredNetwork

CELLS: tuple[tuple[int, int], ...] = ((0, 0), (1, 0), (0, 1), (1, 1))
ENUMERATION_LIMIT = 25
MC_DRAWS = 100_000


def cell_index(w: int, g: int) -> int:
    if w not in (0, 1) or g not in (0, 1):
        raise ValueError(f"invalid exposure condition ({w}, {g})")
    return int(w) + 2 * int(g)


def cell_label(c: int) -> str:
    w, g = CELLS[c]
    return f"{w}{g}"


class PositivityViolation(ValueError):
    """A requested exposure condition has probability zero for the unit."""


@dataclass(frozen=True)
class ThresholdExposure:
    """``G = 1`` iff at least ``q`` out-neighbours are treated."""

    q: int = 1

    def __post_init__(self) -> None:
        if int(self.q) != self.q or self.q < 1:
            raise ValueError(f"threshold q must be a positive integer, got {self.q!r}")


@dataclass(frozen=True)
class BernoulliDesign:
    """Each unit treated independently with probability ``alpha``."""

    alpha: float = 0.5

    def __post_init__(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha!r}")

    kind = "bernoulli"


@dataclass(frozen=True)
class MonteCarloProbability:
    estimate: float
    std_error: float
    draws: int


def assign_bernoulli(network: ClusteredNetwork, design: BernoulliDesign, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (rng.random(network.n_units) < design.alpha).astype(np.int8)


def compute_exposures(network: ClusteredNetwork, W, mapping: ThresholdExposure) -> np.ndarray:
    W = np.asarray(W)
    if W.shape != (network.n_units,):
        raise ValueError("assignment vector length does not match the network")
    treated_neighbors = network.adjacency @ W.astype(np.int64)
    return (treated_neighbors >= mapping.q).astype(np.int8)


# -- closed forms ----------------------------------------------------------
def _at_least(n: int, k: int, alpha: float) -> float:
    """P(Binomial(n, alpha) >= k)."""
    if k <= 0:
        return 1.0
    if k > n:
        return 0.0
    return float(binom.sf(k - 1, n, alpha))


def _below(n: int, k: int, alpha: float) -> float:
    """P(Binomial(n, alpha) < k)."""
    if k <= 0:
        return 0.0
    if k > n:
        return 1.0
    return float(binom.cdf(k - 1, n, alpha))


def _own(w: int, alpha: float) -> float:
    return alpha if w else 1.0 - alpha


def marginal_probability(
    degree: int, design: BernoulliDesign, mapping: ThresholdExposure, w: int, g: int
) -> float:
    """Probability that a unit with ``degree`` out-neighbours lands in ``(w, g)``."""
    if degree < 0:
        raise ValueError("degree must be non-negative")
    a, q = design.alpha, mapping.q
    exposed = _at_least(degree, q, a) if g else _below(degree, q, a)
    p = _own(w, a) * exposed
    if p == 0.0:
        raise PositivityViolation(
            f"condition ({w},{g}) impossible for degree {degree}, q={q}, alpha={a}"
        )
    return p


def marginal_table(degrees, design: BernoulliDesign, mapping: ThresholdExposure) -> np.ndarray:
    """Array ``(n, 4)`` of marginal probabilities, zeros where impossible."""
    d = np.asarray(degrees, dtype=np.int64)
    a, q = design.alpha, mapping.q
    below = np.where(d >= q, binom.cdf(q - 1, d, a), 1.0)
    above = np.where(d >= q, binom.sf(q - 1, d, a), 0.0)
    out = np.empty((d.size, 4))
    for c, (w, g) in enumerate(CELLS):
        out[:, c] = _own(w, a) * (above if g else below)
    return out


@lru_cache(maxsize=None)
def _overlap_table(
    only_i: int, only_j: int, shared: int, j_in_i: bool, i_in_j: bool, alpha: float, q: int
) -> np.ndarray:
    """Joint 4x4 table for two units of the same cluster.

    ``only_i``/``only_j`` count out-neighbours private to each unit (the other
    unit excluded), ``shared`` the common out-neighbours. Conditioning on how
    many shared neighbours are treated makes the two exposures independent.
    """
    out = np.zeros((4, 4))
    pmf = binom.pmf(np.arange(shared + 1), shared, alpha) if shared else np.ones(1)
    for ci, (wi, gi) in enumerate(CELLS):
        for cj, (wj, gj) in enumerate(CELLS):
            total = 0.0
            for s, ps in enumerate(pmf):
                need_i = q - s - (wj if j_in_i else 0)
                need_j = q - s - (wi if i_in_j else 0)
                pi = _at_least(only_i, need_i, alpha) if gi else _below(only_i, need_i, alpha)
                pj = _at_least(only_j, need_j, alpha) if gj else _below(only_j, need_j, alpha)
                total += ps * pi * pj
            out[ci, cj] = _own(wi, alpha) * _own(wj, alpha) * total
    out.setflags(write=False)
    return out


def _closed_neighborhood(network: ClusteredNetwork, i: int) -> set[int]:
    return set(network.out_neighbors(i).tolist()) | {i}


def dependency_overlap(network: ClusteredNetwork, mapping: ThresholdExposure, i: int, j: int) -> bool:
    """True when the exposures of ``i`` and ``j`` share at least one treatment draw."""
    if network.cluster_index[i] != network.cluster_index[j]:
        return False
    return bool(_closed_neighborhood(network, i) & _closed_neighborhood(network, j))


def _pair_structure(network: ClusteredNetwork, i: int, j: int) -> tuple[int, int, int, bool, bool]:
    ni = set(network.out_neighbors(i).tolist())
    nj = set(network.out_neighbors(j).tolist())
    shared = len(ni & nj)
    j_in_i, i_in_j = j in ni, i in nj
    return len(ni) - shared - j_in_i, len(nj) - shared - i_in_j, shared, j_in_i, i_in_j


def _joint_set(network: ClusteredNetwork, i: int, j: int):
    members = sorted(_closed_neighborhood(network, i) | _closed_neighborhood(network, j))
    pos = {u: b for b, u in enumerate(members)}

    def mask(u: int) -> int:
        return sum(1 << pos[v] for v in network.out_neighbors(u).tolist())

    return members, pos, mask(i), mask(j)


def enumerate_pair_table(
    network: ClusteredNetwork, design: BernoulliDesign, mapping: ThresholdExposure, i: int, j: int
) -> np.ndarray:
    """Exact 4x4 table by running over every assignment of the joint dependency set."""
    members, pos, mask_i, mask_j = _joint_set(network, i, j)
    if len(members) > 62:
        raise ValueError(f"joint dependency set of {len(members)} units cannot be enumerated")
    return kernels.enumerate_pair_table(
        mask_i, mask_j, pos[i], pos[j], len(members), float(design.alpha), int(mapping.q)
    )


def monte_carlo_pair_table(
    network: ClusteredNetwork,
    design: BernoulliDesign,
    mapping: ThresholdExposure,
    i: int,
    j: int,
    draws: int = MC_DRAWS,
    seed=0,
) -> tuple[np.ndarray, np.ndarray]:
    """Simulated 4x4 table and its binomial standard errors."""
    members, pos, _, _ = _joint_set(network, i, j)
    rng = np.random.default_rng(seed)
    W = rng.random((draws, len(members))) < design.alpha
    idx_i = [pos[v] for v in network.out_neighbors(i).tolist()]
    idx_j = [pos[v] for v in network.out_neighbors(j).tolist()]
    gi = W[:, idx_i].sum(axis=1) >= mapping.q
    gj = W[:, idx_j].sum(axis=1) >= mapping.q
    ci = W[:, pos[i]].astype(np.int64) + 2 * gi
    cj = W[:, pos[j]].astype(np.int64) + 2 * gj
    est = np.bincount(4 * ci + cj, minlength=16).reshape(4, 4) / draws
    return est, np.sqrt(est * (1.0 - est) / draws)


def pairwise_table(
    network: ClusteredNetwork,
    design: BernoulliDesign,
    mapping: ThresholdExposure,
    i: int,
    j: int,
    method: str = "auto",
) -> np.ndarray:
    """All sixteen joint probabilities ``P(i in c, j in c')`` as a 4x4 array.

    ``method`` is one of ``auto`` (product for independent units, closed form
    otherwise), ``closed``, ``enumerate`` or ``monte_carlo``.
    """
    if i == j:
        raise ValueError("pairwise probabilities need two distinct units")
    if method == "auto" and not dependency_overlap(network, mapping, i, j):
        deg = network.out_degree
        return np.outer(
            marginal_table([deg[i]], design, mapping)[0], marginal_table([deg[j]], design, mapping)[0]
        )
    if method in ("auto", "closed"):
        if network.cluster_index[i] != network.cluster_index[j]:
            return pairwise_table(network, design, mapping, i, j, "auto")
        return _overlap_table(*_pair_structure(network, i, j), float(design.alpha), int(mapping.q)).copy()
    if method == "enumerate":
        if network.cluster_index[i] != network.cluster_index[j]:
            return pairwise_table(network, design, mapping, i, j, "auto")
        return enumerate_pair_table(network, design, mapping, i, j)
    if method == "monte_carlo":
        est, se = monte_carlo_pair_table(network, design, mapping, i, j)
        warnings.warn(
            f"Monte Carlo pairwise probabilities (max s.e. {se.max():.2e}) feed variance estimates",
            RuntimeWarning,
            stacklevel=2,
        )
        return est
    raise ValueError(f"unknown method {method!r}")


def pairwise_probability(
    network: ClusteredNetwork,
    design: BernoulliDesign,
    mapping: ThresholdExposure,
    i: int,
    j: int,
    cond_i: tuple[int, int],
    cond_j: tuple[int, int],
    method: str = "auto",
) -> float:
    """``P(W_i=w, G_i=g, W_j=w', G_j=g')``."""
    table = pairwise_table(network, design, mapping, i, j, method)
    return float(table[cell_index(*cond_i), cell_index(*cond_j)])


def pairwise_probability_mc(
    network: ClusteredNetwork,
    design: BernoulliDesign,
    mapping: ThresholdExposure,
    i: int,
    j: int,
    cond_i: tuple[int, int],
    cond_j: tuple[int, int],
    draws: int = MC_DRAWS,
    seed=0,
) -> MonteCarloProbability:
    est, se = monte_carlo_pair_table(network, design, mapping, i, j, draws, seed)
    ci, cj = cell_index(*cond_i), cell_index(*cond_j)
    return MonteCarloProbability(float(est[ci, cj]), float(se[ci, cj]), draws)


def positivity_filter(
    network: ClusteredNetwork, mapping: ThresholdExposure, design: BernoulliDesign
) -> tuple[np.ndarray, np.ndarray]:
    """Indices of units with all four conditions possible, and of the rest."""
    probs = marginal_table(network.out_degree, design, mapping)
    ok = (probs > 0).all(axis=1)
    return np.flatnonzero(ok), np.flatnonzero(~ok)


def dependent_pairs(network: ClusteredNetwork, units=None) -> tuple[np.ndarray, np.ndarray]:
    """Pairs ``i < j`` (both in ``units``) whose closed neighbourhoods intersect."""
    n = network.n_units
    closed = (network.adjacency + sp.identity(n, dtype=np.int8, format="csr")).astype(np.int32)
    if units is not None:
        keep = np.zeros(n, dtype=bool)
        keep[np.asarray(units, dtype=np.int64)] = True
        closed = sp.diags(keep.astype(np.int32)) @ closed
    overlap = sp.triu(closed @ closed.T, k=1).tocoo()
    order = np.lexsort((overlap.col, overlap.row))
    return overlap.row[order].astype(np.int64), overlap.col[order].astype(np.int64)


class ProbabilityTable:
    """Marginal probabilities for every unit and joint tables for dependent pairs.

    Joint tables are computed once for all dependent pairs among ``units``
    (default: the positivity-eligible units); any other pair is independent and
    its joint probabilities are products of marginals.
    """

    def __init__(self, network: ClusteredNetwork, design: BernoulliDesign, mapping: ThresholdExposure, units=None):
        self.network = network
        self.design = design
        self.mapping = mapping
        self.marginal = marginal_table(network.out_degree, design, mapping)
        if units is None:
            units = np.flatnonzero((self.marginal > 0).all(axis=1))
        self.pair_i, self.pair_j = dependent_pairs(network, units)
        self.pair_probs = self._pair_tables()
        self._lookup = {
            (int(a), int(b)): k for k, (a, b) in enumerate(zip(self.pair_i, self.pair_j))
        }

    def _pair_tables(self) -> np.ndarray:
        m = len(self.pair_i)
        out = np.empty((m, 4, 4))
        if m == 0:
            return out
        A = self.network.adjacency.astype(np.int32)
        shared = np.asarray((A @ A.T)[self.pair_i, self.pair_j]).ravel()
        j_in_i = np.asarray(A[self.pair_i, self.pair_j]).ravel().astype(bool)
        i_in_j = np.asarray(A[self.pair_j, self.pair_i]).ravel().astype(bool)
        deg = self.network.out_degree
        only_i = deg[self.pair_i] - shared - j_in_i
        only_j = deg[self.pair_j] - shared - i_in_j
        alpha, q = float(self.design.alpha), int(self.mapping.q)
        for k in range(m):
            out[k] = _overlap_table(
                int(only_i[k]), int(only_j[k]), int(shared[k]), bool(j_in_i[k]), bool(i_in_j[k]), alpha, q
            )
        return out

    @property
    def n_pairs(self) -> int:
        return len(self.pair_i)

    def pair(self, i: int, j: int) -> np.ndarray:
        """4x4 joint table for units ``i`` and ``j`` (rows index ``i``'s cell)."""
        if i == j:
            raise ValueError("pairwise probabilities need two distinct units")
        if i < j:
            k = self._lookup.get((i, j))
            if k is not None:
                return self.pair_probs[k]
        else:
            k = self._lookup.get((j, i))
            if k is not None:
                return self.pair_probs[k].T
        return np.outer(self.marginal[i], self.marginal[j])

    def to_csv(self, path, units=None) -> None:
        """Write ``cluster,node,degree,pi_00,pi_10,pi_01,pi_11`` rows."""
        idx = range(self.network.n_units) if units is None else units
        deg = self.network.out_degree
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["cluster", "node", "degree", "pi_00", "pi_10", "pi_01", "pi_11"])
            for i in idx:
                cid, node = self.network.units[i]
                writer.writerow([cid, node, int(deg[i]), *(f"{p:.12g}" for p in self.marginal[i])])
