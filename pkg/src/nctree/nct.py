"""Honest network causal trees.

Phase 0 splits clusters into a discovery half and an estimation half, Phase 1
grows the tree greedily on the discovery clusters, Phase 2 fills the terminal
leaves with HT estimates computed on the estimation clusters only.

The splitting objective is additive over leaves, so a candidate split of one
leaf is scored by the contribution of its two children alone. Every cutoff of
a covariate is scored in one pass: summands are binned by cutoff position and
cumulated (see :func:`_scan_covariate`).
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from nctree import kernels
from nctree.design import CELLS
from nctree.estimator import (
    P_COV,
    P_CORR,
    P_CROSS,
    U_CELL,
    U_COUNT,
    U_DIAG,
    U_MU,
    U_VAR,
    Contrast,
    Dataset,
    EffectEstimate,
    EmptyCell,
    HTTerms,
    Leaf,
    LeafSums,
    effect_from_sums,
)

ALLOWED_CONTRASTS = tuple(Contrast.parse(s) for s in ("1000", "0100", "1101", "1110", "1100"))
SPLIT_TOLERANCE = 1e-12


class TooFewClusters(ValueError):
    pass


class MinSizeViolated(ValueError):
    pass


class ZeroRootEffect(ValueError):
    pass


class MissingCovariate(ValueError):
    pass


@dataclass(frozen=True)
class EstimandSet:
    """Contrasts of interest and their composite weights.

    Every listed contrast is estimated in the leaves; those with positive
    weight drive the splits. One positive weight gives a single-effect
    criterion, two or more the composite one.
    """

    contrasts: tuple[Contrast, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.contrasts or len(self.contrasts) != len(self.weights):
            raise ValueError("need one weight per contrast and at least one contrast")
        if len(set(self.contrasts)) != len(self.contrasts):
            raise ValueError("duplicate contrast")
        for c in self.contrasts:
            if c not in ALLOWED_CONTRASTS:
                raise ValueError(f"unsupported contrast {c.label}")
        if any(not (0.0 <= w <= 1.0) for w in self.weights):
            raise ValueError("weights must lie in [0, 1]")
        if not any(w > 0 for w in self.weights):
            raise ValueError("at least one weight must be positive")

    @classmethod
    def single(cls, target, others: Sequence = ()) -> "EstimandSet":
        target = Contrast.parse(target)
        extra = [Contrast.parse(c) for c in others if Contrast.parse(c) != target]
        return cls((target, *extra), (1.0,) + (0.0,) * len(extra))

    @classmethod
    def composite(cls, weights: Mapping) -> "EstimandSet":
        parsed = {Contrast.parse(k): float(v) for k, v in weights.items()}
        est = cls(tuple(parsed), tuple(parsed.values()))
        if not est.is_composite:
            raise ValueError("the composite criterion needs at least two positive weights")
        return est

    @property
    def active(self) -> tuple[tuple[Contrast, float], ...]:
        return tuple((c, w) for c, w in zip(self.contrasts, self.weights) if w > 0)

    @property
    def is_composite(self) -> bool:
        return len(self.active) >= 2

    def describe(self) -> str:
        if self.is_composite:
            return "composite"
        return f"single:{self.active[0][0].label}"


@dataclass(frozen=True)
class HonestSplit:
    train: tuple[int, ...]
    estimation: tuple[int, ...]
    seed: int | None = None


def split_clusters(data: Dataset, fraction: float = 0.5, seed=None) -> HonestSplit:
    """Random cluster-level split; ``ceil(K * fraction)`` clusters go to discovery."""
    K = data.network.n_clusters
    if K < 2:
        raise TooFewClusters(f"need at least two clusters for an honest split, got {K}")
    if not (0.0 < fraction < 1.0):
        raise ValueError("fraction must lie in (0, 1)")
    n_tr = min(max(math.ceil(K * fraction), 1), K - 1)
    order = np.random.default_rng(seed).permutation(K)
    return HonestSplit(tuple(sorted(order[:n_tr].tolist())), tuple(sorted(order[n_tr:].tolist())), seed)


@dataclass
class TreeNode:
    id: int
    depth: int
    leaf: Leaf
    split: tuple[int, float] | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    train_cells: tuple[int, int, int, int] = (0, 0, 0, 0)
    train_effects: dict = field(default_factory=dict)
    estimates: dict = field(default_factory=dict)  # label -> EffectEstimate | None
    est_cells: tuple[int, int, int, int] = (0, 0, 0, 0)

    @property
    def is_leaf(self) -> bool:
        return self.split is None

    def walk(self) -> Iterator["TreeNode"]:
        yield self
        if self.left is not None:
            yield from self.left.walk()
            yield from self.right.walk()


@dataclass
class NetworkCausalTree:
    root: TreeNode
    estimands: EstimandSet
    max_depth: int
    min_size: int
    honest: bool
    gamma: dict
    covariate_names: tuple[str, ...] = ()

    def nodes(self) -> list[TreeNode]:
        return list(self.root.walk())

    def leaves(self) -> list[TreeNode]:
        return [n for n in self.root.walk() if n.is_leaf]

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.root.walk())

    def predict_leaf(self, x) -> TreeNode:
        return predict_leaf(self, x)

    def structure(self) -> tuple:
        """Hashable description of the split structure only."""
        return tuple((n.id, n.split) for n in self.root.walk())

    # -- serialisation ------------------------------------------------------
    def to_dict(self) -> dict:
        nodes = []
        for n in self.root.walk():
            estimates = []
            for c in self.estimands.contrasts:
                est = n.estimates.get(c.label)
                if not n.is_leaf or c.label not in n.estimates:
                    continue
                if est is None:
                    estimates.append({"contrast": c.label, "available": False})
                    continue
                estimates.append(
                    {
                        "contrast": c.label,
                        "point": est.point,
                        "se": est.std_error,
                        "ci": [est.ci_low, est.ci_high],
                        "cells": list(est.n_cell),
                        "available": True,
                        "variance": est.variance,
                        "clamped": est.clamped,
                        "level": est.level,
                    }
                )
            nodes.append(
                {
                    "id": n.id,
                    "depth": n.depth,
                    "split": None if n.split is None else {"covariate": n.split[0], "cutoff": n.split[1]},
                    "children": None if n.is_leaf else [n.left.id, n.right.id],
                    "train_cells": list(n.train_cells),
                    "estimates": estimates,
                }
            )
        return {
            "criterion": self.estimands.describe(),
            "contrasts": [c.label for c in self.estimands.contrasts],
            "weights": list(self.estimands.weights),
            "gamma": {k: self.gamma[k] for k in sorted(self.gamma)},
            "max_depth": self.max_depth,
            "min_size": self.min_size,
            "honest": self.honest,
            "covariates": list(self.covariate_names),
            "nodes": nodes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkCausalTree":
        contrasts = tuple(Contrast.parse(s) for s in d["contrasts"])
        estimands = EstimandSet(contrasts, tuple(float(w) for w in d["weights"]))
        by_id = {nd["id"]: nd for nd in d["nodes"]}

        def build(nid: int, leaf: Leaf) -> TreeNode:
            nd = by_id[nid]
            node = TreeNode(id=nid, depth=nd["depth"], leaf=leaf, train_cells=tuple(nd["train_cells"]))
            for e in nd["estimates"]:
                c = Contrast.parse(e["contrast"])
                if not e["available"]:
                    node.estimates[c.label] = None
                    continue
                node.estimates[c.label] = EffectEstimate(
                    c, e["point"], e["variance"], e["se"], e["ci"][0], e["ci"][1],
                    tuple(e["cells"]), e["clamped"], e["level"],
                )
            if nd["split"] is not None:
                p, cut = nd["split"]["covariate"], nd["split"]["cutoff"]
                node.split = (p, cut)
                node.left = build(nd["children"][0], leaf.refine(p, "<=", cut))
                node.right = build(nd["children"][1], leaf.refine(p, ">", cut))
            return node

        root = build(d["nodes"][0]["id"], Leaf())
        return cls(root, estimands, d["max_depth"], d["min_size"], d["honest"], dict(d["gamma"]), tuple(d["covariates"]))

    @classmethod
    def from_json(cls, text: str) -> "NetworkCausalTree":
        return cls.from_dict(json.loads(text))


# -- splitting criteria ---------------------------------------------------------
def _partition_sums(data: Dataset, leaves: Sequence[Leaf], units, contrasts) -> list[LeafSums]:
    units = data.units if units is None else np.asarray(units, dtype=np.int64)
    terms = HTTerms(data, units, contrasts)
    X = data.X[units]
    out = []
    for leaf in leaves:
        mask = leaf.mask(X)
        out.append(LeafSums(*terms.sums(mask), terms.contrasts))
    return out


def _check_min_size(sums: Sequence[LeafSums], min_size: int) -> None:
    for s in sums:
        if s.size == 0 or min(s.counts()) < min_size:
            raise MinSizeViolated(f"leaf cell counts {s.counts()} below minimum size {min_size}")


def _criterion(sums: Sequence[LeafSums], t: int, penalty: float, n_tr: float) -> float:
    total = 0.0
    for s in sums:
        for c in s.contrasts[t]:
            if s.count(c) == 0:
                raise EmptyCell(c)
        total += s.size / n_tr * s.effect(t) ** 2 - penalty * s.effect_variance(t)
    return total


def q_single(
    data: Dataset,
    leaves: Sequence[Leaf],
    contrast,
    honest: bool = True,
    n_tr: int | None = None,
    n_est: int | None = None,
    units=None,
    min_size: int = 0,
) -> float:
    """In-sample (or honest) splitting criterion for one contrast; larger is better.

    ``units`` defaults to all eligible units and ``n_tr`` to their number.
    The honest version subtracts ``(1/n_tr + 1/n_est)`` times the summed leaf
    variances, all computed on ``units``.
    """
    contrast = Contrast.parse(contrast)
    sums = _partition_sums(data, leaves, units, [contrast])
    _check_min_size(sums, min_size)
    n_tr = n_tr or sum(s.size for s in sums)
    penalty = _penalty(honest, n_tr, n_est)
    return _criterion(sums, 0, penalty, n_tr)


def _penalty(honest: bool, n_tr, n_est) -> float:
    if not honest:
        return 0.0
    if not n_est:
        raise ValueError("the honest criterion needs the estimation sample size")
    return 1.0 / n_tr + 1.0 / n_est


def composite_gamma(data: Dataset, estimands: EstimandSet, units=None) -> dict[str, float]:
    """``omega / tau_root**2`` for every positively weighted contrast."""
    contrasts = [c for c, _ in estimands.active]
    root = _partition_sums(data, [Leaf()], units, contrasts)[0]
    gamma = {}
    for t, (c, w) in enumerate(estimands.active):
        tau = root.effect(t)
        if tau == 0.0 or not math.isfinite(tau):
            raise ZeroRootEffect(f"whole-sample estimate of {c.label} is {tau}; cannot normalise")
        gamma[c.label] = w / tau**2
    return gamma


def q_composite(
    data: Dataset,
    leaves: Sequence[Leaf],
    estimands: EstimandSet,
    honest: bool = True,
    n_tr: int | None = None,
    n_est: int | None = None,
    units=None,
    min_size: int = 0,
    gamma: Mapping[str, float] | None = None,
) -> float:
    """Weighted sum of single criteria with weights ``gamma`` (computed at the root if omitted)."""
    if gamma is None:
        gamma = composite_gamma(data, estimands, units)
    contrasts = [c for c, _ in estimands.active]
    sums = _partition_sums(data, leaves, units, contrasts)
    _check_min_size(sums, min_size)
    n_tr = n_tr or sum(s.size for s in sums)
    penalty = _penalty(honest, n_tr, n_est)
    return sum(gamma[c.label] * _criterion(sums, t, penalty, n_tr) for t, c in enumerate(contrasts))


# -- vectorised scoring for the grower ------------------------------------------
def _score_rows(U: np.ndarray, P: np.ndarray, contrasts, weights: np.ndarray, penalty: float, n_tr: float):
    """Objective contribution of each candidate leaf given its summed columns.

    ``U``/``P`` hold one candidate leaf per row. Rows with an empty leaf come
    back as ``nan``.
    """
    size = U[:, U_COUNT]
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = U[:, U_MU : U_MU + 4] / size[:, None]
        var = (U[:, U_VAR : U_VAR + 4] + P[:, P_CROSS : P_CROSS + 4] + P[:, P_CORR : P_CORR + 4]) / (size**2)[:, None]
        total = np.zeros(len(size))
        for t, (a, b) in enumerate(contrasts):
            tau = mean[:, a] - mean[:, b]
            cov = (U[:, U_DIAG + t] + P[:, P_COV + t]) / size**2
            vtau = var[:, a] + var[:, b] - 2.0 * cov
            total += weights[t] * (size / n_tr * tau**2 - penalty * vtau)
    return np.where(size > 0, total, np.nan)


def _scan_covariate(x: np.ndarray, U: np.ndarray, pi: np.ndarray, pj: np.ndarray, P: np.ndarray, cutoffs: np.ndarray):
    """Left/right column sums for every cutoff of one covariate.

    A unit goes left at cutoff ``k`` when ``x <= cutoffs[k]``; a pair sits in
    the left child when both ends do and in the right child when both do not.
    """
    nb = len(cutoffs) + 1
    bins = np.searchsorted(cutoffs, x, side="left").astype(np.int64)
    ub = np.cumsum(kernels.bin_sums(bins, U, nb), axis=0)
    left_U = ub[:-1]
    right_U = ub[-1] - left_U
    if len(pi):
        bi, bj = bins[pi], bins[pj]
        by_max = np.cumsum(kernels.bin_sums(np.ascontiguousarray(np.maximum(bi, bj)), P, nb), axis=0)
        by_min = np.cumsum(kernels.bin_sums(np.ascontiguousarray(np.minimum(bi, bj)), P, nb), axis=0)
        left_P = by_max[:-1]
        right_P = by_min[-1] - by_min[:-1]
    else:
        left_P = right_P = np.zeros((nb - 1, P.shape[1]))
    return left_U, right_U, left_P, right_P


def candidate_cutoffs(values: np.ndarray) -> np.ndarray:
    """Midpoints between consecutive distinct values."""
    u = np.unique(values)
    return (u[:-1] + u[1:]) / 2.0


class _Grower:
    def __init__(self, data: Dataset, train_units: np.ndarray, estimands: EstimandSet,
                 gamma: Mapping[str, float], penalty: float, n_tr: int, max_depth: int, min_size: int) -> None:
        self.data = data
        self.contrasts = tuple(c for c, _ in estimands.active)
        self.weights = np.array([gamma[c.label] for c in self.contrasts])
        self.terms = HTTerms(data, train_units, self.contrasts)
        self.X = data.X[train_units]
        self.penalty, self.n_tr = penalty, n_tr
        self.max_depth, self.min_size = max_depth, max(min_size, 1)
        self.next_id = 0

    def score(self, U, P) -> np.ndarray:
        return _score_rows(np.atleast_2d(U), np.atleast_2d(P), self.contrasts, self.weights, self.penalty, self.n_tr)

    def admissible(self, U) -> np.ndarray:
        return (U[:, U_CELL : U_CELL + 4] >= self.min_size - 0.5).all(axis=1)

    def grow(self, mask: np.ndarray, leaf: Leaf, depth: int, used: frozenset) -> TreeNode:
        terms = self.terms
        u, p = terms.sums(mask)
        sums = LeafSums(u, p, self.contrasts)
        node = TreeNode(id=self.next_id, depth=depth, leaf=leaf, train_cells=sums.counts())
        self.next_id += 1
        for t, c in enumerate(self.contrasts):
            if min(sums.count(c.a), sums.count(c.b)) > 0:
                node.train_effects[c.label] = sums.effect(t)
        if depth >= self.max_depth:
            return node
        parent = self.score(u, p)[0]
        if not np.isfinite(parent):
            return node

        idx = np.flatnonzero(mask)
        U = np.ascontiguousarray(terms.U[idx])
        local = np.full(terms.n, -1, dtype=np.int64)
        local[idx] = np.arange(len(idx))
        both = mask[terms.pair_i] & mask[terms.pair_j]
        pi, pj = local[terms.pair_i[both]], local[terms.pair_j[both]]
        P = np.ascontiguousarray(terms.P[both])

        best = (-np.inf, None, None)
        for cov in range(self.X.shape[1]):
            if cov in used:
                continue
            x = self.X[idx, cov]
            cutoffs = candidate_cutoffs(x)
            if cutoffs.size == 0:
                continue
            lU, rU, lP, rP = _scan_covariate(x, U, pi, pj, P, cutoffs)
            ok = self.admissible(lU) & self.admissible(rU)
            if not ok.any():
                continue
            total = self.score(lU, lP) + self.score(rU, rP)
            total = np.where(ok, total, -np.inf)
            k = int(np.argmax(total))  # first maximum: lowest cutoff wins ties
            if total[k] > best[0]:
                best = (float(total[k]), cov, float(cutoffs[k]))

        gain, cov, cut = best
        if cov is None or not gain > parent + SPLIT_TOLERANCE:
            return node
        node.split = (cov, cut)
        goes_left = self.X[:, cov] <= cut
        node.left = self.grow(mask & goes_left, leaf.refine(cov, "<=", cut), depth + 1, used | {cov})
        node.right = self.grow(mask & ~goes_left, leaf.refine(cov, ">", cut), depth + 1, used | {cov})
        return node


def grow_tree(
    data: Dataset,
    split: HonestSplit,
    estimands: EstimandSet,
    max_depth: int = 3,
    min_size: int = 20,
    honest: bool = True,
) -> NetworkCausalTree:
    """Phase 1: greedy depth-first growth on the discovery clusters.

    At each node every (covariate, cutoff) candidate is scored; the best one
    whose children all have at least ``min_size`` discovery units in each of
    the four exposure conditions is kept if it beats the unsplit node by more
    than ``1e-12``. Ties go to the lowest covariate index, then cutoff.
    """
    if max_depth < 0:
        raise ValueError("max_depth must be non-negative")
    train = data.units_in_clusters(split.train)
    if train.size == 0:
        raise ValueError("the discovery sample is empty")
    n_est = data.units_in_clusters(split.estimation).size
    n_tr = train.size
    if estimands.is_composite:
        gamma = composite_gamma(data, estimands, train)
    else:
        gamma = {estimands.active[0][0].label: 1.0}
    penalty = _penalty(honest, n_tr, n_est) if honest else 0.0
    grower = _Grower(data, train, estimands, gamma, penalty, n_tr, max_depth, min_size)
    root = grower.grow(np.ones(n_tr, dtype=bool), Leaf(), 0, frozenset())
    return NetworkCausalTree(root, estimands, max_depth, min_size, honest, gamma, data.covariate_names)


def estimate_leaves(
    tree: NetworkCausalTree,
    data: Dataset,
    split: HonestSplit,
    estimands: EstimandSet | None = None,
    level: float = 0.95,
) -> NetworkCausalTree:
    """Phase 2: HT estimates in every terminal leaf from estimation clusters only.

    Returns a copy of ``tree``. A contrast whose cells are empty in a leaf is
    stored as ``None`` (unavailable); the leaf itself is kept.
    """
    estimands = estimands or tree.estimands
    out = copy.deepcopy(tree)
    est_units = data.units_in_clusters(split.estimation)
    X = data.X[est_units]
    for node in out.leaves():
        members = est_units[node.leaf.mask(X)]
        node.estimates = {}
        if members.size == 0:
            node.est_cells = (0, 0, 0, 0)
            node.estimates = {c.label: None for c in estimands.contrasts}
            continue
        terms = HTTerms(data, members, estimands.contrasts)
        sums = LeafSums(*terms.sums(), terms.contrasts)
        node.est_cells = sums.counts()
        for t, c in enumerate(estimands.contrasts):
            try:
                node.estimates[c.label] = effect_from_sums(sums, t, level)
            except EmptyCell:
                node.estimates[c.label] = None
    return out


def predict_leaf(tree: NetworkCausalTree, x) -> TreeNode:
    """Terminal node containing covariate vector ``x``; ties at a cutoff go left."""
    x = np.asarray(x, dtype=float).ravel()
    node = tree.root
    while not node.is_leaf:
        cov, cut = node.split
        if cov >= x.size or not np.isfinite(x[cov]):
            raise MissingCovariate(f"covariate {cov} is required by the tree")
        node = node.left if x[cov] <= cut else node.right
    return node


def fit(
    data: Dataset,
    estimands: EstimandSet,
    max_depth: int = 3,
    min_size: int = 20,
    honest: bool = True,
    fraction: float = 0.5,
    seed=None,
) -> tuple[NetworkCausalTree, HonestSplit]:
    """Phases 0-2 in one call."""
    split = split_clusters(data, fraction, seed)
    tree = grow_tree(data, split, estimands, max_depth, min_size, honest)
    return estimate_leaves(tree, data, split, estimands), split
