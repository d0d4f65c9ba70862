"""Horvitz-Thompson estimation of leaf-specific potential outcomes and effects.

Every estimator here is a sum over units plus a sum over dependent unit pairs
of the same cluster. :class:`HTTerms` materialises those per-unit and per-pair
summands once, so a leaf estimate is two masked column sums. The tree grower
reuses exactly the same summands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from statistics import NormalDist
from typing import NamedTuple, Sequence

import numpy as np

from nctree.design import (
    CELLS,
    BernoulliDesign,
    ProbabilityTable,
    ThresholdExposure,
    cell_index,
    cell_label,
    compute_exposures,
)
from nctree.netgraph import ClusteredNetwork


class EmptyCell(ValueError):
    """No unit of the leaf was observed in the requested exposure condition."""

    def __init__(self, cell: int, message: str | None = None) -> None:
        self.cell = cell
        super().__init__(message or f"no unit observed in condition {CELLS[cell]}")


class InvalidLevel(ValueError):
    pass


class Contrast(NamedTuple):
    """Comparison of cell ``a`` against cell ``b`` (cell index ``w + 2 g``)."""

    a: int
    b: int

    @property
    def label(self) -> str:
        return cell_label(self.a) + cell_label(self.b)

    @property
    def conditions(self) -> tuple[tuple[int, int], tuple[int, int]]:
        return CELLS[self.a], CELLS[self.b]

    @classmethod
    def parse(cls, text) -> "Contrast":
        """Accept ``"1000"``, ``"w1000"``, ``((1, 0), (0, 0))`` or a Contrast."""
        if isinstance(text, Contrast):
            return text
        if isinstance(text, str):
            digits = text.strip().lower().removeprefix("w")
            if len(digits) != 4 or set(digits) - {"0", "1"}:
                raise ValueError(f"cannot parse contrast {text!r}")
            w, g, w2, g2 = (int(ch) for ch in digits)
            return cls(cell_index(w, g), cell_index(w2, g2))
        (w, g), (w2, g2) = text
        return cls(cell_index(w, g), cell_index(w2, g2))


TREATMENT = Contrast.parse("1000")
SPILLOVER = Contrast.parse("0100")


@dataclass(frozen=True)
class Leaf:
    """Conjunction of ``(covariate, relation, cutoff)`` constraints.

    Relations are ``"<="``, ``">"`` or ``"="``. The empty leaf is the whole
    covariate space.
    """

    constraints: tuple[tuple[int, str, float], ...] = ()

    def __post_init__(self) -> None:
        for _, rel, _ in self.constraints:
            if rel not in ("<=", ">", "="):
                raise ValueError(f"unknown relation {rel!r}")

    def mask(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        keep = np.ones(X.shape[0], dtype=bool)
        for p, rel, cut in self.constraints:
            col = X[:, p]
            if rel == "<=":
                keep &= col <= cut
            elif rel == ">":
                keep &= col > cut
            else:
                keep &= col == cut
        return keep

    def contains(self, x) -> bool:
        return bool(self.mask(np.asarray(x, dtype=float)[None, :])[0])

    def refine(self, covariate: int, relation: str, cutoff: float) -> "Leaf":
        return Leaf(self.constraints + ((covariate, relation, cutoff),))

    def describe(self, names: Sequence[str] | None = None) -> str:
        if not self.constraints:
            return "all"
        parts = []
        for p, rel, cut in self.constraints:
            name = names[p] if names else f"X{p + 1}"
            parts.append(f"{name}{rel}{cut:g}")
        return "&".join(parts)


@dataclass
class Dataset:
    """Observed data on a clustered network plus its design probabilities.

    ``eligible`` marks the units that pass the positivity filter; ineligible
    units stay in the network because their treatments still drive their
    neighbours' exposures, but they are never analysed.
    """

    network: ClusteredNetwork
    W: np.ndarray
    G: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    design: BernoulliDesign
    mapping: ThresholdExposure
    probs: ProbabilityTable
    eligible: np.ndarray
    covariate_names: tuple[str, ...] = field(default=())

    @classmethod
    def build(
        cls,
        network: ClusteredNetwork,
        W,
        Y,
        X,
        design: BernoulliDesign,
        mapping: ThresholdExposure,
        probs: ProbabilityTable | None = None,
        covariate_names: Sequence[str] = (),
    ) -> "Dataset":
        W = np.asarray(W, dtype=np.int8)
        if W.shape != (network.n_units,) or set(np.unique(W).tolist()) - {0, 1}:
            raise ValueError("W must be a 0/1 vector with one entry per unit")
        Y = np.asarray(Y, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if Y.shape != W.shape or X.shape[0] != W.size:
            raise ValueError("Y and X must have one row per unit")
        if probs is None:
            probs = ProbabilityTable(network, design, mapping)
        eligible = (probs.marginal > 0).all(axis=1)
        G = compute_exposures(network, W, mapping)
        names = tuple(covariate_names) or tuple(f"X{p + 1}" for p in range(X.shape[1]))
        return cls(network, W, G, Y, X, design, mapping, probs, eligible, names)

    def with_outcomes(self, W, Y) -> "Dataset":
        """Same network, covariates and probabilities under a new assignment."""
        W = np.asarray(W, dtype=np.int8)
        return replace(
            self, W=W, G=compute_exposures(self.network, W, self.mapping), Y=np.asarray(Y, dtype=float)
        )

    @property
    def n_units(self) -> int:
        return self.network.n_units

    @property
    def units(self) -> np.ndarray:
        return np.flatnonzero(self.eligible)

    @property
    def cells(self) -> np.ndarray:
        return self.W.astype(np.int64) + 2 * self.G.astype(np.int64)

    def validate(self) -> None:
        if not np.array_equal(self.G, compute_exposures(self.network, self.W, self.mapping)):
            raise ValueError("stored exposures disagree with network and assignment")
        if not (self.probs.marginal[self.eligible] > 0).all():
            raise ValueError("eligible unit with a zero marginal probability")

    def units_in_clusters(self, blocks) -> np.ndarray:
        """Eligible units whose cluster block index is in ``blocks``."""
        inside = np.isin(self.network.cluster_index, np.asarray(list(blocks), dtype=np.int64))
        return np.flatnonzero(inside & self.eligible)


# Column layout of the per-unit and per-pair summand matrices.
U_COUNT = 0
U_CELL = 1  # 4 cell indicators
U_MU = 5  # 4 HT outcome terms
U_VAR = 9  # 4 own-variance terms
U_DIAG = 13  # one covariance diagonal term per contrast
P_CROSS = 0  # 4 same-cell cross terms over pairs with positive joint probability
P_CORR = 4  # 4 same-cell corrections over pairs with zero joint probability
P_COV = 8  # one covariance term per contrast


class HTTerms:
    """Per-unit and per-pair summands of the HT estimators for a unit subset.

    Parameters
    ----------
    data : Dataset
    units : array of int
        Global indices of the analysed units (must be eligible).
    contrasts : sequence of Contrast
        Contrasts whose covariance terms are needed.
    """

    def __init__(self, data: Dataset, units, contrasts: Sequence[Contrast] = ()) -> None:
        units = np.asarray(units, dtype=np.int64)
        if not data.eligible[units].all():
            raise ValueError("HT terms requested for units failing positivity")
        self.units = units
        self.contrasts = tuple(Contrast.parse(c) for c in contrasts)
        T = len(self.contrasts)
        n = len(units)

        Y = data.Y[units]
        pi = data.probs.marginal[units]
        ind = np.zeros((n, 4))
        ind[np.arange(n), data.cells[units]] = 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            # cells with pi = 0 are never observed; their zero indicator wins
            ipw = np.where(ind > 0, Y[:, None] / pi, 0.0)
            half = np.where(ind > 0, Y[:, None] ** 2 / pi, 0.0)

        U = np.zeros((n, U_DIAG + T))
        U[:, U_COUNT] = 1.0
        U[:, U_CELL : U_CELL + 4] = ind
        U[:, U_MU : U_MU + 4] = ipw
        U[:, U_VAR : U_VAR + 4] = (1.0 - pi) * ipw**2
        for t, (a, b) in enumerate(self.contrasts):
            U[:, U_DIAG + t] = -0.5 * (half[:, a] + half[:, b])
        self.U = U

        # dependent pairs with both ends in the subset, as local positions
        local = np.full(data.n_units, -1, dtype=np.int64)
        local[units] = np.arange(n)
        li, lj = local[data.probs.pair_i], local[data.probs.pair_j]
        keep = (li >= 0) & (lj >= 0)
        self.pair_i, self.pair_j = li[keep], lj[keep]
        joint = data.probs.pair_probs[keep]
        pi_i, pi_j = pi[self.pair_i], pi[self.pair_j]
        ipw_i, ipw_j = ipw[self.pair_i], ipw[self.pair_j]
        half_i, half_j = half[self.pair_i], half[self.pair_j]

        P = np.zeros((len(self.pair_i), P_COV + T))
        for c in range(4):
            pp = joint[:, c, c]
            pos = pp > 0
            ratio = np.divide(pp - pi_i[:, c] * pi_j[:, c], pp, out=np.zeros_like(pp), where=pos)
            # each unordered pair stands for (i, j) and (j, i) in the double sum
            P[:, P_CROSS + c] = 2.0 * ratio * ipw_i[:, c] * ipw_j[:, c]
            P[:, P_CORR + c] = np.where(pos, 0.0, half_i[:, c] + half_j[:, c])
        for t, (a, b) in enumerate(self.contrasts):
            P[:, P_COV + t] = _cov_pair_term(joint[:, a, b], pi_i[:, a], pi_j[:, b], ipw_i[:, a], ipw_j[:, b], half_i[:, a], half_j[:, b]) + _cov_pair_term(
                joint[:, b, a], pi_j[:, a], pi_i[:, b], ipw_j[:, a], ipw_i[:, b], half_j[:, a], half_i[:, b]
            )
        self.P = P

    @property
    def n(self) -> int:
        return len(self.units)

    def sums(self, mask=None) -> tuple[np.ndarray, np.ndarray]:
        """Column sums over units in ``mask`` and over pairs with both ends in it."""
        if mask is None:
            return self.U.sum(axis=0), self.P.sum(axis=0)
        mask = np.asarray(mask, dtype=bool)
        both = mask[self.pair_i] & mask[self.pair_j]
        return self.U[mask].sum(axis=0), self.P[both].sum(axis=0)


def _cov_pair_term(joint, pa, pb, ipw_a, ipw_b, half_a, half_b):
    """Ordered-pair covariance summand: first unit in cell ``a``, second in ``b``."""
    pos = joint > 0
    ratio = np.divide(joint - pa * pb, joint, out=np.zeros_like(joint), where=pos)
    return np.where(pos, ratio * ipw_a * ipw_b, -0.5 * (half_a + half_b))


class LeafSums:
    """Estimates derived from the summed columns of :class:`HTTerms`."""

    __slots__ = ("u", "p", "contrasts")

    def __init__(self, u: np.ndarray, p: np.ndarray, contrasts: Sequence[Contrast]) -> None:
        self.u, self.p, self.contrasts = u, p, contrasts

    @property
    def size(self) -> float:
        return float(self.u[U_COUNT])

    def count(self, c: int) -> int:
        return int(round(self.u[U_CELL + c]))

    def counts(self) -> tuple[int, int, int, int]:
        return tuple(self.count(c) for c in range(4))

    def mean(self, c: int) -> float:
        return float(self.u[U_MU + c] / self.size)

    def variance_parts(self, c: int) -> tuple[float, float, float]:
        n2 = self.size**2
        return (
            float(self.u[U_VAR + c] / n2),
            float(self.p[P_CROSS + c] / n2),
            float(self.p[P_CORR + c] / n2),
        )

    def variance(self, c: int) -> float:
        return float(sum(self.variance_parts(c)))

    def covariance(self, t: int) -> float:
        return float((self.u[U_DIAG + t] + self.p[P_COV + t]) / self.size**2)

    def effect(self, t: int) -> float:
        a, b = self.contrasts[t]
        return self.mean(a) - self.mean(b)

    def effect_variance(self, t: int) -> float:
        a, b = self.contrasts[t]
        return self.variance(a) + self.variance(b) - 2.0 * self.covariance(t)


@dataclass(frozen=True)
class EffectEstimate:
    contrast: Contrast
    point: float
    variance: float
    std_error: float
    ci_low: float
    ci_high: float
    n_cell: tuple[int, int, int, int]
    clamped: bool = False
    level: float = 0.95


def _z(level: float) -> float:
    if not (0.0 < level < 1.0):
        raise InvalidLevel(f"confidence level must lie in (0, 1), got {level!r}")
    return NormalDist().inv_cdf(0.5 + level / 2.0)


def confidence_interval(estimate, level: float = 0.95) -> tuple[float, float]:
    """Symmetric normal interval for an :class:`EffectEstimate` or a ``(point, se)`` pair."""
    if isinstance(estimate, EffectEstimate):
        point, se = estimate.point, estimate.std_error
    else:
        point, se = estimate
    half = _z(level) * se
    return point - half, point + half


def _members(data: Dataset, leaf: Leaf | None, units) -> np.ndarray:
    base = data.units if units is None else np.asarray(units, dtype=np.int64)
    if leaf is None or not leaf.constraints:
        return base
    return base[leaf.mask(data.X[base])]


def _leaf_sums(data: Dataset, leaf: Leaf | None, units, contrasts=()) -> LeafSums:
    members = _members(data, leaf, units)
    if members.size == 0:
        raise ValueError("leaf has no members")
    terms = HTTerms(data, members, contrasts)
    return LeafSums(*terms.sums(), terms.contrasts)


def leaf_mean(
    data: Dataset, leaf: Leaf | None, condition: tuple[int, int], units=None, allow_empty: bool = False
) -> tuple[float, int]:
    """HT estimate of the leaf's average potential outcome under ``condition``.

    Returns ``(estimate, matched)``. With no matched unit :class:`EmptyCell`
    is raised unless ``allow_empty`` is set, in which case the formal HT sum
    (zero) is returned.
    """
    c = cell_index(*condition)
    s = _leaf_sums(data, leaf, units)
    if s.count(c) == 0 and not allow_empty:
        raise EmptyCell(c)
    return s.mean(c), s.count(c)


def leaf_mean_variance(
    data: Dataset,
    leaf: Leaf | None,
    condition: tuple[int, int],
    units=None,
    allow_empty: bool = False,
    components: bool = False,
):
    """Estimated variance of :func:`leaf_mean`.

    The value is the sum of the own-unit term, the cross term over dependent
    same-cluster pairs with positive joint probability, and the conservative
    correction over pairs that can never share the condition. It is *not*
    clamped; a finite-sample negative value is returned as is. With
    ``components=True`` a dict of the three parts is returned instead.
    """
    c = cell_index(*condition)
    s = _leaf_sums(data, leaf, units)
    if s.count(c) == 0 and not allow_empty:
        raise EmptyCell(c)
    own, cross, corr = s.variance_parts(c)
    if components:
        return {"own": own, "cross": cross, "correction": corr}
    return own + cross + corr


def leaf_covariance(data: Dataset, leaf: Leaf | None, contrast, units=None) -> float:
    contrast = Contrast.parse(contrast)
    s = _leaf_sums(data, leaf, units, [contrast])
    return s.covariance(0)


def effect_from_sums(s: LeafSums, t: int, level: float = 0.95) -> EffectEstimate:
    contrast = s.contrasts[t]
    for c in contrast:
        if s.count(c) == 0:
            raise EmptyCell(c, f"contrast {contrast.label}: no unit observed in condition {CELLS[c]}")
    point = s.effect(t)
    raw = s.effect_variance(t)
    clamped = raw < 0.0
    var = 0.0 if clamped else raw
    se = math.sqrt(var)
    low, high = confidence_interval((point, se), level)
    return EffectEstimate(contrast, point, var, se, low, high, s.counts(), clamped, level)


def leaf_effect(data: Dataset, leaf: Leaf | None, contrast, units=None, level: float = 0.95) -> EffectEstimate:
    """Point estimate, variance and normal interval of a leaf-specific contrast.

    Negative variance estimates are clamped to zero and flagged on the result.
    """
    contrast = Contrast.parse(contrast)
    s = _leaf_sums(data, leaf, units, [contrast])
    return effect_from_sums(s, 0, level)
