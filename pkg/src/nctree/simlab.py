"""Synthetic scenarios and Monte Carlo evaluation of network causal trees.

Each replication draws clustered networks, covariates, a Bernoulli
assignment and potential outcomes, grows the composite tree and the two
single-effect trees on half of the clusters, and scores discovery and
estimation on the other half.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from nctree.design import BernoulliDesign, ThresholdExposure, assign_bernoulli
from nctree.estimator import TREATMENT, SPILLOVER, Contrast, Dataset, Leaf
from nctree.netgraph import generate_er_clusters, generate_homophilous_clusters
from nctree.nct import (
    EstimandSet,
    NetworkCausalTree,
    estimate_leaves,
    grow_tree,
    split_clusters,
)

log = logging.getLogger(__name__)

EFFECTS = {"tau": TREATMENT, "delta": SPILLOVER}
CRITERIA = ("composite", "single:1000", "single:0100")
FAILURE_LIMIT = 0.10


class InvalidRho(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid parameter; ``field`` names the offending setting."""

    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: int = 1
    h: float = 1.1
    clusters: int = 30
    cluster_size: int = 100
    edge_prob: float = 0.01
    alpha: float = 0.5
    n_covariates: int = 10
    rho: float = 0.0
    homophily: bool = False
    homophily_ratio: float = 3.0  # link odds for equal vs unequal X1, density kept fixed
    reps: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.scenario not in (1, 2):
            raise ConfigError("scenario", f"must be 1 or 2, got {self.scenario}")
        if not (math.isfinite(self.h) and self.h >= 0):
            raise ConfigError("h", f"must be a non-negative number, got {self.h}")
        if self.clusters < 2:
            raise ConfigError("clusters", f"need at least 2 clusters, got {self.clusters}")
        if self.cluster_size < 2:
            raise ConfigError("cluster_size", f"need at least 2 units per cluster, got {self.cluster_size}")
        if not (0.0 <= self.edge_prob <= 1.0):
            raise ConfigError("edge_prob", f"must lie in [0, 1], got {self.edge_prob}")
        if not (0.0 < self.alpha < 1.0):
            raise ConfigError("alpha", f"must lie in (0, 1), got {self.alpha}")
        if self.n_covariates < (3 if self.scenario == 2 else 2):
            raise ConfigError("n_covariates", f"scenario {self.scenario} needs more covariates")
        if not (0.0 <= self.rho < 1.0):
            raise ConfigError("rho", f"must lie in [0, 1), got {self.rho}")
        if self.homophily_ratio < 1.0:
            raise ConfigError("homophily_ratio", "must be at least 1")
        if self.homophily and 2 * self.edge_prob * self.homophily_ratio / (1 + self.homophily_ratio) > 1:
            raise ConfigError("edge_prob", "too large for the requested homophily ratio")
        if self.reps < 1:
            raise ConfigError("reps", f"must be at least 1, got {self.reps}")
        if self.seed < 0:
            raise ConfigError("seed", "must be non-negative")


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 2
    min_size: int = 20
    honest: bool = True
    weights: tuple[float, float] = (0.5, 0.5)  # (treatment, spillover) weights of the composite tree
    fraction: float = 0.5
    level: float = 0.95

    def __post_init__(self) -> None:
        if self.max_depth < 0:
            raise ConfigError("max_depth", "must be non-negative")
        if self.min_size < 1:
            raise ConfigError("min_size", "must be at least 1")
        if sum(w > 0 for w in self.weights) < 2 or any(not (0 <= w <= 1) for w in self.weights):
            raise ConfigError("weights", "the composite tree needs two weights in (0, 1]")
        if not (0.0 < self.fraction < 1.0):
            raise ConfigError("fraction", "must lie in (0, 1)")
        if not (0.0 < self.level < 1.0):
            raise ConfigError("level", "must lie in (0, 1)")


def rule(*pairs: tuple[int, int]) -> frozenset:
    """Rule ``{X_p = v, ...}`` on binary covariates as a set of leaf constraints."""
    return frozenset((p, "<=" if v == 0 else ">", 0.5) for p, v in pairs)


def scenario_rules(scenario: int) -> dict[str, tuple[frozenset, ...]]:
    if scenario == 1:
        both = (rule((0, 0), (1, 0)), rule((0, 1), (1, 1)))
        return {"tau": both, "delta": both}
    return {
        "tau": (rule((0, 0), (1, 0)), rule((0, 0), (1, 1))),
        "delta": (rule((0, 1), (2, 0)), rule((0, 1), (2, 1))),
    }


def true_effects(X: np.ndarray, scenario: int, h: float) -> tuple[np.ndarray, np.ndarray]:
    x1, x2 = X[:, 0] > 0.5, X[:, 1] > 0.5
    if scenario == 1:
        eff = np.where(~x1 & ~x2, h, np.where(x1 & x2, -h, 0.0))
        return eff, eff.copy()
    x3 = X[:, 2] > 0.5
    tau = np.where(~x1 & ~x2, h, np.where(~x1 & x2, 3 * h, 0.0))
    delta = np.where(x1 & ~x3, h, np.where(x1 & x3, 3 * h, 0.0))
    return tau, delta


def correlated_binary_covariates(n: int, P: int, rho: float, seed=None) -> np.ndarray:
    """Binary columns with mean 0.5 from an equicorrelated Gaussian cut at zero.

    The latent correlation is ``rho``; the resulting binary (phi) correlation
    is ``2 * arcsin(rho) / pi``.
    """
    if not (0.0 <= rho < 1.0):
        raise InvalidRho(f"rho must lie in [0, 1), got {rho}")
    rng = np.random.default_rng(seed)
    common = rng.standard_normal((n, 1))
    own = rng.standard_normal((n, P))
    z = math.sqrt(rho) * common + math.sqrt(1.0 - rho) * own
    return (z > 0).astype(float)


@dataclass
class Scenario:
    data: Dataset
    tau: np.ndarray
    delta: np.ndarray
    rules: dict
    potential: np.ndarray  # (n, 4) outcomes in cell order
    removed: int = 0


def _streams(seed: int, rep: int, k: int) -> list[int]:
    ss = np.random.SeedSequence(seed, spawn_key=(rep,))
    return [int(c.generate_state(1)[0]) for c in ss.spawn(k)]


def generate_scenario(config: ScenarioConfig, rep: int = 0) -> Scenario:
    """One synthetic data set; replication ``rep`` of the master seed."""
    s_cov, s_net, s_w, s_y = _streams(config.seed, rep, 4)
    K, n = config.clusters, config.cluster_size
    X = correlated_binary_covariates(K * n, config.n_covariates, config.rho, s_cov)
    if config.homophily:
        r = config.homophily_ratio
        p_base = 2 * config.edge_prob / (1 + r)
        net = generate_homophilous_clusters(K, n, p_base, p_base * r, X[:, 0].astype(int), s_net)
    else:
        net = generate_er_clusters(K, n, config.edge_prob, s_net)
    keep = (net.out_degree + net.in_degree) > 0
    removed = int((~keep).sum())
    if removed:
        net, X = net.subnetwork(keep), X[keep]

    design, mapping = BernoulliDesign(config.alpha), ThresholdExposure(1)
    W = assign_bernoulli(net, design, s_w)
    tau, delta = true_effects(X, config.scenario, config.h)
    rng = np.random.default_rng(s_y)
    y00 = rng.standard_normal(net.n_units)
    y11 = rng.standard_normal(net.n_units)
    potential = np.column_stack([y00, y00 + tau, y00 + delta, y11])
    data = Dataset.build(net, W, np.zeros(net.n_units), X, design, mapping)
    Y = potential[np.arange(net.n_units), data.cells]
    data = data.with_outcomes(W, Y)
    rules = scenario_rules(config.scenario) if config.h > 0 else {"tau": (), "delta": ()}
    return Scenario(data, tau, delta, rules, potential, removed)


def leaf_rule(leaf: Leaf) -> frozenset:
    return frozenset(leaf.constraints)


def count_correct_rules(tree: NetworkCausalTree, rules: Sequence[frozenset], refinement: bool = False) -> int:
    """Number of true rules matched by a terminal leaf.

    By default a leaf matches only when its constraint set equals the rule;
    with ``refinement`` a leaf nested inside the rule also matches.
    """
    leaves = [leaf_rule(n.leaf) for n in tree.leaves()]
    found = 0
    for r in set(rules):
        if any(lr == r or (refinement and r <= lr) for lr in leaves):
            found += 1
    return found


def unit_metrics(truth, point, low, high) -> tuple[float, float, float]:
    """Bias (truth minus estimate), MSE and CI coverage averaged over units."""
    truth, point = np.asarray(truth, float), np.asarray(point, float)
    if truth.size == 0:
        return math.nan, math.nan, math.nan
    err = truth - point
    covered = (np.asarray(low) <= truth) & (truth <= np.asarray(high))
    return float(err.mean()), float((err**2).mean()), float(covered.mean())


@dataclass
class ReplicationResult:
    rep: int
    discovery: dict  # criterion -> {"all"|"tau"|"delta": count}
    metrics: dict  # criterion -> effect -> (bias, mse, coverage, excluded units)
    leaves: dict  # criterion -> effect -> rule index -> (estimate, se)
    removed: int = 0


@dataclass
class ReplicationFailure:
    rep: int
    error: str


def _estimand_sets(params: TreeParams) -> dict[str, EstimandSet]:
    both = (TREATMENT, SPILLOVER)
    return {
        "composite": EstimandSet(both, tuple(float(w) for w in params.weights)),
        "single:1000": EstimandSet.single(TREATMENT, [SPILLOVER]),
        "single:0100": EstimandSet.single(SPILLOVER, [TREATMENT]),
    }


def run_replication(config: ScenarioConfig, params: TreeParams, rep: int, oracle: bool = False):
    """Generate, grow the three trees and score them; exceptions become failures."""
    try:
        return _replicate(config, params, rep, oracle)
    except Exception as exc:  # a failed replication is counted, never fatal
        log.warning("replication %d failed: %s", rep, exc)
        return ReplicationFailure(rep, f"{type(exc).__name__}: {exc}")


def _replicate(config: ScenarioConfig, params: TreeParams, rep: int, oracle: bool) -> ReplicationResult:
    sc = generate_scenario(config, rep)
    data = sc.data
    (s_split,) = _streams(config.seed, rep, 5)[4:]
    split = split_clusters(data, params.fraction, s_split)
    est_units = data.units_in_clusters(split.estimation)
    X_est = data.X[est_units]
    truths = {"tau": sc.tau[est_units], "delta": sc.delta[est_units]}
    all_rules = tuple(dict.fromkeys(sc.rules["tau"] + sc.rules["delta"]))

    discovery, metrics, leaves = {}, {}, {}
    for name, estimands in _estimand_sets(params).items():
        tree = grow_tree(data, split, estimands, params.max_depth, params.min_size, params.honest)
        tree = estimate_leaves(tree, data, split, estimands, params.level)
        discovery[name] = {
            "all": count_correct_rules(tree, all_rules),
            "tau": count_correct_rules(tree, sc.rules["tau"]),
            "delta": count_correct_rules(tree, sc.rules["delta"]),
        }
        terminal = tree.leaves()
        member = np.zeros(len(est_units), dtype=np.int64)
        for pos, node in enumerate(terminal):
            member[node.leaf.mask(X_est)] = pos
        metrics[name], leaves[name] = {}, {}
        for effect, contrast in EFFECTS.items():
            truth = truths[effect]
            if oracle:
                metrics[name][effect] = (*unit_metrics(truth, truth, truth, truth), 0)
            else:
                ests = [node.estimates.get(contrast.label) for node in terminal]
                ok = np.array([e is not None for e in ests])[member]
                pick = lambda attr: np.array([getattr(e, attr) if e else np.nan for e in ests])[member][ok]
                metrics[name][effect] = (
                    *unit_metrics(truth[ok], pick("point"), pick("ci_low"), pick("ci_high")),
                    int((~ok).sum()),
                )
            found = {}
            for r_idx, r in enumerate(sc.rules[effect]):
                for node in terminal:
                    e = node.estimates.get(contrast.label)
                    if leaf_rule(node.leaf) == r and e is not None:
                        found[r_idx] = (e.point, e.std_error)
            leaves[name][effect] = found
    return ReplicationResult(rep, discovery, metrics, leaves, sc.removed)


@dataclass
class MetricsReport:
    """Monte Carlo summary of one configuration.

    ``estimation[criterion][effect]`` holds bias, MSE, coverage, the number of
    replications they average over and the total of excluded units;
    ``leaf_means[criterion][effect][r]`` holds the mean estimate, mean se and
    the number of replications in which true rule ``r`` was discovered;
    ``discovery[criterion][subset]`` the mean number of rules found.
    """

    config: ScenarioConfig
    params: TreeParams
    estimation: dict
    leaf_means: dict
    discovery: dict
    n_ok: int
    failures: list = field(default_factory=list)

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    @property
    def failure_rate(self) -> float:
        return self.n_failed / self.config.reps

    def rule_labels(self, effect: str) -> list[str]:
        return [Leaf(tuple(sorted(r))).describe() for r in scenario_rules(self.config.scenario)[effect]]


def aggregate(config: ScenarioConfig, params: TreeParams, results: Sequence) -> MetricsReport:
    results = sorted(results, key=lambda r: r.rep)
    ok = [r for r in results if isinstance(r, ReplicationResult)]
    failures = [r for r in results if isinstance(r, ReplicationFailure)]
    estimation, leaf_means, discovery = {}, {}, {}
    n_rules = len(scenario_rules(config.scenario)["tau"])
    for name in CRITERIA:
        discovery[name] = {
            s: float(np.mean([r.discovery[name][s] for r in ok])) if ok else math.nan
            for s in ("all", "tau", "delta")
        }
        estimation[name], leaf_means[name] = {}, {}
        for effect in EFFECTS:
            rows = np.array([r.metrics[name][effect][:3] for r in ok]).reshape(-1, 3)
            finite = np.isfinite(rows).all(axis=1)
            mean = rows[finite].mean(axis=0) if finite.any() else np.full(3, math.nan)
            excluded = sum(r.metrics[name][effect][3] for r in ok)
            estimation[name][effect] = {
                "bias": float(mean[0]),
                "mse": float(mean[1]),
                "coverage": float(mean[2]),
                "reps": int(finite.sum()),
                "excluded_units": int(excluded),
            }
            per_rule = []
            for r_idx in range(n_rules):
                hits = np.array([r.leaves[name][effect][r_idx] for r in ok if r_idx in r.leaves[name][effect]])
                if hits.size:
                    per_rule.append({"mean_est": float(hits[:, 0].mean()), "mean_se": float(hits[:, 1].mean()), "found": len(hits)})
                else:
                    per_rule.append({"mean_est": math.nan, "mean_se": math.nan, "found": 0})
            leaf_means[name][effect] = per_rule
    return MetricsReport(config, params, estimation, leaf_means, discovery, len(ok), failures)


def run_replications(
    config: ScenarioConfig,
    params: TreeParams | None = None,
    jobs: int = 1,
    oracle: bool = False,
    runner: Callable | None = None,
) -> MetricsReport:
    """Run ``config.reps`` replications, in parallel when ``jobs > 1``.

    Results are folded in replication order, so the report does not depend
    on ``jobs``. ``oracle`` replaces every unit's estimate by its true effect
    (a perfect estimator) while keeping the discovery step unchanged.
    """
    params = params or TreeParams()
    runner = runner or run_replication
    reps = range(config.reps)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(runner, [config] * len(reps), [params] * len(reps), reps, [oracle] * len(reps)))
    else:
        results = [runner(config, params, r, oracle) for r in reps]
    return aggregate(config, params, results)


# -- output -------------------------------------------------------------------
def _fmt(x: float) -> str:
    return "nan" if not math.isfinite(x) else repr(round(float(x), 12))


def write_metrics_csv(reports: Sequence[MetricsReport], path, criterion: str = "composite") -> None:
    """Rows ``effect,h,leaf,mean_est,mean_se,mse,bias,coverage`` for each true rule leaf."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["effect", "h", "leaf", "mean_est", "mean_se", "mse", "bias", "coverage"])
        for rep in reports:
            for effect in EFFECTS:
                est = rep.estimation[criterion][effect]
                for label, lm in zip(rep.rule_labels(effect), rep.leaf_means[criterion][effect]):
                    w.writerow([effect, _fmt(rep.config.h), label, _fmt(lm["mean_est"]), _fmt(lm["mean_se"]),
                                _fmt(est["mse"]), _fmt(est["bias"]), _fmt(est["coverage"])])


def write_discovery_csv(reports: Sequence[MetricsReport], path) -> None:
    """Rows ``criterion,h,mean_correct_rules``.

    The plain criterion name counts all true rules; ``@tau``/``@delta``
    suffixes restrict the count to one effect's rules.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["criterion", "h", "mean_correct_rules"])
        for rep in reports:
            for name in CRITERIA:
                for subset in ("all", "tau", "delta"):
                    label = name if subset == "all" else f"{name}@{subset}"
                    w.writerow([label, _fmt(rep.config.h), _fmt(rep.discovery[name][subset])])


def config_items(obj) -> list[tuple[str, object]]:
    return [(f.name, getattr(obj, f.name)) for f in fields(obj)]
