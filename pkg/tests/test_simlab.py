import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2_contingency

from nctree import simlab
from nctree.estimator import Leaf
from nctree.nct import EstimandSet, NetworkCausalTree, TreeNode
from nctree.simlab import (
    ConfigError,
    InvalidRho,
    ReplicationFailure,
    ReplicationResult,
    ScenarioConfig,
    TreeParams,
    correlated_binary_covariates,
    count_correct_rules,
    generate_scenario,
    rule,
    run_replication,
    run_replications,
    scenario_rules,
    true_effects,
    unit_metrics,
    write_discovery_csv,
    write_metrics_csv,
)

SMALL = dict(clusters=6, cluster_size=40, edge_prob=0.06, reps=3, seed=1)
LOOSE = TreeParams(max_depth=2, min_size=2)


def tree_from_splits(splits):
    """Tree whose node ``path`` (tuple of 0/1 choices) splits at ``splits[path]``."""
    def build(path, leaf, depth):
        node = TreeNode(id=len(path), depth=depth, leaf=leaf)
        if path in splits:
            p, cut = splits[path]
            node.split = (p, cut)
            node.left = build(path + (0,), leaf.refine(p, "<=", cut), depth + 1)
            node.right = build(path + (1,), leaf.refine(p, ">", cut), depth + 1)
        return node

    est = EstimandSet.composite({"1000": 0.5, "0100": 0.5})
    return NetworkCausalTree(build((), Leaf(), 0), est, 3, 1, True, {})


class TestScenarioEffects:
    def test_scenario_one(self):
        X = np.array([[0, 0], [1, 1], [0, 1], [1, 0]], dtype=float)
        tau, delta = true_effects(np.hstack([X, np.zeros((4, 1))]), 1, 5.1)
        assert tau.tolist() == [5.1, -5.1, 0.0, 0.0] and (tau == delta).all()

    def test_scenario_two(self):
        X = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0], [1, 1, 1]], dtype=float)
        tau, delta = true_effects(X, 2, 1.1)
        assert tau[0] == pytest.approx(3.3) and tau[1] == pytest.approx(1.1) and tau[2:].tolist() == [0, 0]
        assert delta.tolist()[:2] == [0, 0] and delta[2] == pytest.approx(1.1) and delta[3] == pytest.approx(3.3)

    def test_rules_agree_with_effects(self):
        X = np.array(list(np.ndindex(2, 2, 2)), dtype=float)
        for s in (1, 2):
            tau, delta = true_effects(X, s, 1.0)
            for effect, values in (("tau", tau), ("delta", delta)):
                covered = np.zeros(len(X), dtype=bool)
                for r in scenario_rules(s)[effect]:
                    covered |= Leaf(tuple(sorted(r))).mask(X)
                assert (covered == (values != 0)).all()


class TestCovariates:
    def test_independent_columns(self):
        # chi-square independence test at 1%: the rejection rate stays near the nominal level
        rejected = 0
        for rep in range(500):
            X = correlated_binary_covariates(400, 2, 0.0, seed=rep).astype(int)
            table = np.zeros((2, 2))
            np.add.at(table, (X[:, 0], X[:, 1]), 1)
            rejected += chi2_contingency(table, correction=False).pvalue < 0.01
        assert rejected / 500 < 0.03

    def test_correlation(self):
        X = correlated_binary_covariates(100_000, 3, 0.5, seed=1)
        corr = np.corrcoef(X.T)[np.triu_indices(3, 1)]
        # phi coefficient of two half-split Gaussians with correlation 0.5
        assert np.abs(corr - 2 * math.asin(0.5) / math.pi).max() < 0.03
        assert np.abs(X.mean(axis=0) - 0.5).max() < 0.01

    @pytest.mark.parametrize("rho", [-0.1, 1.0, 1.2])
    def test_invalid_rho(self, rho):
        with pytest.raises(InvalidRho):
            correlated_binary_covariates(10, 2, rho)


class TestConfig:
    def test_rho_field_named(self):
        with pytest.raises(ConfigError) as err:
            ScenarioConfig(rho=1.2)
        assert err.value.field == "rho"

    @pytest.mark.parametrize("kw,field", [({"alpha": 1.0}, "alpha"), ({"clusters": 1}, "clusters"), ({"scenario": 3}, "scenario")])
    def test_other_fields(self, kw, field):
        with pytest.raises(ConfigError) as err:
            ScenarioConfig(**kw)
        assert err.value.field == field

    def test_tree_params(self):
        with pytest.raises(ConfigError):
            TreeParams(weights=(1.0, 0.0))


class TestGenerate:
    def test_outcomes_consistent(self):
        sc = generate_scenario(ScenarioConfig(**SMALL), rep=0)
        d = sc.data
        d.validate()
        assert np.array_equal(d.Y, sc.potential[np.arange(d.n_units), d.cells])
        np.testing.assert_allclose(sc.potential[:, 1] - sc.potential[:, 0], sc.tau)
        np.testing.assert_allclose(sc.potential[:, 2] - sc.potential[:, 0], sc.delta)

    def test_isolates_dropped(self):
        sc = generate_scenario(ScenarioConfig(**SMALL), rep=2)
        net = sc.data.network
        assert ((net.out_degree + net.in_degree) > 0).all()
        assert sc.removed + net.n_units == 6 * 40

    def test_reps_differ_and_repeat(self):
        cfg = ScenarioConfig(**SMALL)
        a, b = generate_scenario(cfg, 0), generate_scenario(cfg, 1)
        assert not np.array_equal(a.data.W[:50], b.data.W[:50])
        assert np.array_equal(a.data.Y, generate_scenario(cfg, 0).data.Y)

    def test_zero_h_has_no_rules(self):
        sc = generate_scenario(ScenarioConfig(h=0.0, **SMALL))
        assert sc.rules == {"tau": (), "delta": ()} and not sc.tau.any()

    def test_homophily_same_x1(self):
        cfg = ScenarioConfig(homophily=True, homophily_ratio=9.0, clusters=4, cluster_size=100, edge_prob=0.03)
        sc = generate_scenario(cfg)
        x1 = sc.data.X[:, 0]
        net = sc.data.network
        A = net.adjacency.tocoo()
        assert np.mean(x1[A.row] == x1[A.col]) > 0.75


class TestCountRules:
    def test_true_scenario_one_tree(self):
        tree = tree_from_splits({(): (0, 0.5), (0,): (1, 0.5), (1,): (1, 0.5)})
        assert count_correct_rules(tree, scenario_rules(1)["tau"]) == 2

    def test_partial(self):
        tree = tree_from_splits({(): (0, 0.5), (0,): (1, 0.5)})
        assert count_correct_rules(tree, scenario_rules(1)["tau"]) == 1

    def test_refinement(self):
        tree = tree_from_splits({(): (0, 0.5), (0,): (1, 0.5), (0, 0): (2, 0.5)})
        rules = [rule((0, 0), (1, 0))]
        assert count_correct_rules(tree, rules) == 0
        assert count_correct_rules(tree, rules, refinement=True) == 1

    def test_root_only(self):
        assert count_correct_rules(tree_from_splits({}), scenario_rules(2)["delta"]) == 0


class TestMetrics:
    def test_toy(self):
        bias, mse, cov = unit_metrics([1.0, 3.0, 5.0], [2.0, 2.0, 5.0], [1.5, 1.0, 4.0], [2.5, 2.5, 6.0])
        assert bias == pytest.approx(0.0) and mse == pytest.approx(2 / 3) and cov == pytest.approx(1 / 3)

    def test_empty(self):
        assert all(math.isnan(v) for v in unit_metrics([], [], [], []))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=30))
    def test_perfect_estimates(self, truth):
        assert unit_metrics(truth, truth, truth, truth) == (0.0, 0.0, 1.0)


class TestReplications:
    def test_oracle_injection(self):
        rep = run_replications(ScenarioConfig(h=5.1, **SMALL), LOOSE, oracle=True)
        for crit in simlab.CRITERIA:
            for effect in ("tau", "delta"):
                m = rep.estimation[crit][effect]
                assert (m["bias"], m["mse"], m["coverage"]) == (0.0, 0.0, 1.0)

    def test_result_shape(self):
        out = run_replication(ScenarioConfig(h=5.1, **SMALL), LOOSE, 0)
        assert isinstance(out, ReplicationResult)
        assert set(out.discovery) == set(simlab.CRITERIA)
        assert all(0 <= out.discovery[c]["all"] <= 2 for c in simlab.CRITERIA)

    def test_exception_becomes_failure(self, monkeypatch):
        def boom(*a, **k):
            raise RuntimeError("no split")

        monkeypatch.setattr(simlab, "split_clusters", boom)
        out = run_replication(ScenarioConfig(**SMALL), LOOSE, 0)
        assert isinstance(out, ReplicationFailure) and "no split" in out.error

    def test_failures_counted(self):
        def runner(config, params, rep, oracle):
            if rep == 1:
                return ReplicationFailure(rep, "RuntimeError: injected")
            return run_replication(config, params, rep, oracle)

        report = run_replications(ScenarioConfig(h=5.1, **SMALL), LOOSE, runner=runner)
        assert report.n_ok == 2 and report.n_failed == 1
        assert report.failure_rate == pytest.approx(1 / 3) and report.failure_rate > simlab.FAILURE_LIMIT

    def test_jobs_do_not_change_results(self, tmp_path):
        cfg = ScenarioConfig(h=5.1, **SMALL)
        a = run_replications(cfg, LOOSE, jobs=1)
        b = run_replications(cfg, LOOSE, jobs=2)
        for i, rep in enumerate((a, b)):
            write_metrics_csv([rep], tmp_path / f"m{i}.csv")
            write_discovery_csv([rep], tmp_path / f"d{i}.csv")
        for stem in "md":
            assert (tmp_path / f"{stem}0.csv").read_bytes() == (tmp_path / f"{stem}1.csv").read_bytes()


class TestWriters:
    def test_csv_layout(self, tmp_path):
        rep = run_replications(ScenarioConfig(h=5.1, **SMALL), LOOSE)
        write_metrics_csv([rep], tmp_path / "m.csv")
        write_discovery_csv([rep], tmp_path / "d.csv")
        rows = list(csv.DictReader((tmp_path / "m.csv").read_text().splitlines()))
        assert list(rows[0]) == ["effect", "h", "leaf", "mean_est", "mean_se", "mse", "bias", "coverage"]
        assert [r["leaf"] for r in rows] == ["X1<=0.5&X2<=0.5", "X1>0.5&X2>0.5"] * 2
        disc = list(csv.DictReader((tmp_path / "d.csv").read_text().splitlines()))
        assert [r["criterion"] for r in disc][:3] == ["composite", "composite@tau", "composite@delta"]
        assert len(disc) == 9


@pytest.fixture(scope="module")
def reports():
    out = {}
    for scenario in (1, 2):
        for h in (1.1, 5.1):
            cfg = ScenarioConfig(scenario=scenario, h=h, clusters=30, reps=200, seed=99)
            out[scenario, h] = run_replications(cfg)
    return out


@pytest.mark.slow
class TestMonteCarloProperties:
    """Qualitative shapes of the discovery and precision curves at M = 200."""

    @pytest.mark.parametrize("scenario", [1, 2])
    def test_discovery_rises_with_h(self, reports, scenario):
        for crit in simlab.CRITERIA:
            assert reports[scenario, 5.1].discovery[crit]["all"] >= reports[scenario, 1.1].discovery[crit]["all"]

    def test_composite_dominates_in_scenario_two(self, reports):
        d = reports[2, 5.1].discovery
        assert d["composite"]["all"] > max(d["single:1000"]["all"], d["single:0100"]["all"])

    @pytest.mark.parametrize("h", [1.1, 5.1])
    def test_spillover_more_precise(self, reports, h):
        lm = reports[1, h].leaf_means["composite"]
        se_tau = np.nanmean([r["mean_se"] for r in lm["tau"]])
        se_delta = np.nanmean([r["mean_se"] for r in lm["delta"]])
        assert se_delta < se_tau
