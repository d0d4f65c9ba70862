"""Command-line front end: ``nctree simulate | analyze | probs``.

Settings come from a flat ``key = value`` file (``--config``) and are
overridden by flags. Every run writes a ``manifest.txt`` in the same format,
so ``nctree <cmd> --config OUT/manifest.txt`` repeats it.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from nctree import __version__, kernels
from nctree.design import BernoulliDesign, ThresholdExposure, cell_label, marginal_table, pairwise_table
from nctree.estimator import Contrast, Dataset
from nctree.netgraph import NetworkError, build_from_edge_list
from nctree.nct import ALLOWED_CONTRASTS, EstimandSet, estimate_leaves, grow_tree, split_clusters
from nctree.simlab import (
    FAILURE_LIMIT,
    ConfigError,
    ScenarioConfig,
    TreeParams,
    run_replications,
    write_discovery_csv,
    write_metrics_csv,
)

log = logging.getLogger("nctree")

EXIT_OK, EXIT_CONFIG, EXIT_FAILURES = 0, 2, 3


class SchemaError(ValueError):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


# key -> (converter, subcommands using it)
KEYS = {
    "command": (str, "*"),
    "version": (str, "*"),
    "scenario": (int, "simulate"),
    "h": (_floats, "simulate"),
    "clusters": (int, "simulate"),
    "cluster_size": (int, "simulate"),
    "edge_prob": (float, "simulate"),
    "covariates": (int, "simulate"),
    "rho": (float, "simulate"),
    "homophily": (_bool, "simulate"),
    "reps": (int, "simulate"),
    "alpha": (float, "*"),
    "q": (int, "*"),
    "seed": (int, "*"),
    "max_depth": (int, "simulate analyze"),
    "min_size": (int, "simulate analyze"),
    "weights": (str, "simulate analyze"),
    "criterion": (str, "simulate analyze"),
    "honest": (_bool, "simulate analyze"),
    "fraction": (float, "simulate analyze"),
    "level": (float, "simulate analyze"),
    "edges": (str, "analyze probs"),
    "nodes": (str, "analyze probs"),
    "directed": (_bool, "analyze probs"),
    "pairs": (str, "probs"),
    "method": (str, "probs"),
}

DEFAULTS = {
    "simulate": {
        "scenario": 1, "h": [1.1], "clusters": 30, "cluster_size": 100, "edge_prob": 0.01, "alpha": 0.5,
        "q": 1, "covariates": 10, "rho": 0.0, "homophily": False, "reps": 100, "seed": 0,
        "max_depth": 2, "min_size": 20, "weights": "w1000=0.5,w0100=0.5", "criterion": "composite",
        "honest": True, "fraction": 0.5, "level": 0.95,
    },
    "analyze": {
        "q": 1, "seed": 0, "max_depth": 3, "min_size": 20, "weights": "w1000=0.5,w0100=0.5",
        "criterion": "composite", "honest": True, "fraction": 0.5, "level": 0.95, "directed": True,
        "alpha": None, "edges": None, "nodes": None,
    },
    "probs": {"q": 1, "alpha": None, "edges": None, "nodes": None, "directed": True, "pairs": None, "method": "auto", "seed": 0},
}


class ConfigFileError(ValueError):
    pass


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigFileError(f"{path}:{lineno}: unknown key '{key}'")
        out[key] = (value, f"{path}:{lineno}")
    return out


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nctree", description="Network causal trees under clustered interference.")
    p.add_argument("--version", action="version", version=f"nctree {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value settings file; flags override it")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--alpha", help="Bernoulli treatment probability")
        sp.add_argument("--q", help="exposure threshold (treated out-neighbours)")
        sp.add_argument("--seed", help="master seed")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
        sp.add_argument("-v", "--verbose", action="store_true")

    def tree(sp):
        sp.add_argument("--max-depth", dest="max_depth")
        sp.add_argument("--min-size", dest="min_size")
        sp.add_argument("--weights", help="composite weights, e.g. w1000=0.5,w0100=0.5")
        sp.add_argument("--criterion", help="composite or single:<contrast>")
        sp.add_argument("--honest", action=argparse.BooleanOptionalAction, default=None)
        sp.add_argument("--fraction", help="share of clusters used for discovery")
        sp.add_argument("--level", help="confidence level")

    def network(sp):
        sp.add_argument("--edges", help="edge list CSV: cluster,src,dst")
        sp.add_argument("--nodes", help="node CSV: cluster,node,...")
        sp.add_argument("--directed", action=argparse.BooleanOptionalAction, default=None)

    s = sub.add_parser("simulate", help="Monte Carlo study of the synthetic scenarios")
    common(s)
    tree(s)
    s.add_argument("--scenario")
    s.add_argument("--h", help="effect size(s), comma separated")
    s.add_argument("--clusters")
    s.add_argument("--cluster-size", dest="cluster_size")
    s.add_argument("--edge-prob", dest="edge_prob")
    s.add_argument("--covariates")
    s.add_argument("--rho")
    s.add_argument("--homophily", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--reps")

    a = sub.add_parser("analyze", help="grow an honest tree on observed data")
    common(a)
    tree(a)
    network(a)

    r = sub.add_parser("probs", help="dump exposure probabilities")
    common(r)
    network(r)
    r.add_argument("--pairs", help="CSV of cluster_i,node_i,cluster_j,node_j")
    r.add_argument("--method", help="auto, closed, enumerate or monte_carlo")
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then config file, then flags; values converted and checked by type."""
    cmd = args.command
    settings = dict(DEFAULTS[cmd])
    sources = {}
    if args.config:
        for key, (value, where) in read_config(args.config).items():
            scope = KEYS[key][1]
            if scope != "*" and cmd not in scope.split():
                raise ConfigFileError(f"{where}: key '{key}' does not apply to '{cmd}'")
            settings[key], sources[key] = value, where
    for key in DEFAULTS[cmd]:
        v = getattr(args, key, None)
        if v is not None:
            settings[key], sources[key] = v, f"--{key.replace('_', '-')}"
    settings.pop("command", None)
    settings.pop("version", None)
    for key, value in list(settings.items()):
        if value is None:
            continue
        try:
            settings[key] = KEYS[key][0](value)
        except (TypeError, ValueError):
            raise ConfigError(key, f"cannot parse {value!r} ({sources.get(key, 'default')})") from None
    alpha = settings.get("alpha")
    if alpha is not None and not (0.0 < alpha < 1.0):
        raise ConfigError("alpha", f"must lie in (0, 1), got {alpha}")
    if settings.get("q") is not None and settings["q"] < 1:
        raise ConfigError("q", f"must be a positive integer, got {settings['q']}")
    return settings


def parse_estimands(criterion: str, weights: str) -> EstimandSet:
    pairs = {}
    for part in str(weights).split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise ConfigError("weights", f"expected contrast=weight, got {part!r}")
        k, v = part.split("=", 1)
        try:
            c = Contrast.parse(k)
        except ValueError:
            raise ConfigError("weights", f"unknown contrast {k!r}") from None
        if c not in ALLOWED_CONTRASTS:
            raise ConfigError("weights", f"unsupported contrast {k!r}")
        try:
            pairs[c] = float(v)
        except ValueError:
            raise ConfigError("weights", f"weight {v!r} is not a number") from None
    crit = criterion.strip().lower()
    try:
        if crit == "composite":
            return EstimandSet.composite(pairs)
        if crit.startswith("single:"):
            target = Contrast.parse(crit.split(":", 1)[1])
            return EstimandSet.single(target, [c for c in pairs if c != target])
    except ValueError as exc:
        field = "weights" if crit == "composite" else "criterion"
        raise ConfigError(field, str(exc)) from None
    raise ConfigError("criterion", f"expected 'composite' or 'single:<contrast>', got {criterion!r}")


def write_manifest(path: Path, command: str, settings: dict) -> None:
    lines = [f"command = {command}", f"version = nctree {__version__}"]
    for key in sorted(settings):
        v = settings[key]
        if v is None:
            continue
        if isinstance(v, list):
            v = ",".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{key} = {v}")
    path.write_text("\n".join(lines) + "\n")


# -- simulate -------------------------------------------------------------------
def run_simulate(settings: dict, out: Path, jobs: int) -> int:
    if settings["q"] != 1:
        raise ConfigError("q", "the synthetic scenarios use the threshold q = 1")
    if jobs < 1:
        raise ConfigError("jobs", "must be at least 1")
    estimands = parse_estimands(settings["criterion"], settings["weights"])
    by_label = dict(zip((c.label for c in estimands.contrasts), estimands.weights))
    weights = (by_label.get("1000", 0.0), by_label.get("0100", 0.0))
    if estimands.is_composite:
        if set(by_label) - {"1000", "0100"}:
            raise ConfigError("weights", "simulations weight the treatment and spillover contrasts only")
        metrics_tree = "composite"
    else:
        metrics_tree = f"single:{estimands.active[0][0].label}"
        if metrics_tree not in ("single:1000", "single:0100"):
            raise ConfigError("criterion", "simulations support single:1000 or single:0100")
        weights = (0.5, 0.5)
    params = TreeParams(settings["max_depth"], settings["min_size"], settings["honest"], weights,
                        settings["fraction"], settings["level"])
    if not settings["h"]:
        raise ConfigError("h", "at least one effect size is required")
    configs = [
        ScenarioConfig(settings["scenario"], h, settings["clusters"], settings["cluster_size"], settings["edge_prob"],
                       settings["alpha"], settings["covariates"], settings["rho"], settings["homophily"],
                       reps=settings["reps"], seed=settings["seed"])
        for h in settings["h"]
    ]
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.txt", "simulate", settings)
    reports = []
    for cfg in configs:
        log.info("scenario %d, h=%g: %d replications", cfg.scenario, cfg.h, cfg.reps)
        reports.append(run_replications(cfg, params, jobs=jobs))
    write_metrics_csv(reports, out / "metrics.csv", metrics_tree)
    write_discovery_csv(reports, out / "discovery.csv")
    with open(out / "failures.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["h", "rep", "error"])
        for rep in reports:
            for f in rep.failures:
                w.writerow([repr(rep.config.h), f.rep, f.error])
    worst = max(r.failure_rate for r in reports)
    if worst > FAILURE_LIMIT:
        print(f"nctree: {worst:.0%} of replications failed (limit {FAILURE_LIMIT:.0%}); see failures.csv", file=sys.stderr)
        return EXIT_FAILURES
    return EXIT_OK


# -- input files ------------------------------------------------------------------
def _read_csv(path, required: tuple[str, ...]) -> tuple[list[str], list[dict]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = [h.strip() for h in (reader.fieldnames or [])]
            reader.fieldnames = header
            rows = list(reader)
    except FileNotFoundError:
        raise SchemaError(f"{path}: file not found") from None
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
    return header, rows


def load_network(edges_path, nodes_path, directed: bool):
    """Network keyed by ``(cluster, node)`` plus the node table rows in network order."""
    node_rows, header = [], []
    if nodes_path:
        header, node_rows = _read_csv(nodes_path, ("cluster", "node"))
    _, edge_rows = _read_csv(edges_path, ("cluster", "src", "dst"))
    edges = [(r["cluster"], (r["cluster"], r["src"]), (r["cluster"], r["dst"])) for r in edge_rows]
    nodes = [(r["cluster"], (r["cluster"], r["node"])) for r in node_rows] if nodes_path else None
    net = build_from_edge_list(edges, directed=directed, nodes=nodes)
    if nodes_path:
        order = {key: pos for pos, key in enumerate(k for _, k in nodes)}
        rows = [None] * net.n_units
        for i, (cid, key) in enumerate(net.units):
            rows[i] = node_rows[order[key]]
        return net, header, rows
    return net, header, []


def _label(net, i) -> tuple:
    cid, (_, node) = net.units[i]
    return cid, node


def load_dataset(settings: dict) -> Dataset:
    if settings["alpha"] is None:
        raise ConfigError("alpha", "the design probability is required (it cannot be inferred from data)")
    for key in ("edges", "nodes"):
        if not settings[key]:
            raise ConfigError(key, "input file is required")
    design, mapping = BernoulliDesign(settings["alpha"]), ThresholdExposure(settings["q"])
    net, header, rows = load_network(settings["edges"], settings["nodes"], settings["directed"])
    for col in ("w", "y"):
        if col not in header:
            raise SchemaError(f"{settings['nodes']}: missing column {col}")
    covs = [c for c in header if c not in ("cluster", "node", "w", "y")]
    n = net.n_units
    W, Y, X = np.zeros(n, dtype=np.int8), np.zeros(n), np.zeros((n, len(covs)))
    for i, row in enumerate(rows):
        where = f"{settings['nodes']}: node {row['node']!r} in cluster {row['cluster']!r}"
        if row["w"].strip() not in ("0", "1"):
            raise SchemaError(f"{where}: w must be 0 or 1, got {row['w']!r}")
        W[i] = int(row["w"])
        try:
            Y[i] = float(row["y"])
            X[i] = [float(row[c]) for c in covs]
        except (TypeError, ValueError):
            raise SchemaError(f"{where}: non-numeric y or covariate") from None
        if not (np.isfinite(Y[i]) and np.isfinite(X[i]).all()):
            raise SchemaError(f"{where}: missing or infinite value")
    return Dataset.build(net, W, Y, X, design, mapping, covariate_names=covs)


# -- analyze ----------------------------------------------------------------------
def _fmt(x) -> str:
    return "nan" if x is None or not math.isfinite(x) else repr(float(x))


def run_analyze(settings: dict, out: Path) -> int:
    estimands = parse_estimands(settings["criterion"], settings["weights"])
    for key, lo in (("max_depth", 0), ("min_size", 1)):
        if settings[key] < lo:
            raise ConfigError(key, f"must be at least {lo}")
    if not (0 < settings["fraction"] < 1):
        raise ConfigError("fraction", "must lie in (0, 1)")
    data = load_dataset(settings)
    excluded = int((~data.eligible).sum())
    if excluded:
        print(f"nctree: positivity excluded {excluded} of {data.n_units} units", file=sys.stderr)
    split = split_clusters(data, settings["fraction"], settings["seed"])
    tree = grow_tree(data, split, estimands, settings["max_depth"], settings["min_size"], settings["honest"])
    tree = estimate_leaves(tree, data, split, estimands, settings["level"])

    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.txt", "analyze", settings)
    (out / "tree.json").write_text(tree.to_json())
    with open(out / "leaf_estimates.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["leaf_id", "constraints", "contrast", "point", "se", "ci_low", "ci_high",
                    "n_00", "n_10", "n_01", "n_11"])
        for node in tree.leaves():
            for c in estimands.contrasts:
                e = node.estimates.get(c.label)
                vals = [None] * 4 if e is None else [e.point, e.std_error, e.ci_low, e.ci_high]
                w.writerow([node.id, node.leaf.describe(data.covariate_names), c.label,
                            *(_fmt(v) for v in vals), *node.est_cells])
    with open(out / "split.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster", "sample"])
        ids = data.network.cluster_ids
        for k in split.train:
            w.writerow([ids[k], "discovery"])
        for k in split.estimation:
            w.writerow([ids[k], "estimation"])
    return EXIT_OK


# -- probs --------------------------------------------------------------------------
def run_probs(settings: dict, out: Path) -> int:
    if settings["alpha"] is None:
        raise ConfigError("alpha", "the design probability is required")
    if not settings["edges"]:
        raise ConfigError("edges", "input file is required")
    if settings["method"] not in ("auto", "closed", "enumerate", "monte_carlo"):
        raise ConfigError("method", f"unknown method {settings['method']!r}")
    design, mapping = BernoulliDesign(settings["alpha"]), ThresholdExposure(settings["q"])
    net, _, _ = load_network(settings["edges"], settings["nodes"], settings["directed"])
    pi = marginal_table(net.out_degree, design, mapping)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.txt", "probs", settings)
    with open(out / "marginals.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster", "node", "degree", "pi_00", "pi_10", "pi_01", "pi_11"])
        for i in range(net.n_units):
            w.writerow([*_label(net, i), int(net.out_degree[i]), *(f"{p:.12g}" for p in pi[i])])
    if settings["pairs"]:
        _, rows = _read_csv(settings["pairs"], ("cluster_i", "node_i", "cluster_j", "node_j"))
        cols = [f"p_{cell_label(a)}_{cell_label(b)}" for a in range(4) for b in range(4)]
        with open(out / "pairwise.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cluster_i", "node_i", "cluster_j", "node_j", *cols])
            for r in rows:
                try:
                    i = net.index_of(r["cluster_i"], (r["cluster_i"], r["node_i"]))
                    j = net.index_of(r["cluster_j"], (r["cluster_j"], r["node_j"]))
                except (KeyError, NetworkError):
                    raise SchemaError(f"{settings['pairs']}: unknown unit in row {r}") from None
                table = pairwise_table(net, design, mapping, i, j, settings["method"])
                w.writerow([r["cluster_i"], r["node_i"], r["cluster_j"], r["node_j"], *(f"{p:.12g}" for p in table.ravel())])
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    log.debug("kernel backend: %s", kernels.BACKEND)
    out = Path(args.out)
    try:
        settings = resolve(args)
        if args.command == "simulate":
            return run_simulate(settings, out, args.jobs)
        if args.command == "analyze":
            return run_analyze(settings, out)
        return run_probs(settings, out)
    except ConfigFileError as exc:
        print(f"nctree: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"nctree: config error in '{exc.field}': {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, NetworkError) as exc:
        print(f"nctree: input error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:  # design-level precondition (e.g. alpha outside (0, 1))
        print(f"nctree: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
