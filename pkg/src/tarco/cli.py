"""Command-line interface wiring the pipeline into reproducible runs.

Subcommands: fit, cv, simulate, estimate-cov, project, bench.  Every
command is a pure function of (inputs, config, seed), so rerunning with
the same arguments produces byte-identical output files, including with
--threads > 1.  Exit codes: 0 success, 1 input error, 2 numeric
non-convergence (result files are still written).

A flat key=value config file can supply any of a command's options;
explicit command-line flags override file values, and unknown keys are
rejected.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from tarco.bench import REGIMES, BenchConfig, run_bench
from tarco.compdata import (
    align_columns,
    alr_transform,
    apply_pseudocount,
    close_composition,
    select_reference,
)
from tarco.correction import corrected_quadratic, project_quadratic
from tarco.cv import cv_select, kfold_split
from tarco.io import (
    fmt_float,
    read_counts_csv,
    read_replicates_csv,
    read_response_csv,
    read_sigma_csv,
    write_cv,
    write_fit,
    write_metrics_csv,
    write_projection_report,
    write_sigma_csv,
    write_sim_bundle,
    write_summary_csv,
)
from tarco.mecov import aggregate_sigma, estimate_sigma_u, working_sigma_u
from tarco.simulate import SimConfig, simulate_dataset
from tarco.solver import lambda_max, make_penalty, solve_tarco
from tarco.tree import build_aggregation, parse_newick

__all__ = ["main"]

PENALTY_CHOICES = {
    "l1": ("weighted-alr1", 0.0),
    "wl1": ("weighted-alr1", 0.5),
    "desc": ("descendant", None),
}


class _Parser(argparse.ArgumentParser):
    """argparse reports usage errors with exit code 2; we reserve 2 for
    numeric non-convergence and use 1 for every input problem."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _float_or_max(text: str):
    if text == "max":
        return "max"
    return float(text)


def _grid(text: str) -> np.ndarray:
    values = [float(v) for v in text.split(",") if v.strip()]
    if not values:
        raise argparse.ArgumentTypeError("empty lambda grid")
    return np.array(values)


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def read_config(path: str) -> dict:
    """Flat key=value lines; blank lines and # comments ignored."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(
                    f"{path}: line {lineno}: expected key=value, got {line!r}"
                )
            values[key.strip()] = value.strip()
    return values


# Per-command config keys: config key -> (namespace attribute, converter).
_PROBLEM_KEYS = {
    "counts": ("counts", str),
    "response": ("response", str),
    "tree": ("tree", str),
    "replicates": ("replicates", str),
    "sigma": ("sigma", str),
    "tau": ("tau", float),
    "out": ("out", str),
}
_PENALTY_KEYS = {
    "penalty": ("penalty", str),
    "alpha": ("alpha", float),
}
CONFIG_KEYS = {
    "fit": {**_PROBLEM_KEYS, **_PENALTY_KEYS, "lambda": ("lam", _float_or_max)},
    "cv": {
        **_PROBLEM_KEYS,
        **_PENALTY_KEYS,
        "lambda-grid": ("lambda_grid", _grid),
        "kfolds": ("kfolds", int),
        "seed": ("seed", int),
    },
    "simulate": {
        "regime": ("regime", str),
        "n": ("n", int),
        "p": ("p", int),
        "rho": ("rho", float),
        "tau": ("tau", float),
        "sigma": ("sigma_sd", float),
        "t-replicates": ("t_replicates", int),
        "misspecified": ("misspecified", _bool),
        "newick": ("newick", str),
        "seed": ("seed", int),
        "out": ("out", str),
    },
    "estimate-cov": {
        "replicates": ("replicates", str),
        "out": ("out", str),
    },
    "project": dict(_PROBLEM_KEYS),
    "bench": {
        "regime": ("regime", str),
        "n": ("n", int),
        "p": ("p", int),
        "rho": ("rho", float),
        "tau": ("tau", float),
        "sigma": ("sigma_sd", float),
        "t-replicates": ("t_replicates", int),
        "misspecified": ("misspecified", _bool),
        "newick": ("newick", str),
        "reps": ("reps", int),
        "kfolds": ("kfolds", int),
        "threads": ("threads", int),
        "seed": ("seed", int),
        "out": ("out", str),
    },
}


def _apply_config(ns: argparse.Namespace) -> None:
    """Fill unset options from the config file; flags keep priority."""
    if ns.config is None:
        return
    table = CONFIG_KEYS[ns.command]
    for key, raw in read_config(ns.config).items():
        if key not in table:
            raise ValueError(
                f"{ns.config}: unknown config key {key!r} for "
                f"command {ns.command!r}"
            )
        attr, convert = table[key]
        if getattr(ns, attr, None) is None:
            setattr(ns, attr, convert(raw))


_FLAG_NAMES = {"lam": "lambda", "sigma_sd": "sigma"}


def _require(ns: argparse.Namespace, *attrs: str) -> None:
    missing = [a for a in attrs if getattr(ns, a, None) is None]
    if missing:
        flags = ", ".join(
            "--" + _FLAG_NAMES.get(a, a).replace("_", "-") for a in missing
        )
        raise ValueError(f"missing required option(s): {flags}")


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="tarco",
        description=(
            "Tree-aggregated sparse log-contrast regression with "
            "measurement-error correction."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_common(p):
        p.add_argument("--config", help="key=value config file; flags override")
        p.add_argument("--out", help="output directory")

    def add_problem(p):
        p.add_argument("--counts", help="sample-by-taxon counts or compositions CSV")
        p.add_argument("--response", help="sample_id,y response CSV")
        p.add_argument("--tree", help="Newick tree file over the taxa")
        p.add_argument(
            "--replicates",
            help="replicate log-ratio CSV; pooled covariance is estimated from it",
        )
        p.add_argument(
            "--sigma", help="error covariance CSV (takes priority over --replicates)"
        )
        p.add_argument(
            "--tau", type=float,
            help="working-model error scale (used when no --sigma/--replicates)",
        )

    def add_penalty(p):
        p.add_argument(
            "--penalty", choices=sorted(PENALTY_CHOICES),
            help="l1 (unweighted), wl1 (leaf-count weights), desc (descendant)",
        )
        p.add_argument(
            "--alpha", type=float, help="leaf-count exponent for --penalty wl1"
        )

    p_fit = sub.add_parser("fit", help="solve one penalized fit")
    add_common(p_fit)
    add_problem(p_fit)
    add_penalty(p_fit)
    p_fit.add_argument(
        "--lambda", dest="lam", type=_float_or_max,
        help="penalty level; 'max' for the smallest all-zero level",
    )

    p_cv = sub.add_parser("cv", help="select the penalty level by k-fold CV")
    add_common(p_cv)
    add_problem(p_cv)
    add_penalty(p_cv)
    p_cv.add_argument(
        "--lambda-grid", dest="lambda_grid", type=_grid,
        help="comma-separated descending grid (default: 50-point log grid)",
    )
    p_cv.add_argument("--kfolds", type=int, help="number of folds (default 5)")
    p_cv.add_argument("--seed", type=int, help="fold assignment seed (default 0)")

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset bundle")
    add_common(p_sim)
    p_sim.add_argument(
        "--regime", choices=sorted(REGIMES),
        help="named generation regime (default: the p=100, n=100 layout)",
    )
    p_sim.add_argument("--tau", type=float, help="error scale override")
    p_sim.add_argument("--seed", type=int, help="generation seed (default 0)")

    p_cov = sub.add_parser(
        "estimate-cov", help="pooled error covariance from replicates"
    )
    add_common(p_cov)
    p_cov.add_argument("--replicates", help="replicate log-ratio CSV")

    p_proj = sub.add_parser(
        "project", help="corrected gram and its weighted PSD projection"
    )
    add_common(p_proj)
    add_problem(p_proj)

    p_bench = sub.add_parser("bench", help="Monte Carlo comparison of all methods")
    add_common(p_bench)
    p_bench.add_argument("--regime", choices=sorted(REGIMES), help="benchmark regime")
    p_bench.add_argument("--reps", type=int, help="replicate count (default 30)")
    p_bench.add_argument("--kfolds", type=int, help="folds per replicate (default 5)")
    p_bench.add_argument("--threads", type=int, help="worker processes (default 1)")
    p_bench.add_argument("--seed", type=int, help="base seed (default 0)")
    return parser


def _cli_penalty(tree, ns):
    name = ns.penalty if ns.penalty is not None else "l1"
    variant, default_alpha = PENALTY_CHOICES[name]
    alpha = ns.alpha if ns.alpha is not None else default_alpha
    if name != "wl1" and ns.alpha is not None:
        raise ValueError(f"--alpha only applies to --penalty wl1, not {name!r}")
    return make_penalty(tree, variant, alpha if alpha is not None else 0.0)


def _load_problem(ns):
    """Shared input pipeline: counts, response, tree, error covariance."""
    _require(ns, "counts", "response", "tree", "out")
    with open(ns.tree, encoding="utf-8") as fh:
        tree = parse_newick(fh.read())
    table = read_counts_csv(ns.counts)
    ids, y = read_response_csv(ns.response)
    if list(table.sample_ids) != list(ids):
        raise ValueError(
            f"{ns.counts} and {ns.response} disagree on sample ids"
        )
    table = align_columns(table, tree.leaf_labels)
    comp = close_composition(apply_pseudocount(table))
    p = tree.n_leaves

    sigma = None
    reps = rep_ref = None
    if ns.sigma is not None:
        sigma = read_sigma_csv(ns.sigma)
        if sigma.dim != p - 1:
            raise ValueError(
                f"{ns.sigma}: covariance is {sigma.dim}x{sigma.dim}, "
                f"expected {p - 1}x{p - 1}"
            )
    elif ns.replicates is not None:
        reps, file_ref, rep_taxa = read_replicates_csv(ns.replicates)
        if sorted(rep_taxa) != sorted(tree.leaf_labels):
            raise ValueError(
                f"{ns.replicates}: replicate taxa do not match the tree leaves"
            )
        order = [rep_taxa.index(label) for label in tree.leaf_labels]
        reps = reps[:, :, order]
        rep_ref = tree.leaf_labels.index(rep_taxa[file_ref])

    if sigma is not None and sigma.ref is not None:
        ref = sigma.ref
    elif rep_ref is not None:
        ref = rep_ref
    else:
        ref = select_reference(comp)

    if sigma is None and reps is not None:
        groups = [np.delete(reps[i], ref, axis=1) for i in range(reps.shape[0])]
        sigma = estimate_sigma_u(groups, ref=ref)
    if sigma is None:
        if ns.tau is None:
            raise ValueError("provide --sigma, --replicates, or --tau")
        sigma = working_sigma_u(p, ns.tau)

    z = alr_transform(comp, ref)
    return tree, z, y, sigma


def _projected_problem(ns):
    tree, z, y, sigma = _load_problem(ns)
    agg = build_aggregation(tree)
    z_a = z.values @ agg.a
    sigma_agg = aggregate_sigma(sigma, agg, z.ref)
    corrected = corrected_quadratic(z_a, y, sigma_agg)
    projected, report = project_quadratic(corrected, agg.leaf_counts)
    return tree, z, y, sigma, agg, projected, report


def cmd_fit(ns) -> int:
    _require(ns, "lam")
    tree, _, _, _, agg, projected, report = _projected_problem(ns)
    penalty = _cli_penalty(tree, ns)
    lam = ns.lam
    if lam == "max":
        lam = lambda_max(projected, agg.c, penalty)
    fit = solve_tarco(projected, agg.c, penalty, lam)
    fit = replace(fit, beta=agg.a @ fit.gamma)
    os.makedirs(ns.out, exist_ok=True)
    write_fit(ns.out, fit, tree=tree)
    write_projection_report(ns.out, report)
    return 0 if fit.converged else 2


def cmd_cv(ns) -> int:
    tree, z, y, sigma = _load_problem(ns)
    penalty = _cli_penalty(tree, ns)
    kfolds = ns.kfolds if ns.kfolds is not None else 5
    seed = ns.seed if ns.seed is not None else 0
    plan = kfold_split(len(y), kfolds, seed)
    result = cv_select(z, y, tree, sigma, penalty, plan, lam_grid=ns.lambda_grid)
    os.makedirs(ns.out, exist_ok=True)
    write_cv(ns.out, result, tree=tree)
    return 0 if result.fit.converged else 2


def _sim_config(ns) -> SimConfig:
    base = REGIMES[ns.regime] if ns.regime is not None else SimConfig()
    overrides = {}
    for attr, field in [
        ("n", "n"), ("p", "p"), ("rho", "rho"), ("tau", "tau"),
        ("sigma_sd", "sigma"), ("t_replicates", "t_replicates"),
        ("misspecified", "misspecified"), ("newick", "newick"),
        ("seed", "seed"),
    ]:
        value = getattr(ns, attr, None)
        if value is not None:
            overrides[field] = value
    return replace(base, **overrides)


def cmd_simulate(ns) -> int:
    _require(ns, "out")
    write_sim_bundle(ns.out, simulate_dataset(_sim_config(ns)))
    return 0


def cmd_estimate_cov(ns) -> int:
    _require(ns, "replicates", "out")
    reps, ref, _ = read_replicates_csv(ns.replicates)
    groups = [np.delete(reps[i], ref, axis=1) for i in range(reps.shape[0])]
    sigma = estimate_sigma_u(groups, ref=ref)
    os.makedirs(ns.out, exist_ok=True)
    write_sigma_csv(os.path.join(ns.out, "sigma_u.csv"), sigma)
    return 0


def cmd_project(ns) -> int:
    _, _, _, _, _, projected, report = _projected_problem(ns)
    os.makedirs(ns.out, exist_ok=True)
    write_projection_report(ns.out, report)
    with open(
        os.path.join(ns.out, "gram.csv"), "w", newline="", encoding="utf-8"
    ) as fh:
        writer = csv.writer(fh)
        for row in projected.gram:
            writer.writerow([fmt_float(v) for v in row])
    return 0 if report.converged else 2


def cmd_bench(ns) -> int:
    _require(ns, "out")
    sim = _sim_config(ns)
    cfg = BenchConfig(sim=sim, include_gr=not sim.misspecified)
    cfg = replace(
        cfg,
        reps=ns.reps if ns.reps is not None else cfg.reps,
        kfolds=ns.kfolds if ns.kfolds is not None else cfg.kfolds,
        threads=ns.threads if ns.threads is not None else cfg.threads,
    )
    rows, summary, failures = run_bench(
        cfg, log=lambda message: print(message, file=sys.stderr)
    )
    os.makedirs(ns.out, exist_ok=True)
    write_metrics_csv(
        os.path.join(ns.out, "metrics.csv"), rows, include_gr=cfg.include_gr
    )
    write_summary_csv(
        os.path.join(ns.out, "summary.csv"), summary,
        include_gr=cfg.include_gr, failures=len(failures),
    )
    return 0 if len(failures) < cfg.reps else 2


COMMANDS = {
    "fit": cmd_fit,
    "cv": cmd_cv,
    "simulate": cmd_simulate,
    "estimate-cov": cmd_estimate_cov,
    "project": cmd_project,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    ns = parser.parse_args(argv)
    try:
        _apply_config(ns)
        return COMMANDS[ns.command](ns)
    except (ValueError, OSError) as exc:
        print(f"tarco {ns.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
