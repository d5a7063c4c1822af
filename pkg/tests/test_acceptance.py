"""Acceptance suite: one test per release criterion, tolerances pinned.

Each test asserts every sub-check of one criterion, so the verbose run
reads as a pass/fail line per criterion.  The three benchmark-backed
tests re-run the full harness at the pinned seeds and dominate the
suite's runtime (about an hour altogether on one core); everything else
is oracle-backed and fast.  Two sub-checks are known to fail with the
exchangeable stand-in error covariance the generator uses (see the
comments on tests 01 and 03); they are asserted as stated rather than
widened.
"""

import itertools
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import FIG_TREE, rng_for_test
from oracles import (
    enumerate_lasso_minimizer,
    psd_maxnorm_optimum_bisect,
    rand_index_pairs,
)
from tarco.bench import regime_config, run_bench
from tarco.cli import main as cli_main
from tarco.correction import (
    QuadraticPieces,
    corrected_quadratic,
    naive_quadratic,
    project_quadratic,
    psd_project,
)
from tarco.cv import build_fold_quadratics, kfold_split, select_from_quadratics
from tarco.mecov import (
    AggregatedErrorCov,
    aggregate_sigma,
    estimate_sigma_u,
    working_sigma_u,
)
from tarco.simulate import (
    SimConfig,
    gen_design,
    inject_error,
    layered_newick,
    metric_ae,
    metric_mspe,
    rand_index,
)
from tarco.solver import PenaltySpec, lambda_max, solve_tarco
from tarco.tree import aggregate_coefficients, build_aggregation, parse_newick


def check_all(label: str, checks: dict, detail: str = "") -> None:
    """Assert every named sub-check; print one summary line."""
    failed = [name for name, ok in checks.items() if not ok]
    verdict = "PASS" if not failed else "FAIL -> " + "; ".join(failed)
    print(f"{label}: {verdict}" + (f"  [{detail}]" if detail else ""))
    assert not failed, f"{label}: {failed} ({detail})"


# ---------------------------------------------------------------------------
# benchmark-backed criteria


@pytest.fixture(scope="module")
def desk_bench():
    """p=100, n=100, 30 replicates, seed 0; also times the run."""
    cfg = regime_config("p100n100", seed=0)
    start = time.monotonic()
    rows, summary, failures = run_bench(cfg)
    elapsed = time.monotonic() - start
    assert failures == []
    return {s["method"]: s for s in summary}, elapsed


@pytest.fixture(scope="module")
def large_bench():
    cfg = replace(regime_config("p100n500", seed=0), reps=20)
    rows, summary, failures = run_bench(cfg)
    assert failures == []
    return {s["method"]: s for s in summary}


@pytest.fixture(scope="module")
def misspec_bench():
    cfg = replace(regime_config("misspec", seed=0), reps=20)
    rows, summary, failures = run_bench(cfg)
    assert failures == []
    return {s["method"]: s for s in summary}


def test_01_desk_scale_benchmark(desk_bench):
    """Prediction orderings, error band, grouping recovery, and runtime.

    Known shortfall: with the exchangeable stand-in covariance driving
    the generator, node-level correction is strongest at the largest
    clades, the weak +-0.1 leaf blocks shrink toward zero, and the
    five-cluster partitions of fitted and true coefficients disagree on
    one near-tie merge in roughly a quarter of replicates.  Mean
    grouping recovery lands near 0.87 (se ~0.012), short of the 0.90
    floor; the sub-check is asserted as stated, not widened.
    """
    means, elapsed = desk_bench
    mspe = {m: s["mspe_mean"] for m, s in means.items()}
    detail = (
        f"mspe tarco={mspe['tarco']:.3f} n05={mspe['tarco-n05']:.3f} "
        f"naive={mspe['trac-naive']:.3f} flat={mspe['flat-corrected']:.3f}; "
        f"gr tarco={means['tarco']['gr_mean']:.3f} "
        f"flat={means['flat-corrected']['gr_mean']:.3f}; {elapsed:.0f}s"
    )
    check_all(
        "01 desk-scale benchmark",
        {
            "n05 <= tarco mspe": mspe["tarco-n05"] <= mspe["tarco"],
            "tarco < naive mspe": mspe["tarco"] < mspe["trac-naive"],
            "naive < flat mspe": mspe["trac-naive"] < mspe["flat-corrected"],
            "tarco mspe in [1.6, 3.4]": 1.6 <= mspe["tarco"] <= 3.4,
            "tarco gr >= 0.90": means["tarco"]["gr_mean"] >= 0.90,
            "flat gr <= 0.55": means["flat-corrected"]["gr_mean"] <= 0.55,
            "runtime <= 30 min": elapsed <= 1800.0,
        },
        detail,
    )


def test_02_large_sample_benchmark(large_bench, desk_bench):
    """n=500 halves the error and widens the corrected-vs-naive gap."""
    means = large_bench
    desk, _ = desk_bench
    gap_large = means["trac-naive"]["mspe_mean"] - means["tarco"]["mspe_mean"]
    gap_desk = desk["trac-naive"]["mspe_mean"] - desk["tarco"]["mspe_mean"]
    check_all(
        "02 large-sample benchmark",
        {
            "tarco mspe <= 1.6": means["tarco"]["mspe_mean"] <= 1.6,
            "corrected-vs-naive gap widens": gap_large > gap_desk,
        },
        f"mspe tarco={means['tarco']['mspe_mean']:.3f}, "
        f"gap {gap_desk:.3f} -> {gap_large:.3f}",
    )


def test_03_misspecified_benchmark(misspec_bench):
    """Off-tree effects: all tree variants at or below the naive L1 error.

    Known shortfall: the +0.5 leaf-count power variant up-weights
    penalties exactly where the stand-in covariance makes the
    correction harshest, and its mean L1 error lands about 0.8 above
    the uncorrected baseline (paired excess ~2.7 se, 4/20 wins).  The
    other three variants beat the baseline in 19-20 of 20 replicates.
    """
    means = misspec_bench
    naive_ae = means["trac-naive"]["ae_mean"]
    detail = "ae " + " ".join(
        f"{m}={means[m]['ae_mean']:.3f}"
        for m in ("tarco", "tarco-05", "tarco-n05", "tarco-des", "trac-naive")
    )
    checks = {
        f"{m} ae <= naive": means[m]["ae_mean"] <= naive_ae
        for m in ("tarco", "tarco-05", "tarco-n05", "tarco-des")
    }
    checks["grouping column omitted"] = all(
        "gr_mean" not in s for s in means.values()
    )
    check_all("03 misspecified benchmark", checks, detail)


# ---------------------------------------------------------------------------
# solver oracles


def test_04_constrained_least_squares_oracle():
    """lam=0 equals the closed-form saddle-point solution."""
    rng = rng_for_test("acceptance-constrained-ls")
    worst = 0.0
    for _ in range(20):
        t_nodes = int(rng.integers(4, 11))
        design = rng.standard_normal((200, t_nodes))
        y = design @ rng.standard_normal(t_nodes) + rng.standard_normal(200)
        q = QuadraticPieces(
            gram=design.T @ design / 200,
            cross=design.T @ y / 200,
            n=200,
            flag="oracle",
        )
        c = rng.integers(1, 5, size=t_nodes).astype(float)
        pen = PenaltySpec(
            variant="weighted-alr1", alpha=0.0, weights=np.ones(t_nodes)
        )
        fit = solve_tarco(q, c, pen, lam=0.0)
        kkt = np.zeros((t_nodes + 1, t_nodes + 1))
        kkt[:t_nodes, :t_nodes] = q.gram
        kkt[:t_nodes, t_nodes] = c
        kkt[t_nodes, :t_nodes] = c
        sol = np.linalg.solve(kkt, np.concatenate([q.cross, [0.0]]))
        worst = max(worst, float(np.abs(fit.gamma - sol[:t_nodes]).max()))
    check_all(
        "04 constrained least-squares oracle",
        {"linf <= 1e-6 on 20 instances": worst <= 1e-6},
        f"worst linf {worst:.2e}",
    )


def test_05_star_tree_reduction_oracle():
    """A star tree reduces the fit to corrected sparse regression."""
    tree = parse_newick("(t1,t2,t3,t4,t5);")
    agg = build_aggregation(tree)
    beta = np.array([1.5, 1.5, -1.0, -1.0, -1.0])
    sig = working_sigma_u(5, 0.5)
    pen = PenaltySpec(
        variant="weighted-alr1", alpha=0.0, weights=np.ones(tree.n_nodes)
    )
    worst = 0.0
    fractions = (0.2, 0.35, 0.5)
    for i in range(20):
        cfg = SimConfig(n=200, p=5, seed=0, tau=0.5)
        rng = rng_for_test(f"acceptance-star-{i}")
        _, z = gen_design(cfg, rng, taxa=tree.leaf_labels)
        ztilde, _ = inject_error(z, sig, rng)
        y = z.values @ beta + 0.5 * rng.standard_normal(200)
        sig_agg = aggregate_sigma(sig, agg, z.ref)
        corr = corrected_quadratic(ztilde.values @ agg.a, y, sig_agg)
        proj, _ = project_quadratic(corr, agg.leaf_counts)
        lam = fractions[i % 3] * lambda_max(proj, agg.c, pen)
        fit = solve_tarco(proj, agg.c, pen, lam=lam)
        truth = enumerate_lasso_minimizer(
            proj.gram, proj.cross, agg.c, pen.weights, lam
        )
        worst = max(worst, float(np.abs(fit.gamma - truth).max()))
    check_all(
        "05 star-tree reduction oracle",
        {"linf <= 1e-6 on 20 instances": worst <= 1e-6},
        f"worst linf {worst:.2e}",
    )


# ---------------------------------------------------------------------------
# projection optimality


def test_06_psd_projection_optimality():
    """ADMM projection matches bisection-with-feasibility optima."""
    rng = rng_for_test("acceptance-projection")
    worst_gap = 0.0
    worst_eig = 0.0
    done = 0
    while done < 50:
        m = rng.standard_normal((4, 4))
        sym = 0.5 * (m + m.T)
        eigs = np.linalg.eigvalsh(sym)
        if eigs.min() >= -1e-3 or eigs.max() <= 1e-3:
            continue
        w = rng.uniform(0.5, 3.0, size=4)
        psi, report = psd_project(sym, w)
        opt = psd_maxnorm_optimum_bisect(sym, w, tol=1e-4)
        worst_gap = max(worst_gap, abs(report.max_weighted_deviation - opt))
        worst_eig = min(worst_eig, float(np.linalg.eigvalsh(psi).min()))
        done += 1
    psi_d, report_d = psd_project(np.diag([1.0, -1.0]), np.ones(2))
    check_all(
        "06 psd projection optimality",
        {
            "deviation within 1e-3 of optimum": worst_gap <= 1e-3,
            "outputs psd within -1e-8": worst_eig >= -1e-8,
            "diag(1,-1) deviation 1 within 1e-6": abs(
                report_d.max_weighted_deviation - 1.0
            )
            <= 1e-6,
            "diag(1,-1) output psd": float(np.linalg.eigvalsh(psi_d).min())
            >= -1e-8,
        },
        f"worst gap {worst_gap:.2e}, worst min-eig {worst_eig:.2e}",
    )


# ---------------------------------------------------------------------------
# bias identities


def test_07_bias_identities():
    """Correction subtracts exactly the node-level error covariance."""
    rng = rng_for_test("acceptance-bias")
    worst_exact = 0.0
    for _ in range(10):
        t_nodes = int(rng.integers(3, 8))
        z = rng.standard_normal((50, t_nodes))
        y = rng.standard_normal(50)
        root = rng.standard_normal((t_nodes, t_nodes))
        sig_agg = AggregatedErrorCov(sigma_agg=root @ root.T, ref=0)
        naive = naive_quadratic(z, y)
        corr = corrected_quadratic(z, y, sig_agg)
        worst_exact = max(
            worst_exact,
            float(np.abs(naive.gram - corr.gram - sig_agg.sigma_agg).max()),
        )

    # Monte Carlo: mean contamination excess equals the aggregated
    # covariance entrywise, within 3 standard errors.
    tree = parse_newick(FIG_TREE)
    agg = build_aggregation(tree)
    sig = working_sigma_u(3, 1.0)
    target = aggregate_sigma(sig, agg, 2).sigma_agg
    cfg = SimConfig(n=200, p=3, seed=0, tau=1.0)
    diffs = []
    for r in range(400):
        rng_r = rng_for_test(f"acceptance-bias-mc-{r}")
        _, z = gen_design(cfg, rng_r, taxa=tree.leaf_labels)
        ztilde, _ = inject_error(z, sig, rng_r)
        y = np.zeros(cfg.n)
        diffs.append(
            naive_quadratic(ztilde.values @ agg.a, y).gram
            - naive_quadratic(z.values @ agg.a, y).gram
        )
    diffs = np.asarray(diffs)
    se = diffs.std(axis=0, ddof=1) / np.sqrt(len(diffs))
    max_z = float(
        (np.abs(diffs.mean(axis=0) - target) / np.maximum(se, 1e-12)).max()
    )

    # exchangeable model: amplification ratio is exactly tau^2 for
    # disjoint node pairs that avoid the reference.
    tree20 = parse_newick(layered_newick(20))
    agg20 = build_aggregation(tree20)
    sig20 = aggregate_sigma(working_sigma_u(20, 0.5), agg20, ref=19).sigma_agg
    ratios = []
    for k in range(agg20.n_nodes):
        for l in range(k + 1, agg20.n_nodes):
            lk = set(np.flatnonzero(agg20.a[:, k]))
            ll = set(np.flatnonzero(agg20.a[:, l]))
            if lk & ll or 19 in lk or 19 in ll:
                continue
            ratios.append(sig20[k, l] / (len(lk) * len(ll)))
    ratio_err = float(np.abs(np.asarray(ratios) - 0.25).max())

    check_all(
        "07 bias identities",
        {
            "gram difference exact": worst_exact <= 1e-12,
            "monte carlo within 3 se": max_z <= 3.0,
            "amplification ratio constant": ratio_err <= 1e-13,
        },
        f"exact {worst_exact:.1e}, max |z| {max_z:.2f}, "
        f"ratio err {ratio_err:.1e} over {len(ratios)} pairs",
    )


# ---------------------------------------------------------------------------
# aggregation minimality


def _tree_shapes(max_nodes: int):
    """All rooted tree shapes with at most max_nodes non-root nodes.

    Shapes are canonical nested tuples; internal nodes have at least
    two children and the root is not counted (matching node indexing).
    """
    pool = {1: [("L",)]}

    def with_nodes(n):
        if n in pool:
            return pool[n]
        out = []

        def rec(remaining, min_key, children):
            if remaining == 0:
                if len(children) >= 2:
                    out.append(tuple(children))
                return
            for k in range(1, remaining + 1):
                for shape in with_nodes(k):
                    key = (k, repr(shape))
                    if key < min_key:
                        continue
                    rec(remaining - k, key, children + [shape])

        rec(n - 1, (0, ""), [])
        pool[n] = out
        return out

    shapes = []
    for n in range(3, max_nodes + 2):
        shapes.extend(with_nodes(n))
    return shapes


def _shape_newick(shape) -> str:
    count = [0]

    def walk(s):
        if s == ("L",):
            count[0] += 1
            return f"t{count[0]}"
        return "(" + ",".join(walk(child) for child in s) + ")"

    return walk(shape) + ";"


def _antichains(tree):
    """Every node set with no ancestor-descendant pair, smallest first."""

    def rec(v):
        combos = [[]]
        for child in tree.children[v]:
            sub = rec(child)
            combos = [a + b for a in combos for b in sub]
        return combos + [[v]]

    combos = [[]]
    for top in [k for k in range(tree.n_nodes) if tree.parent[k] == -1]:
        combos = [a + b for a in combos for b in rec(top)]
    return sorted((tuple(s) for s in combos), key=len)


def test_08_aggregation_minimality():
    """Merged coefficients reproduce the input and are support-minimal.

    Any representation with at most one nonzero per root-to-leaf path is
    supported on an antichain, and on an antichain feasibility means the
    leaf vector is constant and nonzero on each covered block and zero
    elsewhere; scanning all antichains is therefore exhaustive.
    """
    shapes = _tree_shapes(12)
    rng = rng_for_test("acceptance-minimality")
    trees_checked = 0
    betas_checked = 0
    for shape in shapes:
        tree = parse_newick(_shape_newick(shape))
        agg = build_aggregation(tree)
        p = tree.n_leaves
        chains = _antichains(tree)
        leaf_sets = [
            [np.flatnonzero(agg.a[:, k]) for k in chain] for chain in chains
        ]
        covered = [
            np.asarray(agg.a[:, list(chain)].sum(axis=1), dtype=bool)
            if chain
            else np.zeros(p, dtype=bool)
            for chain in chains
        ]
        for _ in range(100):
            beta = rng.choice([0.0, 1.0, -1.0, 0.5], size=p)
            gamma = aggregate_coefficients(beta, tree)
            assert np.array_equal(agg.a @ gamma, beta)
            nnz = int(np.count_nonzero(gamma))
            for chain, sets, cov in zip(chains, leaf_sets, covered):
                if len(chain) >= nnz:
                    break  # chains are sorted by size; none smaller left
                if beta[~cov].any():
                    continue
                if all(
                    beta[g[0]] != 0.0 and (beta[g] == beta[g[0]]).all()
                    for g in sets
                ):
                    raise AssertionError(
                        f"{_shape_newick(shape)}: antichain {chain} uses "
                        f"{len(chain)} < {nnz} nonzeros for {beta}"
                    )
            betas_checked += 1
        trees_checked += 1

    fig_gamma = aggregate_coefficients(
        np.array([0.5, 0.5, -1.0]), parse_newick(FIG_TREE)
    )
    check_all(
        "08 aggregation minimality",
        {
            "exhaustive over all shapes": trees_checked == len(shapes),
            "worked example exact": np.array_equal(
                fig_gamma, [0.0, 0.0, -1.0, 0.5]
            ),
        },
        f"{trees_checked} shapes, {betas_checked} coefficient vectors",
    )


# ---------------------------------------------------------------------------
# covariance estimator


def test_09_covariance_estimator_consistency():
    """Replicate-pooled covariance is unbiased at the simulation scale."""
    rng = rng_for_test("acceptance-covariance")
    true = working_sigma_u(10, 1.0).sigma
    root = np.linalg.cholesky(true)
    acc = np.zeros_like(true)
    sets = 500
    for _ in range(sets):
        draws = rng.standard_normal((100, 2, 9)) @ root.T
        est = estimate_sigma_u(list(draws), ref=9)
        acc += est.sigma
    rel = float(
        np.linalg.norm(acc / sets - true) / np.linalg.norm(true)
    )
    check_all(
        "09 covariance estimator consistency",
        {"mean within 5% relative frobenius": rel <= 0.05},
        f"relative error {rel:.4f} over {sets} sets",
    )


# ---------------------------------------------------------------------------
# sign recovery


def test_10_sign_recovery():
    """Well-separated node effects are recovered with their signs."""
    tree = parse_newick(
        "((t1,t2,t3,t4)b1,(t5,t6,t7,t8)b2,"
        "(t9,t10,t11,t12)b3,(t13,t14,t15,t16)b4);"
    )
    agg = build_aggregation(tree)
    beta_star = np.array([2.0] * 4 + [-2.0] * 4 + [0.0] * 8)
    gamma_star = aggregate_coefficients(beta_star, tree)
    sig = working_sigma_u(16, 0.3)
    sig_agg = aggregate_sigma(sig, agg, 15)
    pen = PenaltySpec(
        variant="weighted-alr1", alpha=0.0, weights=np.ones(tree.n_nodes)
    )
    cfg = SimConfig(n=1000, p=16, seed=0, tau=0.3)
    hits = 0
    reps = 50
    for r in range(reps):
        rng = rng_for_test(f"acceptance-signs-{r}")
        _, z = gen_design(cfg, rng, taxa=tree.leaf_labels)
        ztilde = inject_error(z, sig, rng)
        y = z.values @ beta_star + 0.5 * rng.standard_normal(cfg.n)
        corr = corrected_quadratic(ztilde.values @ agg.a, y, sig_agg)
        proj, _ = project_quadratic(corr, agg.leaf_counts)
        lam = 0.2 * lambda_max(proj, agg.c, pen)
        fit = solve_tarco(proj, agg.c, pen, lam=lam)
        hits += np.array_equal(np.sign(fit.gamma), np.sign(gamma_star))
    check_all(
        "10 sign recovery",
        {"signs exact in >= 90% of 50": hits >= 45},
        f"{hits}/{reps} exact sign matches",
    )


# ---------------------------------------------------------------------------
# metric oracles


def test_11_metric_oracles():
    """Metrics agree with brute-force pair counting and hand values."""
    rng = rng_for_test("acceptance-metrics")
    exact = True
    for _ in range(200):
        n = int(rng.integers(2, 31))
        a = rng.integers(0, rng.integers(1, 6), size=n)
        b = rng.integers(0, rng.integers(1, 6), size=n)
        exact = exact and rand_index(a, b) == rand_index_pairs(a, b)
    mspe = metric_mspe(
        np.array([1.0, -1.0]),
        np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
        np.array([2.0, 0.0, 1.0]),
    )
    ae = metric_ae(np.array([1.0, -1.0, 0.5]), np.array([0.0, -1.0, 2.0]))
    check_all(
        "11 metric oracles",
        {
            "rand index exact on 200 pairs": exact,
            "mspe hand case": mspe == 1.0,
            "ae hand case": ae == 2.5,
        },
    )


# ---------------------------------------------------------------------------
# determinism


def _run_cli(args) -> int:
    try:
        code = cli_main(args)
    except SystemExit as exc:  # argparse paths
        code = exc.code
    return 0 if code is None else int(code)


def _dir_bytes(path: Path) -> dict:
    return {f.name: f.read_bytes() for f in sorted(path.iterdir())}


def test_12_cli_determinism(tmp_path):
    """Reruns are byte-identical, including multi-threaded benchmarks."""
    sim = ["simulate", "--n", "40", "--p", "20", "--seed", "3"]
    a, b = tmp_path / "sim-a", tmp_path / "sim-b"
    assert _run_cli(sim + ["--out", str(a)]) == 0
    assert _run_cli(sim + ["--out", str(b)]) == 0
    checks = {"simulate reruns identical": _dir_bytes(a) == _dir_bytes(b)}

    common = [
        "--counts", str(a / "composition.csv"),
        "--response", str(a / "y.csv"),
        "--tree", str(a / "tree.nwk"),
        "--sigma", str(a / "sigma_u.csv"),
    ]
    for name, cmd in [
        ("fit", ["fit", *common, "--penalty", "l1", "--lambda", "0.5"]),
        (
            "cv",
            [
                "cv", *common,
                "--lambda-grid", "1.0,0.5,0.25",
                "--kfolds", "3",
                "--seed", "1",
            ],
        ),
        (
            "estimate-cov",
            ["estimate-cov", "--replicates", str(a / "replicates.csv")],
        ),
    ]:
        out1, out2 = tmp_path / f"{name}-1", tmp_path / f"{name}-2"
        assert _run_cli(cmd + ["--out", str(out1)]) == 0
        assert _run_cli(cmd + ["--out", str(out2)]) == 0
        checks[f"{name} reruns identical"] = _dir_bytes(out1) == _dir_bytes(out2)

    bench = [
        "bench", "--regime", "p100n100",
        "--n", "40", "--p", "20",
        "--reps", "2", "--kfolds", "4", "--seed", "3",
    ]
    outs = {}
    for tag, threads in [("t1a", "1"), ("t1b", "1"), ("t2a", "2"), ("t2b", "2")]:
        out = tmp_path / f"bench-{tag}"
        assert _run_cli(bench + ["--threads", threads, "--out", str(out)]) == 0
        outs[tag] = _dir_bytes(out)
    checks["bench reruns identical"] = outs["t1a"] == outs["t1b"]
    checks["bench threaded reruns identical"] = outs["t2a"] == outs["t2b"]
    checks["bench thread count irrelevant"] = outs["t1a"] == outs["t2a"]

    check_all("12 cli determinism", checks)
