"""Monte Carlo benchmark across the six estimators.

Each replicate generates a training dataset and an independent test
set, estimates the error covariance once from the replicate stream,
builds fold quadratics once per worldview (corrected-tree, naive-tree,
corrected-flat), and reuses them across the penalty variants so the
expensive PSD projections are shared.  Per-replicate seeds are the base
seed plus the replicate index; reductions run in fixed replicate order,
so results are identical no matter how many worker processes run.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from tarco.baselines import expand_flat, flat_sigma
from tarco.cv import build_fold_quadratics, kfold_split, select_from_quadratics
from tarco.mecov import aggregate_sigma, estimate_sigma_u
from tarco.simulate import (
    SimConfig,
    gen_design,
    metric_ae,
    metric_gr,
    metric_mspe,
    rng_substream,
    simulate_dataset,
)
from tarco.solver import PenaltySpec, make_penalty
from tarco.tree import build_aggregation

__all__ = [
    "BenchConfig",
    "METHODS",
    "REGIMES",
    "regime_config",
    "run_replicate",
    "run_bench",
]

METHODS = (
    "tarco",
    "tarco-05",
    "tarco-n05",
    "tarco-des",
    "trac-naive",
    "flat-corrected",
)

REGIMES = {
    "p100n100": SimConfig(n=100, p=100),
    "p200n100": SimConfig(n=100, p=200),
    "p100n500": SimConfig(n=500, p=100),
    "misspec": SimConfig(n=100, p=100, misspecified=True),
}


@dataclass(frozen=True)
class BenchConfig:
    """Benchmark run parameters."""

    sim: SimConfig
    reps: int = 30
    kfolds: int = 5
    threads: int = 1
    include_gr: bool = True

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError(f"need at least one replicate, got {self.reps}")
        if self.kfolds < 2:
            raise ValueError(f"need at least 2 folds, got {self.kfolds}")
        if self.threads < 1:
            raise ValueError(f"threads must be positive, got {self.threads}")


def regime_config(name: str, seed: int = 0) -> BenchConfig:
    if name not in REGIMES:
        raise ValueError(
            f"unknown regime {name!r}; choose from {sorted(REGIMES)}"
        )
    sim = replace(REGIMES[name], seed=seed)
    return BenchConfig(sim=sim, include_gr=name != "misspec")


def _derived_seed(seed: int, name: str) -> int:
    return int(rng_substream(seed, name).integers(0, 2**63))


def run_replicate(cfg: BenchConfig, rep: int) -> dict:
    """All six methods on one generated dataset; returns metric rows."""
    sim_cfg = replace(cfg.sim, seed=cfg.sim.seed + rep)
    ds = simulate_dataset(sim_cfg)
    _, z_test = gen_design(
        sim_cfg, rng_substream(sim_cfg.seed, "test-design"),
        taxa=ds.tree.leaf_labels,
    )
    test_noise = sim_cfg.sigma * rng_substream(
        sim_cfg.seed, "test-noise"
    ).standard_normal(sim_cfg.n)
    y_test = z_test.values @ ds.beta_star + test_noise

    ref = ds.ztilde.ref
    groups = [
        np.delete(ds.replicates[i], ref, axis=1)
        for i in range(sim_cfg.n)
    ]
    sigma_hat = estimate_sigma_u(groups, ref=ref)
    agg = build_aggregation(ds.tree)
    sigma_agg = aggregate_sigma(sigma_hat, agg, ref)
    z_a = ds.ztilde.values @ agg.a
    plan = kfold_split(sim_cfg.n, cfg.kfolds, _derived_seed(sim_cfg.seed, "folds"))
    kmeans_seed = _derived_seed(sim_cfg.seed, "kmeans")

    corr_folds, corr_full = build_fold_quadratics(
        z_a, ds.y, sigma_agg, plan, proj_weights=agg.leaf_counts
    )
    naive_folds, naive_full = build_fold_quadratics(
        z_a, ds.y, None, plan, proj_weights=None
    )
    flat_design = ds.ztilde.without_ref()
    d = flat_design.shape[1]
    flat_folds, flat_full = build_fold_quadratics(
        flat_design, ds.y, flat_sigma(sigma_hat, ref), plan,
        proj_weights=np.ones(d),
    )

    betas = {}
    for method in METHODS:
        if method == "trac-naive":
            penalty = make_penalty(ds.tree, "weighted-alr1", 0.0)
            res = select_from_quadratics(
                naive_folds, naive_full, agg.c, penalty
            )
            betas[method] = agg.a @ res.fit.gamma
        elif method == "flat-corrected":
            penalty = PenaltySpec(
                variant="weighted-alr1", alpha=0.0, weights=np.ones(d)
            )
            res = select_from_quadratics(flat_folds, flat_full, None, penalty)
            betas[method] = expand_flat(res.fit.gamma, ref)
        else:
            variant, alpha = {
                "tarco": ("weighted-alr1", 0.0),
                "tarco-05": ("weighted-alr1", 0.5),
                "tarco-n05": ("weighted-alr1", -0.5),
                "tarco-des": ("descendant", 0.0),
            }[method]
            penalty = make_penalty(ds.tree, variant, alpha)
            res = select_from_quadratics(corr_folds, corr_full, agg.c, penalty)
            betas[method] = agg.a @ res.fit.gamma

    rows = []
    for method in METHODS:
        beta = betas[method]
        row = {
            "method": method,
            "replicate": rep,
            "mspe": metric_mspe(beta, z_test, y_test),
            "ae": metric_ae(beta, ds.beta_star),
        }
        if cfg.include_gr:
            row["gr"] = metric_gr(beta, ds.beta_star, seed=kmeans_seed)
        rows.append(row)
    return {"replicate": rep, "rows": rows}


def _replicate_star(args):
    cfg, rep = args
    try:
        return run_replicate(cfg, rep)
    except Exception as exc:  # noqa: BLE001 - excluded and reported
        return {"replicate": rep, "error": f"{type(exc).__name__}: {exc}"}


def run_bench(cfg: BenchConfig, log=None):
    """All replicates; returns (metric rows, summary rows, failures)."""
    tasks = [(cfg, rep) for rep in range(cfg.reps)]
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(_replicate_star, tasks))
    else:
        results = [_replicate_star(t) for t in tasks]

    rows = []
    failures = []
    for result in results:  # fixed replicate order
        if "error" in result:
            failures.append((result["replicate"], result["error"]))
            if log is not None:
                log(
                    f"replicate {result['replicate']} failed and was "
                    f"excluded: {result['error']}"
                )
        else:
            rows.extend(result["rows"])

    metrics = ["mspe", "ae"] + (["gr"] if cfg.include_gr else [])
    summary = []
    for method in METHODS:
        vals = {
            m: np.array([r[m] for r in rows if r["method"] == method])
            for m in metrics
        }
        entry = {"method": method, "replicates": len(vals[metrics[0]])}
        for m in metrics:
            entry[f"{m}_mean"] = (
                float(vals[m].mean()) if vals[m].size else float("nan")
            )
            entry[f"{m}_sd"] = (
                float(vals[m].std(ddof=1)) if vals[m].size > 1 else float("nan")
            )
        summary.append(entry)
    return rows, summary, failures
