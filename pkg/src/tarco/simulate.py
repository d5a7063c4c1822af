"""Synthetic data generation and evaluation metrics.

The layered tree puts six internal block nodes under the root with leaf
blocks of sizes (p/5, p/10, p/10, p/5, p/5, p/5); the last block splits
into a zero sub-block (3p/20 leaves) and p/20 individual-signal leaves.
At p=100 the signal has 10 nonzero aggregated coefficients spread over
11 aggregation groups.  All draws flow through named substreams of the
config seed so every artifact is bit-reproducible.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from tarco.compdata import CompositionMatrix, LogRatioMatrix, alr_transform
from tarco.mecov import ErrorCov, working_sigma_u
from tarco.tree import TaxTree, aggregate_coefficients, parse_newick

__all__ = [
    "SimConfig",
    "SimDataset",
    "rng_substream",
    "layered_newick",
    "gen_design",
    "true_beta",
    "inject_error",
    "make_replicates",
    "simulate_dataset",
    "metric_mspe",
    "metric_ae",
    "metric_gr",
    "kmeans_1d",
    "rand_index",
]

BLOCK_SHARES = (4, 2, 2, 4, 4, 4)  # twentieths of p per block
BLOCK_VALUES = (0.5, -0.75, -0.25, 0.1, -0.1)
NU_SD = 0.5  # individual leaf effects ~ N(0, 0.25)


@dataclass(frozen=True)
class SimConfig:
    """Generation parameters; defaults reproduce the desk-scale regime."""

    n: int = 100
    p: int = 100
    rho: float = 0.5
    tau: float = 1.0
    sigma: float = 0.5
    t_replicates: int = 2
    misspecified: bool = False
    seed: int = 0
    newick: str | None = None

    def __post_init__(self):
        if self.n < 1 or self.p < 2:
            raise ValueError(f"invalid dimensions n={self.n}, p={self.p}")
        if not 0 <= self.rho < 1:
            raise ValueError(f"rho must be in [0, 1), got {self.rho}")
        if self.tau < 0 or self.sigma < 0:
            raise ValueError("tau and sigma must be nonnegative")
        if self.t_replicates < 2:
            raise ValueError(
                f"need at least 2 replicates, got {self.t_replicates}"
            )


@dataclass(frozen=True)
class SimDataset:
    """One generated dataset with its ground truth and error draws."""

    config: SimConfig
    tree: TaxTree
    z: LogRatioMatrix
    ztilde: LogRatioMatrix
    replicates: np.ndarray
    y: np.ndarray
    beta_star: np.ndarray
    gamma_star: np.ndarray
    sigma: ErrorCov
    u: np.ndarray
    noise: np.ndarray


def rng_substream(seed: int, name: str) -> np.random.Generator:
    """Independent named stream of a base seed, stable across runs."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(key,))
    )


def _as_rng(rng_or_seed) -> np.random.Generator:
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return np.random.default_rng(np.random.SeedSequence(rng_or_seed))


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root with eigenvalues clipped at zero."""
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def layered_newick(p: int) -> str:
    """Newick text of the layered block tree for ``p`` leaves.

    Requires p divisible by 20 so every block size is integral.  Leaves
    are labeled t1..tp in coefficient order; block nodes b1..b6, with
    the zero sub-block node labeled b6z.
    """
    if p < 20 or p % 20 != 0:
        raise ValueError(f"layered tree needs p divisible by 20, got p={p}")
    unit = p // 20
    sizes = [s * unit for s in BLOCK_SHARES]
    labels = iter(f"t{j}" for j in range(1, p + 1))

    def take(k):
        return ",".join(next(labels) for _ in range(k))

    parts = [f"({take(sizes[b])})b{b + 1}" for b in range(5)]
    zero_leaves = take(3 * unit)
    nu_leaves = take(unit)
    parts.append(f"(({zero_leaves})b6z,{nu_leaves})b6")
    return "(" + ",".join(parts) + ");"


def sim_tree(cfg: SimConfig) -> TaxTree:
    """The tree the config describes (layered layout or explicit Newick)."""
    if cfg.newick is not None:
        tree = parse_newick(cfg.newick)
        if tree.n_leaves != cfg.p:
            raise ValueError(
                f"tree has {tree.n_leaves} leaves, config says p={cfg.p}"
            )
        return tree
    return parse_newick(layered_newick(cfg.p))


def gen_design(cfg: SimConfig, rng=None, taxa=None):
    """Latent logistic-normal design and its log-ratio coordinates.

    W ~ N(mu, S) with S_ij = rho^|i-j| and mu_j = log(p/2) on the first
    five coordinates; X is the rowwise softmax of W and Z its ALR with
    the last part as reference.
    """
    rng = rng if rng is not None else rng_substream(cfg.seed, "design")
    p = cfg.p
    lags = np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
    cov = cfg.rho ** lags if cfg.rho > 0 else np.eye(p)
    root = _sym_sqrt(cov)
    mu = np.zeros(p)
    mu[: min(5, p)] = np.log(p / 2)
    w = mu + rng.standard_normal(size=(cfg.n, p)) @ root
    shifted = np.exp(w - w.max(axis=1, keepdims=True))
    if taxa is None:
        taxa = tuple(f"t{j}" for j in range(1, p + 1))
    x = CompositionMatrix(
        values=shifted / shifted.sum(axis=1, keepdims=True),
        sample_ids=tuple(f"s{i}" for i in range(cfg.n)),
        taxa=tuple(taxa),
    )
    z = alr_transform(x, ref=p - 1)
    return x, z


def true_beta(cfg: SimConfig, tree: TaxTree, rng=None):
    """Ground-truth coefficients (block pattern plus centered leaf effects).

    The individual effects are redrawn for every dataset.  Under the
    misspecified variant every 5th coordinate (1-based) is zeroed and
    the remaining nonzero coordinates are recentered so the zero-sum
    constraint still holds while the zeros stay exact.
    """
    rng = rng if rng is not None else rng_substream(cfg.seed, "beta")
    p = cfg.p
    if p < 20 or p % 20 != 0:
        raise ValueError(f"block coefficients need p divisible by 20, got {p}")
    if tree.n_leaves != p:
        raise ValueError(
            f"tree has {tree.n_leaves} leaves, config says p={p}"
        )
    unit = p // 20
    sizes = [s * unit for s in BLOCK_SHARES]
    beta = np.empty(p)
    start = 0
    for size, value in zip(sizes[:5], BLOCK_VALUES):
        beta[start : start + size] = value
        start += size
    beta[start : start + 3 * unit] = 0.0
    start += 3 * unit
    nu = NU_SD * rng.standard_normal(unit)
    beta[start:] = nu - nu.mean()
    if cfg.misspecified:
        beta[4::5] = 0.0
        alive = beta != 0.0
        beta[alive] -= beta.sum() / alive.sum()
    gamma = aggregate_coefficients(beta, tree)
    return beta, gamma


def _draw_u(
    z: LogRatioMatrix, sigma: ErrorCov, rng: np.random.Generator, rows: int
) -> np.ndarray:
    p = z.values.shape[1]
    if sigma.dim != p - 1:
        raise ValueError(
            f"covariance dimension {sigma.dim} does not match p-1 = {p - 1}"
        )
    if sigma.ref is not None and sigma.ref != z.ref:
        raise ValueError(
            f"covariance excludes coordinate {sigma.ref}, not reference {z.ref}"
        )
    root = _sym_sqrt(sigma.sigma)
    u = np.zeros((rows, p))
    nonref = [j for j in range(p) if j != z.ref]
    u[:, nonref] = rng.standard_normal(size=(rows, p - 1)) @ root
    return u


def inject_error(z: LogRatioMatrix, sigma: ErrorCov, rng_or_seed):
    """Additive contamination, zero on the reference coordinate."""
    rng = _as_rng(rng_or_seed)
    u = _draw_u(z, sigma, rng, z.values.shape[0])
    ztilde = LogRatioMatrix(values=z.values + u, ref=z.ref)
    return ztilde, u


def make_replicates(
    z: LogRatioMatrix, sigma: ErrorCov, t: int, rng_or_seed
) -> np.ndarray:
    """t independent contaminated copies per sample, shape (n, t, p)."""
    if t < 2:
        raise ValueError(f"need at least 2 replicates, got t={t}")
    rng = _as_rng(rng_or_seed)
    n, p = z.values.shape
    reps = np.empty((n, t, p))
    for r in range(t):
        reps[:, r, :] = z.values + _draw_u(z, sigma, rng, n)
    return reps


def simulate_dataset(cfg: SimConfig) -> SimDataset:
    """Full draw: design, truth, response, contamination, replicates."""
    tree = sim_tree(cfg)
    beta_star, gamma_star = true_beta(
        cfg, tree, rng_substream(cfg.seed, "beta")
    )
    _, z = gen_design(
        cfg, rng_substream(cfg.seed, "design"), taxa=tree.leaf_labels
    )
    sigma = working_sigma_u(cfg.p, cfg.tau) if cfg.tau > 0 else ErrorCov(
        sigma=np.zeros((cfg.p - 1, cfg.p - 1)), ref=z.ref, tau=0.0,
        provenance="known",
    )
    ztilde, u = inject_error(z, sigma, rng_substream(cfg.seed, "error"))
    replicates = make_replicates(
        z, sigma, cfg.t_replicates, rng_substream(cfg.seed, "replicates")
    )
    noise = cfg.sigma * rng_substream(cfg.seed, "noise").standard_normal(cfg.n)
    y = z.values @ beta_star + noise
    return SimDataset(
        config=cfg,
        tree=tree,
        z=z,
        ztilde=ztilde,
        replicates=replicates,
        y=y,
        beta_star=beta_star,
        gamma_star=gamma_star,
        sigma=sigma,
        u=u,
        noise=noise,
    )


def metric_mspe(beta_hat: np.ndarray, z_test, y_test: np.ndarray) -> float:
    """Mean squared prediction error on held-out rows."""
    zv = z_test.values if isinstance(z_test, LogRatioMatrix) else np.asarray(z_test)
    beta_hat = np.asarray(beta_hat, dtype=float)
    if zv.shape[1] != beta_hat.shape[0]:
        raise ValueError(
            f"design has {zv.shape[1]} columns, coefficients {beta_hat.shape[0]}"
        )
    resid = np.asarray(y_test, dtype=float) - zv @ beta_hat
    return float(resid @ resid / resid.shape[0])


def metric_ae(beta_hat: np.ndarray, beta_star: np.ndarray) -> float:
    """L1 estimation error."""
    beta_hat = np.asarray(beta_hat, dtype=float)
    beta_star = np.asarray(beta_star, dtype=float)
    if beta_hat.shape != beta_star.shape:
        raise ValueError(
            f"shape mismatch {beta_hat.shape} vs {beta_star.shape}"
        )
    return float(np.abs(beta_hat - beta_star).sum())


def kmeans_1d(
    values: np.ndarray, k: int, seed: int = 0, restarts: int = 50
) -> np.ndarray:
    """Deterministic one-dimensional k-means labels.

    Greedy k-means++ seeding per restart, Lloyd iteration to a fixed
    point, best within-cluster sum of squares wins with ties going to
    the earliest restart.  k is reduced to the number of distinct
    values when they are fewer.
    """
    values = np.asarray(values, dtype=float)
    k = min(k, np.unique(values).size)
    if k < 1:
        raise ValueError("need at least one value")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    best_labels = None
    best_wcss = np.inf
    for _ in range(restarts):
        centers = np.empty(k)
        centers[0] = values[rng.integers(values.size)]
        for c in range(1, k):
            d2 = np.min(
                (values[:, None] - centers[None, :c]) ** 2, axis=1
            )
            total = d2.sum()
            if total == 0.0:
                centers[c:] = centers[0]
                break
            centers[c] = values[rng.choice(values.size, p=d2 / total)]
        labels = np.zeros(values.size, dtype=np.int64)
        for _ in range(200):
            dist = (values[:, None] - centers[None, :]) ** 2
            new_labels = np.argmin(dist, axis=1)
            for c in range(k):
                members = new_labels == c
                if members.any():
                    centers[c] = values[members].mean()
                else:
                    # revive an empty cluster at the worst-fit point
                    far = int(np.argmax(dist[np.arange(values.size), new_labels]))
                    centers[c] = values[far]
                    new_labels[far] = c
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
        wcss = float(((values - centers[labels]) ** 2).sum())
        if wcss < best_wcss:
            best_wcss = wcss
            best_labels = labels
    return best_labels


def rand_index(labels_a: np.ndarray, labels_b: np.ndarray) -> float:
    """Fraction of unordered pairs on which two partitions agree."""
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    if labels_a.shape != labels_b.shape or labels_a.ndim != 1:
        raise ValueError("partitions must be equal-length label vectors")
    n = labels_a.size
    if n < 2:
        raise ValueError("need at least two items")
    _, ia = np.unique(labels_a, return_inverse=True)
    _, ib = np.unique(labels_b, return_inverse=True)
    contingency = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(contingency, (ia, ib), 1.0)

    def pairs(counts):
        return float((counts * (counts - 1) / 2).sum())

    total = n * (n - 1) / 2
    same_both = pairs(contingency)
    same_a = pairs(contingency.sum(axis=1))
    same_b = pairs(contingency.sum(axis=0))
    return (total + 2 * same_both - same_a - same_b) / total


def metric_gr(
    beta_hat: np.ndarray, beta_star: np.ndarray, k: int = 5, seed: int = 0
) -> float:
    """Rand agreement between k-means partitions of the coefficients."""
    beta_hat = np.asarray(beta_hat, dtype=float)
    beta_star = np.asarray(beta_star, dtype=float)
    if beta_hat.shape != beta_star.shape:
        raise ValueError(
            f"shape mismatch {beta_hat.shape} vs {beta_star.shape}"
        )
    if beta_hat.size < 2:
        raise ValueError("need at least two coefficients")
    labels_hat = kmeans_1d(beta_hat, k, seed=seed)
    labels_star = kmeans_1d(beta_star, k, seed=seed)
    return rand_index(labels_hat, labels_star)
