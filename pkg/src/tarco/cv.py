"""K-fold selection of the penalty level under the corrected loss.

Training folds go through the full pipeline (corrected quantities, PSD
projection, penalized solve along the grid with warm starts); held-out
folds are scored with the corrected quadratic loss

    L_f(gamma) = 1/2 gamma^T Ghat_f gamma - bhat_f^T gamma.

The held-out gram gets a cheap PSD repair (eigenvalue clipping) before
scoring: the raw corrected gram on a small fold is indefinite, and a
large-norm fit can then score arbitrarily negative along a negative
eigendirection, hijacking the selection.  Clipping keeps the loss a
convex quadratic so overgrown fits score large and positive instead.
The zero vector scores exactly 0, anchoring the scale.  Ties in the
mean loss go to the larger penalty (the grid is descending, so the
first minimizer wins).

The fold quadratics are built once and reused across penalty variants;
``build_fold_quadratics`` + ``select_from_quadratics`` expose that split
to callers fitting several methods on one dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from tarco.correction import (
    QuadraticPieces,
    clip_quadratic,
    corrected_quadratic,
    naive_quadratic,
    project_quadratic,
)
from tarco.mecov import AggregatedErrorCov, ErrorCov, aggregate_sigma
from tarco.solver import (
    FitResult,
    PenaltySpec,
    default_lambda_grid,
    lambda_max,
    solve_path,
    solve_tarco,
)
from tarco.tree import TaxTree, build_aggregation

__all__ = [
    "FoldPlan",
    "CvResult",
    "FoldQuadratics",
    "kfold_split",
    "build_fold_quadratics",
    "held_out_loss",
    "select_from_quadratics",
    "cv_select",
]


@dataclass(frozen=True)
class FoldPlan:
    """Balanced assignment of samples to folds, reproducible from seed."""

    k: int
    assignment: np.ndarray
    seed: int

    def __post_init__(self):
        sizes = np.bincount(self.assignment, minlength=self.k)
        if sizes.max() - sizes.min() > 1:
            raise ValueError("fold sizes must differ by at most 1")
        self.assignment.setflags(write=False)

    @property
    def n(self) -> int:
        return int(self.assignment.shape[0])


@dataclass(frozen=True)
class FoldQuadratics:
    """Training-side (solve-ready) and held-out (scoring) quantities."""

    train: QuadraticPieces
    test: QuadraticPieces


@dataclass(frozen=True)
class CvResult:
    """Loss curve, the selected penalty, and the full-data refit."""

    lam_grid: np.ndarray
    mean_loss: np.ndarray
    se_loss: np.ndarray
    lam_star: float
    fit: FitResult
    k: int

    def __post_init__(self):
        self.lam_grid.setflags(write=False)
        self.mean_loss.setflags(write=False)
        self.se_loss.setflags(write=False)


def kfold_split(n: int, k: int, seed: int) -> FoldPlan:
    """Random balanced partition of ``range(n)`` into ``k`` folds."""
    if not 2 <= k <= n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    perm = rng.permutation(n)
    sizes = np.full(k, n // k, dtype=int)
    sizes[: n % k] += 1
    assignment = np.empty(n, dtype=np.int64)
    start = 0
    for fold, size in enumerate(sizes):
        assignment[perm[start : start + size]] = fold
        start += size
    return FoldPlan(k=k, assignment=assignment, seed=seed)


def _quadratics(design, y, sigma_agg, proj_weights, rho, tol, max_iter):
    """Corrected+projected (or plain naive) quantities for one row set."""
    if sigma_agg is None:
        return naive_quadratic(design, y)
    corr = corrected_quadratic(design, y, sigma_agg)
    if proj_weights is None:
        return corr
    projected, _ = project_quadratic(
        corr, proj_weights, rho=rho, tol=tol, max_iter=max_iter
    )
    return projected


def build_fold_quadratics(
    design: np.ndarray,
    y: np.ndarray,
    sigma_agg: AggregatedErrorCov | None,
    plan: FoldPlan,
    proj_weights: np.ndarray | None,
    rho: float = 1.0,
    tol: float = 1e-7,
    max_iter: int = 5000,
):
    """Per-fold quantities plus the full-data training quantities.

    ``sigma_agg=None`` builds naive quantities throughout (the
    uncorrected worldview); otherwise training grams are corrected and,
    when ``proj_weights`` is given, PSD-projected, while held-out grams
    are corrected then eigenvalue-clipped to the PSD cone.
    """
    design = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if design.shape[0] != plan.n or y.shape != (plan.n,):
        raise ValueError("design/response rows do not match the fold plan")
    sizes = np.bincount(plan.assignment, minlength=plan.k)
    if sizes.min() < 2:
        raise ValueError(
            f"smallest fold has {sizes.min()} row(s); need at least 2"
        )
    folds = []
    for f in range(plan.k):
        test_rows = plan.assignment == f
        train_rows = ~test_rows
        train = _quadratics(
            design[train_rows], y[train_rows], sigma_agg, proj_weights,
            rho, tol, max_iter,
        )
        if sigma_agg is None:
            test = naive_quadratic(design[test_rows], y[test_rows])
        else:
            test = clip_quadratic(
                corrected_quadratic(design[test_rows], y[test_rows], sigma_agg)
            )
        folds.append(FoldQuadratics(train=train, test=test))
    full = _quadratics(design, y, sigma_agg, proj_weights, rho, tol, max_iter)
    return folds, full


def held_out_loss(q: QuadraticPieces, gamma: np.ndarray) -> float:
    """Corrected quadratic loss; exactly 0 at gamma = 0."""
    return float(0.5 * gamma @ (q.gram @ gamma) - q.cross @ gamma)


def select_from_quadratics(
    folds,
    full: QuadraticPieces,
    c: np.ndarray | None,
    penalty: PenaltySpec,
    lam_grid: np.ndarray | None = None,
) -> CvResult:
    """Grid search over prepared fold quantities, then refit on all rows."""
    if lam_grid is None:
        lam_grid = default_lambda_grid(lambda_max(full, c, penalty))
    lam_grid = np.asarray(lam_grid, dtype=float)
    losses = np.empty((len(folds), lam_grid.size))
    for fi, fold in enumerate(folds):
        path = solve_path(fold.train, c, penalty, lam_grid)
        for li, fit in enumerate(path):
            losses[fi, li] = held_out_loss(fold.test, fit.gamma)
    mean_loss = losses.mean(axis=0)
    se_loss = losses.std(axis=0, ddof=1) / np.sqrt(len(folds))
    best = int(np.argmin(mean_loss))  # descending grid: ties pick larger lam
    lam_star = float(lam_grid[best])
    fit = solve_tarco(full, c, penalty, lam_star)
    return CvResult(
        lam_grid=lam_grid,
        mean_loss=mean_loss,
        se_loss=se_loss,
        lam_star=lam_star,
        fit=fit,
        k=len(folds),
    )


def cv_select(
    ztilde,
    y: np.ndarray,
    tree: TaxTree,
    sigma: ErrorCov,
    penalty: PenaltySpec,
    plan: FoldPlan,
    lam_grid: np.ndarray | None = None,
) -> CvResult:
    """Full pipeline selection on a log-ratio matrix with a tree."""
    agg = build_aggregation(tree)
    z_a = ztilde.values @ agg.a
    sigma_agg = aggregate_sigma(sigma, agg, ztilde.ref)
    folds, full = build_fold_quadratics(
        z_a, y, sigma_agg, plan, proj_weights=agg.leaf_counts
    )
    result = select_from_quadratics(folds, full, agg.c, penalty, lam_grid)
    fit = replace(result.fit, beta=agg.a @ result.fit.gamma)
    return replace(result, fit=fit)
