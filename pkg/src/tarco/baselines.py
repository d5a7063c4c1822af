"""Comparison estimators: naive tree aggregation and a flat corrected lasso.

``fit_trac_naive`` runs the identical penalized program on the plug-in
quantities, so contamination enters the gram unchecked; it is PSD by
construction and skips the projection stage.  ``fit_flat_corrected``
keeps the bias correction but drops the tree: a plain lasso on the
(p-1)-dimensional log-ratio design with no sum-to-zero constraint, the
reference coefficient recovered afterwards from the constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from tarco.compdata import LogRatioMatrix
from tarco.correction import corrected_quadratic, naive_quadratic, project_quadratic
from tarco.cv import CvResult, FoldPlan, build_fold_quadratics, select_from_quadratics
from tarco.mecov import AggregatedErrorCov, ErrorCov
from tarco.solver import FitResult, PenaltySpec, make_penalty, solve_tarco
from tarco.tree import TaxTree, build_aggregation

__all__ = [
    "BaselineSpec",
    "flat_sigma",
    "expand_flat",
    "fit_trac_naive",
    "fit_flat_corrected",
    "cv_trac_naive",
    "cv_flat_corrected",
]

BASELINE_KINDS = ("trac-naive", "flat-corrected")


@dataclass(frozen=True)
class BaselineSpec:
    """Which comparison estimator to run and its penalty parameter."""

    kind: str
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}")


def flat_sigma(sigma: ErrorCov, ref: int) -> AggregatedErrorCov:
    """Error covariance viewed through the identity aggregation."""
    if sigma.ref is not None and sigma.ref != ref:
        raise ValueError(
            f"covariance excludes coordinate {sigma.ref}, not reference {ref}"
        )
    return AggregatedErrorCov(sigma_agg=sigma.sigma, ref=ref)


def expand_flat(coef: np.ndarray, ref: int) -> np.ndarray:
    """Insert the reference coefficient so the expansion sums to zero."""
    p = coef.shape[0] + 1
    beta = np.empty(p)
    beta[:ref] = coef[:ref]
    beta[ref + 1 :] = coef[ref:]
    beta[ref] = -coef.sum()
    return beta


def fit_trac_naive(
    ztilde: LogRatioMatrix,
    y: np.ndarray,
    tree: TaxTree,
    spec: BaselineSpec,
    lam: float,
) -> FitResult:
    """Tree-aggregated fit on the plug-in quantities, no correction."""
    agg = build_aggregation(tree)
    penalty = make_penalty(tree, "weighted-alr1", spec.alpha)
    q = naive_quadratic(ztilde.values @ agg.a, y)
    fit = solve_tarco(q, agg.c, penalty, lam)
    return replace(fit, beta=agg.a @ fit.gamma)


def fit_flat_corrected(
    ztilde: LogRatioMatrix,
    y: np.ndarray,
    sigma: ErrorCov,
    lam: float,
) -> FitResult:
    """Corrected, projected, unconstrained lasso on the flat design."""
    design = ztilde.without_ref()
    q = corrected_quadratic(design, y, flat_sigma(sigma, ztilde.ref))
    projected, _ = project_quadratic(q, np.ones(design.shape[1]))
    penalty = PenaltySpec(
        variant="weighted-alr1", alpha=0.0, weights=np.ones(design.shape[1])
    )
    fit = solve_tarco(projected, None, penalty, lam)
    return replace(fit, beta=expand_flat(fit.gamma, ztilde.ref))


def cv_trac_naive(
    ztilde: LogRatioMatrix,
    y: np.ndarray,
    tree: TaxTree,
    spec: BaselineSpec,
    plan: FoldPlan,
    lam_grid: np.ndarray | None = None,
) -> CvResult:
    """Penalty selection for the naive fit under its own plug-in loss."""
    agg = build_aggregation(tree)
    penalty = make_penalty(tree, "weighted-alr1", spec.alpha)
    folds, full = build_fold_quadratics(
        ztilde.values @ agg.a, y, None, plan, proj_weights=None
    )
    result = select_from_quadratics(folds, full, agg.c, penalty, lam_grid)
    fit = replace(result.fit, beta=agg.a @ result.fit.gamma)
    return replace(result, fit=fit)


def cv_flat_corrected(
    ztilde: LogRatioMatrix,
    y: np.ndarray,
    sigma: ErrorCov,
    plan: FoldPlan,
    lam_grid: np.ndarray | None = None,
) -> CvResult:
    """Penalty selection for the flat baseline under the corrected loss."""
    design = ztilde.without_ref()
    d = design.shape[1]
    folds, full = build_fold_quadratics(
        design, y, flat_sigma(sigma, ztilde.ref), plan,
        proj_weights=np.ones(d),
    )
    penalty = PenaltySpec(variant="weighted-alr1", alpha=0.0, weights=np.ones(d))
    result = select_from_quadratics(folds, full, None, penalty, lam_grid)
    fit = replace(result.fit, beta=expand_flat(result.fit.gamma, ztilde.ref))
    return replace(result, fit=fit)
