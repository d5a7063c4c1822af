"""Bias-corrected estimating quantities and the weighted PSD projection.

The node-level quadratic loss is built from a gram matrix and a cross
vector.  With contaminated designs the naive gram overestimates the
signal gram by the aggregated error covariance, so the corrected gram
subtracts it; the result can be indefinite and is repaired by projecting
onto the PSD cone under the entrywise max norm weighted by inverse leaf
counts,

    minimize  || W^-1 (G - Psi) W^-1 ||_max  over  Psi >= 0,

solved by ADMM.  The PSD block is an eigenvalue clip; the max-norm block
is an exact prox computed by clipping the weighted deviation matrix at a
level found by sorted waterfilling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tarco.mecov import AggregatedErrorCov

__all__ = [
    "QuadraticPieces",
    "ProjectionReport",
    "naive_quadratic",
    "corrected_quadratic",
    "psd_project",
    "project_quadratic",
    "clip_quadratic",
    "weighted_max_deviation",
]

FLAGS = ("naive", "corrected", "projected", "oracle")


@dataclass(frozen=True)
class QuadraticPieces:
    """Gram matrix and cross vector defining a quadratic loss.

    ``flag`` records how the gram was produced: ``naive`` (contaminated
    design, no adjustment), ``corrected`` (error covariance subtracted,
    possibly indefinite), ``projected`` (corrected then PSD-projected),
    or ``oracle`` (built from latent data).
    """

    gram: np.ndarray
    cross: np.ndarray
    n: int
    flag: str

    def __post_init__(self):
        g = self.gram
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError(f"gram must be square, got {g.shape}")
        if self.cross.shape != (g.shape[0],):
            raise ValueError(
                f"cross has shape {self.cross.shape}, expected ({g.shape[0]},)"
            )
        if np.abs(g - g.T).max() > 1e-10:
            raise ValueError("gram must be symmetric within 1e-10")
        if self.flag not in FLAGS:
            raise ValueError(f"unknown flag {self.flag!r}")
        if self.flag == "projected":
            if np.linalg.eigvalsh(g).min() < -1e-8:
                raise ValueError("projected gram must be PSD within 1e-8")
        g.setflags(write=False)
        self.cross.setflags(write=False)

    @property
    def dim(self) -> int:
        return int(self.gram.shape[0])


@dataclass(frozen=True)
class ProjectionReport:
    """Diagnostics from one PSD projection run."""

    iterations: int
    primal_residual: float
    dual_residual: float
    max_weighted_deviation: float
    min_eigenvalue: float
    converged: bool


def naive_quadratic(z_a: np.ndarray, y: np.ndarray) -> QuadraticPieces:
    """Plug-in quantities from a (possibly contaminated) node design."""
    z_a = np.asarray(z_a, dtype=float)
    y = np.asarray(y, dtype=float)
    n = z_a.shape[0]
    if y.shape != (n,):
        raise ValueError(f"response has shape {y.shape}, expected ({n},)")
    gram = z_a.T @ z_a / n
    gram = 0.5 * (gram + gram.T)
    cross = z_a.T @ y / n
    return QuadraticPieces(gram=gram, cross=cross, n=n, flag="naive")


def corrected_quadratic(
    z_a: np.ndarray, y: np.ndarray, sigma_agg: AggregatedErrorCov
) -> QuadraticPieces:
    """Subtract the aggregated error covariance from the naive gram.

    The cross vector needs no adjustment because the noise is independent
    of the response.  The corrected gram may be indefinite.
    """
    base = naive_quadratic(z_a, y)
    if sigma_agg.sigma_agg.shape != base.gram.shape:
        raise ValueError(
            f"error covariance shape {sigma_agg.sigma_agg.shape} does not "
            f"match gram shape {base.gram.shape}"
        )
    gram = base.gram - sigma_agg.sigma_agg
    gram = 0.5 * (gram + gram.T)
    return QuadraticPieces(gram=gram, cross=base.cross, n=base.n, flag="corrected")


def weighted_max_deviation(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> float:
    """``max_kl |a_kl - b_kl| / (w_k w_l)``."""
    scale = np.outer(w, w)
    return float(np.abs((a - b) / scale).max())


def _eigclip(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    np.clip(vals, 0.0, None, out=vals)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def _maxnorm_prox(v: np.ndarray, target: np.ndarray, omega: np.ndarray, rho: float):
    """argmin_T  max_kl |target-T|_kl/(w_k w_l) + (rho/2) ||T - v||_F^2.

    In deviation coordinates D = (target - T) / (w w^T) the problem is
    min_D max|D| + (rho/2) sum omega_kl (D - M)_kl^2 with M the weighted
    (target - v); the minimizer clips M at level m* where the decreasing
    piecewise-linear h(m) = rho * sum omega_kl (|M|_kl - m)_+ crosses 1.
    """
    m = (target - v) * omega["inv_scale"]
    a = np.abs(m).ravel()
    wts = omega["flat"]
    h0 = rho * float(wts @ a)
    if h0 <= 1.0:
        return target.copy()
    order = np.argsort(a)[::-1]
    a_sorted = a[order]
    w_sorted = wts[order]
    cum_wa = np.cumsum(w_sorted * a_sorted)
    cum_w = np.cumsum(w_sorted)
    # candidate knot i covers m in [a_{i+1}, a_i]; h(m) = rho (cum_wa_i - m cum_w_i)
    cand = (cum_wa - 1.0 / rho) / cum_w
    lower = np.concatenate([a_sorted[1:], [0.0]])
    ok = np.nonzero((cand >= lower - 1e-15) & (cand <= a_sorted + 1e-15))[0]
    level = float(cand[ok[0]]) if ok.size else 0.0
    level = max(level, 0.0)
    d = np.clip(m, -level, level)
    return target - d * omega["scale"]


def psd_project(
    gram: np.ndarray,
    w: np.ndarray,
    rho: float = 1.0,
    tol: float = 1e-7,
    max_iter: int = 5000,
):
    """Nearest PSD matrix in the leaf-count-weighted entrywise max norm.

    Returns ``(psi, report)`` where ``psi`` is the PSD iterate.  A PSD
    input is returned unchanged.  Hitting ``max_iter`` is reported, not
    raised: the best PSD iterate is still useful downstream.
    """
    gram = np.asarray(gram, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.abs(gram - gram.T).max() > 1e-10:
        raise ValueError("input must be symmetric within 1e-10")
    if (w <= 0).any():
        raise ValueError("weights must be positive")
    sym_raw = 0.5 * (gram + gram.T)

    eigmin = float(np.linalg.eigvalsh(sym_raw).min())
    if eigmin >= 0.0:
        report = ProjectionReport(
            iterations=0,
            primal_residual=0.0,
            dual_residual=0.0,
            max_weighted_deviation=0.0,
            min_eigenvalue=eigmin,
            converged=True,
        )
        return sym_raw, report

    # the objective and the cone are positively homogeneous, so solve on
    # the unit-max-entry scale where the default step is well matched,
    # then scale back: proj(G) = s * proj(G / s)
    s = max(1.0, float(np.abs(sym_raw).max()))
    sym = sym_raw / s

    scale = np.outer(w, w)
    omega = {
        "scale": scale,
        "inv_scale": 1.0 / scale,
        "flat": (scale**2).ravel(),
    }
    T = sym.shape[0]

    theta = _eigclip(sym)
    dual = np.zeros_like(sym)
    psi = sym
    primal_res = dual_res = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        psi = _eigclip(theta - dual)
        theta_new = _maxnorm_prox(psi + dual, sym, omega, rho)
        theta_new = 0.5 * (theta_new + theta_new.T)
        dual += psi - theta_new
        primal_res = float(np.linalg.norm(psi - theta_new))
        dual_res = float(rho * np.linalg.norm(theta_new - theta))
        theta = theta_new
        # residual norms run over T^2 entries, so the thresholds carry an
        # absolute component scaled by T next to the relative one
        eps_pri = tol * (T + max(np.linalg.norm(psi), np.linalg.norm(theta)))
        eps_dual = tol * (T + rho * np.linalg.norm(dual))
        if primal_res <= eps_pri and dual_res <= eps_dual:
            converged = True
            break
        # residual balancing, as in the solver module
        if primal_res > 10.0 * dual_res and rho < 1e6:
            rho *= 2.0
            dual /= 2.0
        elif dual_res > 10.0 * primal_res and rho > 1e-6:
            rho /= 2.0
            dual *= 2.0

    psi = s * 0.5 * (psi + psi.T)
    report = ProjectionReport(
        iterations=it,
        primal_residual=s * primal_res,
        dual_residual=s * dual_res,
        max_weighted_deviation=weighted_max_deviation(sym_raw, psi, w),
        min_eigenvalue=float(np.linalg.eigvalsh(psi).min()),
        converged=converged,
    )
    return psi, report


def project_quadratic(
    q: QuadraticPieces,
    w: np.ndarray,
    rho: float = 1.0,
    tol: float = 1e-7,
    max_iter: int = 5000,
):
    """Project a corrected gram onto the PSD cone, keeping the cross vector."""
    psi, report = psd_project(q.gram, w, rho=rho, tol=tol, max_iter=max_iter)
    out = QuadraticPieces(gram=psi, cross=q.cross.copy(), n=q.n, flag="projected")
    return out, report


def clip_quadratic(q: QuadraticPieces) -> QuadraticPieces:
    """PSD repair by eigenvalue clipping, keeping the cross vector.

    The cheap Frobenius-nearest PSD matrix.  Used for evaluation-side
    quadratics (held-out scoring), where only boundedness from below
    matters; estimation-side grams go through ``project_quadratic``.
    """
    if np.linalg.eigvalsh(q.gram).min() >= 0.0:
        return QuadraticPieces(
            gram=q.gram.copy(), cross=q.cross.copy(), n=q.n, flag="projected"
        )
    psi = _eigclip(q.gram)
    return QuadraticPieces(gram=psi, cross=q.cross.copy(), n=q.n, flag="projected")
