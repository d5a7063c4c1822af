"""Penalized quadratic solver with a sum-to-zero constraint.

Solves

    minimize  1/2 gamma^T G gamma - b^T gamma + lam * sum_k w_k |gamma_k|
    subject to  c^T gamma = 0        (constraint optional)

by ADMM on the splitting gamma / z, where the gamma block absorbs the
quadratic and the equality constraint (a cached eigendecomposition of G
makes the per-iteration linear solve two matrix-vector products at any
penalty parameter rho) and the z block is a weighted soft-threshold.

The ADMM iterate is then polished: the support of z fixes a reduced
equality-constrained quadratic program whose saddle system is solved
directly, giving exact zeros, machine-precision feasibility, and a
certifiable stationary point.  Every returned fit carries an exact KKT
residual, computed by minimizing the piecewise-linear certificate over
the constraint multiplier with a deterministic bisection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.optimize

from tarco.correction import QuadraticPieces
from tarco.tree import TaxTree

__all__ = [
    "PenaltySpec",
    "FitResult",
    "make_penalty",
    "penalty_weights",
    "soft_threshold",
    "lambda_max",
    "default_lambda_grid",
    "kkt_residual",
    "unbounded_threshold",
    "solve_tarco",
    "solve_path",
]

PENALTY_VARIANTS = ("weighted-alr1", "descendant")

KKT_TOL = 1e-6
ADMM_TOL = 1e-9
ADMM_MAX_ITER = 20000
RHO_MIN, RHO_MAX = 1e-4, 1e4
BALANCE_FACTOR = 2.0
BALANCE_TRIGGER = 10.0
# Iterate bound marking the objective as unbounded below (possible when the
# gram is singular and the cross moment has mass outside its range; then the
# penalized loss decreases without limit once lam is small enough). Relative
# to the cross-moment scale.
DIVERGE_LIMIT = 1e8


@dataclass(frozen=True)
class PenaltySpec:
    """Sparsity penalty lam * sum_k weights_k |gamma_k|.

    ``weighted-alr1`` uses leaf-count powers ``|L_k|^alpha``; the
    ``descendant`` penalty sums the l1 norm of every node's descendant
    block, which reshuffles to ancestor-or-self counts per coordinate.
    """

    variant: str
    alpha: float | None
    weights: np.ndarray

    def __post_init__(self):
        if self.variant not in PENALTY_VARIANTS:
            raise ValueError(f"unknown penalty variant {self.variant!r}")
        if (self.weights <= 0).any():
            raise ValueError("penalty weights must be positive")
        self.weights.setflags(write=False)


@dataclass(frozen=True)
class FitResult:
    """A solution with its certificate.

    ``converged`` means the KKT residual is within tolerance; a fit can
    converge even when ADMM hit its iteration cap, because the polish
    step certifies optimality independently.
    """

    gamma: np.ndarray
    lam: float
    penalty: PenaltySpec
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool
    polished: bool
    beta: np.ndarray | None = None

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.gamma)


def penalty_weights(
    tree: TaxTree, variant: str = "weighted-alr1", alpha: float = 0.0
) -> np.ndarray:
    """Per-node weights for the chosen penalty variant."""
    T = tree.n_nodes
    if variant == "weighted-alr1":
        counts = np.array([tree.leaf_count(k) for k in range(T)], dtype=float)
        return counts**alpha
    if variant == "descendant":
        return np.array(
            [len(tree.ancestors_or_self(k)) for k in range(T)], dtype=float
        )
    raise ValueError(f"unknown penalty variant {variant!r}")


def make_penalty(
    tree: TaxTree, variant: str = "weighted-alr1", alpha: float = 0.0
) -> PenaltySpec:
    w = penalty_weights(tree, variant, alpha)
    return PenaltySpec(
        variant=variant,
        alpha=alpha if variant == "weighted-alr1" else None,
        weights=w,
    )


def soft_threshold(x: np.ndarray, kappa: np.ndarray) -> np.ndarray:
    """Elementwise ``sign(x) * max(|x| - kappa, 0)``."""
    return np.sign(x) * np.maximum(np.abs(x) - kappa, 0.0)


# ---------------------------------------------------------------------------
# Exact one-dimensional minimax over lines (for lambda_max and KKT)
# ---------------------------------------------------------------------------

def _minimize_max_lines(slopes: np.ndarray, intercepts: np.ndarray):
    """Minimize ``max_i (slopes_i * mu + intercepts_i)`` over scalar mu.

    Requires lines of both signs (the envelope is coercive); flat lines
    only cap the value.  Returns ``(mu_star, value)``.
    """
    pos = slopes > 0
    neg = slopes < 0
    flat = ~pos & ~neg
    flat_max = float(intercepts[flat].max()) if flat.any() else -np.inf
    if not pos.any() or not neg.any():
        raise ValueError("envelope is not coercive; need slopes of both signs")

    sp, ip = slopes[pos], intercepts[pos]
    sn, iN = slopes[neg], intercepts[neg]

    def gap(mu: float) -> float:
        return float((sp * mu + ip).max() - (sn * mu + iN).max())

    lo, hi = -1.0, 1.0
    for _ in range(200):
        if gap(lo) < 0:
            break
        lo *= 2.0
    for _ in range(200):
        if gap(hi) > 0:
            break
        hi *= 2.0
    for _ in range(120):  # fixed count keeps runs bit-identical
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0:
            lo = mid
        else:
            hi = mid
    mu = 0.5 * (lo + hi)
    val = max(
        float((sp * mu + ip).max()), float((sn * mu + iN).max()), flat_max
    )
    return mu, val


def lambda_max(
    q: QuadraticPieces, c: np.ndarray | None, penalty: PenaltySpec
) -> float:
    """Smallest lam at which the zero vector is stationary.

    With the constraint present, gamma = 0 is optimal iff some multiplier
    mu puts every coordinate inside its subgradient box, so
    ``lambda_max = min_mu max_k |b_k - mu c_k| / w_k``.
    """
    b = q.cross
    w = penalty.weights
    if not b.any():
        return 0.0
    if c is None:
        return float(np.abs(b / w).max())
    slopes = np.concatenate([-c / w, c / w])
    intercepts = np.concatenate([b / w, -b / w])
    _, val = _minimize_max_lines(slopes, intercepts)
    return max(val, 0.0)


def default_lambda_grid(lam_max: float, n_points: int = 50, floor: float = 1e-3):
    """Log-spaced descending grid from lam_max to floor * lam_max."""
    if lam_max <= 0:
        return np.zeros(1)
    return np.geomspace(lam_max, floor * lam_max, n_points)


def kkt_residual(
    gram: np.ndarray,
    cross: np.ndarray,
    c: np.ndarray | None,
    penalty: PenaltySpec,
    lam: float,
    gamma: np.ndarray,
) -> float:
    """Exact l-infinity stationarity residual, minimized over the multiplier.

    With ``r(mu) = G gamma - b + mu c``, the residual at coordinate k is
    ``|r_k + lam w_k sign(gamma_k)|`` on the support and
    ``(|r_k| - lam w_k)_+`` off it; the reported value is the minimum
    over mu of the max over k (a coercive piecewise-linear program).
    """
    w = penalty.weights
    g0 = gram @ gamma - cross
    on = gamma != 0
    off = ~on
    signs = np.sign(gamma[on])

    if c is None:
        parts = [np.abs(g0[on] + lam * w[on] * signs)]
        if off.any():
            parts.append(np.maximum(np.abs(g0[off]) - lam * w[off], 0.0))
        return float(np.concatenate(parts).max()) if parts else 0.0

    slopes = [np.array([0.0])]
    intercepts = [np.array([0.0])]  # residual is nonnegative
    if on.any():
        shift = g0[on] + lam * w[on] * signs
        slopes += [c[on], -c[on]]
        intercepts += [shift, -shift]
    if off.any():
        slopes += [c[off], -c[off]]
        intercepts += [g0[off] - lam * w[off], -g0[off] - lam * w[off]]
    _, val = _minimize_max_lines(
        np.concatenate(slopes), np.concatenate(intercepts)
    )
    return max(val, 0.0)


# ---------------------------------------------------------------------------
# ADMM core
# ---------------------------------------------------------------------------

class _GramEig:
    """Eigendecomposition of the gram matrix, reused across rho and lam."""

    def __init__(self, gram: np.ndarray):
        self.evals, self.evecs = np.linalg.eigh(gram)
        self._cache: dict = {}

    def factors(self, rho: float, c: np.ndarray | None):
        """Inverse spectrum at rho, plus K^-1 c and c^T K^-1 c."""
        key = rho
        if key not in self._cache:
            inv = 1.0 / (self.evals + rho)
            if c is None:
                kc, s = None, None
            else:
                vc = self.evecs.T @ c
                kc = self.evecs @ (inv * vc)
                s = float(vc @ (inv * vc))
            self._cache[key] = (inv, kc, s)
        return self._cache[key]

    def apply_inverse(self, inv: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.evecs @ (inv * (self.evecs.T @ x))


def unbounded_threshold(
    q: QuadraticPieces,
    c: np.ndarray | None,
    penalty: PenaltySpec,
    null_tol: float = 1e-9,
) -> float:
    """Largest lam at which the penalized objective is unbounded below.

    With a singular PSD gram the loss can decrease without limit along
    null-space directions once the penalty is too weak: for d with
    gram @ d = 0 and c @ d = 0 the objective recedes like
    t * (lam * w @ |d| - b @ d), so it is bounded below iff
    |b @ d| <= lam * w @ |d| for every such d. The threshold

        lam_crit = max |b @ d| / (w @ |d|)

    over the constrained null space is a linear program after normalizing
    w @ |d| = 1. Returns 0.0 when the gram is nonsingular or the cross
    moment lies in its range (then every lam > 0 admits a minimizer).
    """
    eig = _GramEig(q.gram)
    return _unbounded_threshold(eig, q.cross, c, penalty.weights, null_tol)


def _unbounded_threshold(
    eig: _GramEig,
    b: np.ndarray,
    c: np.ndarray | None,
    w: np.ndarray,
    null_tol: float = 1e-9,
) -> float:
    top = float(eig.evals.max(initial=0.0))
    null = eig.evals <= null_tol * max(top, 1.0)
    m = int(null.sum())
    if m == 0:
        return 0.0
    nbasis = eig.evecs[:, null]
    bn = nbasis.T @ b
    if float(np.abs(bn).max(initial=0.0)) <= 1e-12 * max(
        1.0, float(np.abs(b).max(initial=0.0))
    ):
        return 0.0
    T = nbasis.shape[0]
    # variables (z in R^m, a in R^T): maximize b @ (N z) subject to
    # |N z| <= a elementwise, w @ a = 1, and c @ (N z) = 0
    a_ub = np.zeros((2 * T, m + T))
    a_ub[:T, :m] = nbasis
    a_ub[T:, :m] = -nbasis
    a_ub[:T, m:] = -np.eye(T)
    a_ub[T:, m:] = -np.eye(T)
    b_ub = np.zeros(2 * T)
    rows = [np.concatenate([np.zeros(m), w])]
    rhs = [1.0]
    if c is not None:
        rows.append(np.concatenate([nbasis.T @ c, np.zeros(T)]))
        rhs.append(0.0)
    cost = np.concatenate([-bn, np.zeros(T)])
    res = scipy.optimize.linprog(
        cost,
        A_ub=a_ub,
        b_ub=b_ub,
        A_eq=np.array(rows),
        b_eq=np.array(rhs),
        bounds=[(None, None)] * m + [(0.0, None)] * T,
        method="highs",
    )
    if not res.success:
        # feasible (z=0) and bounded by construction, so failure here is a
        # numerical breakdown; fall back to "nothing provably unbounded"
        return 0.0
    return max(0.0, -float(res.fun))


def _zero_fit(
    q: QuadraticPieces,
    c: np.ndarray | None,
    penalty: PenaltySpec,
    lam: float,
) -> FitResult:
    """Canonical feasible result for lam at or below the unbounded threshold."""
    T = q.dim
    gamma = np.zeros(T)
    res = kkt_residual(q.gram, q.cross, c, penalty, lam, gamma)
    return FitResult(
        gamma=gamma,
        lam=lam,
        penalty=penalty,
        objective=0.0,
        kkt_residual=res,
        iterations=0,
        converged=False,
        polished=False,
    )


def _admm_core(
    eig: _GramEig,
    b: np.ndarray,
    c: np.ndarray | None,
    w: np.ndarray,
    lam: float,
    z0: np.ndarray,
    u0: np.ndarray,
    rho: float,
    tol: float,
    max_iter: int,
):
    z = z0.copy()
    u = u0.copy()
    inv, kc, s = eig.factors(rho, c)
    gamma = z.copy()
    it = 0
    converged = False
    guard = DIVERGE_LIMIT * max(1.0, float(np.abs(b).max(initial=0.0)))
    for it in range(1, max_iter + 1):
        rhs = b + rho * (z - u)
        v = eig.apply_inverse(inv, rhs)
        if c is None:
            gamma = v
        else:
            gamma = v - ((c @ v) / s) * kc
        z_old = z
        z = soft_threshold(gamma + u, lam * w / rho)
        u = u + (gamma - z)

        gmax = float(np.abs(gamma).max(initial=0.0))
        if not np.isfinite(gmax) or gmax > guard:
            break

        r_norm = float(np.linalg.norm(gamma - z))
        s_norm = float(rho * np.linalg.norm(z - z_old))
        p_scale = max(1.0, float(np.linalg.norm(gamma)), float(np.linalg.norm(z)))
        d_scale = max(1.0, float(rho * np.linalg.norm(u)))
        if r_norm <= tol * p_scale and s_norm <= tol * d_scale:
            converged = True
            break

        if it % 10 == 0:
            if r_norm > BALANCE_TRIGGER * s_norm and rho < RHO_MAX:
                rho *= BALANCE_FACTOR
                u = u / BALANCE_FACTOR
                inv, kc, s = eig.factors(rho, c)
            elif s_norm > BALANCE_TRIGGER * r_norm and rho > RHO_MIN:
                rho /= BALANCE_FACTOR
                u = u * BALANCE_FACTOR
                inv, kc, s = eig.factors(rho, c)

    return gamma, z, u, it, converged, rho


def _polish(
    gram: np.ndarray,
    b: np.ndarray,
    c: np.ndarray | None,
    w: np.ndarray,
    lam: float,
    z: np.ndarray,
):
    """Solve the reduced saddle system on supp(z), shrinking on sign flips.

    Returns the polished gamma or None when the reduced system is
    inconsistent (the ADMM iterate is then the best available answer).
    """
    supp = np.flatnonzero(z)
    T = z.shape[0]
    for _ in range(T + 1):
        if supp.size == 0:
            return np.zeros(T)
        signs = np.sign(z[supp])
        rhs_s = b[supp] - lam * w[supp] * signs
        g_ss = gram[np.ix_(supp, supp)]
        if c is None:
            m = g_ss
            rhs_full = rhs_s
        else:
            c_s = c[supp]
            m = np.zeros((supp.size + 1, supp.size + 1))
            m[:-1, :-1] = g_ss
            m[:-1, -1] = c_s
            m[-1, :-1] = c_s
            rhs_full = np.concatenate([rhs_s, [0.0]])
        sol, *_ = np.linalg.lstsq(m, rhs_full, rcond=None)
        resid = np.linalg.norm(m @ sol - rhs_full)
        if resid > 1e-8 * max(1.0, float(np.linalg.norm(rhs_full))):
            return None
        x = sol[: supp.size]
        if lam == 0:
            keep = np.ones(supp.size, dtype=bool)
        else:
            # drop sign flips and numerically-zero survivors of the
            # soft-threshold (boundary coordinates at lam ~ lambda_max)
            tiny = 1e-12 * max(1.0, float(np.abs(x).max(initial=0.0)))
            keep = (x * signs > 0) & (np.abs(x) > tiny)
        if keep.all():
            gamma = np.zeros(T)
            gamma[supp] = x
            return gamma
        supp = supp[keep]
    return None


def _check_gram(q: QuadraticPieces) -> None:
    if q.flag == "corrected":
        eigmin = float(np.linalg.eigvalsh(q.gram).min())
        if eigmin < -1e-8:
            raise ValueError(
                f"corrected gram is indefinite (min eigenvalue {eigmin:.3e}); "
                "project onto the PSD cone first"
            )


def _finalize(
    eig_gram: np.ndarray,
    q: QuadraticPieces,
    c: np.ndarray | None,
    penalty: PenaltySpec,
    lam: float,
    gamma_it: np.ndarray,
    z: np.ndarray,
    iterations: int,
) -> FitResult:
    b = q.cross
    w = penalty.weights

    def objective(g):
        return float(0.5 * g @ (eig_gram @ g) - b @ g + lam * (w @ np.abs(g)))

    def feasible(g):
        if c is None:
            return True
        # roundoff of the exact in-loop projection grows with the iterate
        # scale, so the tolerance is relative to c @ |g|
        return abs(float(c @ g)) <= 1e-8 * max(1.0, float(np.abs(c) @ np.abs(g)))

    candidates = []
    polished = _polish(eig_gram, b, c, w, lam, z)
    if polished is not None:
        candidates.append((polished, True))
    candidates.append((gamma_it, False))
    if feasible(z):
        candidates.append((z, False))

    best = None
    for g, was_polished in candidates:
        if not (feasible(g) and np.isfinite(g).all()):
            continue
        res = kkt_residual(eig_gram, b, c, penalty, lam, g)
        if best is None or res < best[1]:
            best = (g, res, was_polished)
        if was_polished and res <= KKT_TOL:
            break

    if best is None:
        # every candidate overflowed or broke feasibility; re-project the
        # ADMM iterate so a (non-converged) result is still returned
        g = np.nan_to_num(gamma_it, nan=0.0, posinf=0.0, neginf=0.0)
        if c is not None:
            g = g - (float(c @ g) / float(c @ c)) * c
        best = (g, kkt_residual(eig_gram, b, c, penalty, lam, g), False)

    gamma, res, was_polished = best
    return FitResult(
        gamma=gamma,
        lam=lam,
        penalty=penalty,
        objective=objective(gamma),
        kkt_residual=res,
        iterations=iterations,
        converged=res <= KKT_TOL,
        polished=was_polished,
    )


def solve_tarco(
    q: QuadraticPieces,
    c: np.ndarray | None,
    penalty: PenaltySpec,
    lam: float,
    warm_start: np.ndarray | None = None,
    rho: float = 1.0,
    tol: float = ADMM_TOL,
    max_iter: int = ADMM_MAX_ITER,
) -> FitResult:
    """Solve one penalized problem; see the module docstring."""
    if lam < 0:
        raise ValueError(f"lam must be nonnegative, got {lam}")
    _check_gram(q)
    c = None if c is None else np.asarray(c, dtype=float)
    T = q.dim
    eig = _GramEig(q.gram)
    lam_crit = _unbounded_threshold(eig, q.cross, c, penalty.weights)
    if 0.0 < lam_crit >= lam:
        return _zero_fit(q, c, penalty, lam)
    z0 = np.zeros(T) if warm_start is None else np.asarray(warm_start, dtype=float)
    u0 = np.zeros(T)
    gamma, z, _, it, _, _ = _admm_core(
        eig, q.cross, c, penalty.weights, lam, z0, u0, rho, tol, max_iter
    )
    return _finalize(q.gram, q, c, penalty, lam, gamma, z, it)


def solve_path(
    q: QuadraticPieces,
    c: np.ndarray | None,
    penalty: PenaltySpec,
    lam_grid: np.ndarray,
    rho: float = 1.0,
    tol: float = ADMM_TOL,
    max_iter: int = ADMM_MAX_ITER,
) -> list:
    """Solve along a strictly descending grid with chained warm starts."""
    lam_grid = np.asarray(lam_grid, dtype=float)
    if lam_grid.size == 0:
        raise ValueError("empty lambda grid")
    if lam_grid.size > 1 and not (np.diff(lam_grid) < 0).all():
        raise ValueError("lambda grid must be strictly descending")
    _check_gram(q)
    c = None if c is None else np.asarray(c, dtype=float)
    T = q.dim
    eig = _GramEig(q.gram)
    lam_crit = _unbounded_threshold(eig, q.cross, c, penalty.weights)
    z = np.zeros(T)
    u = np.zeros(T)
    rho_cur = rho
    results = []
    for lam in lam_grid:
        if 0.0 < lam_crit >= lam:
            results.append(_zero_fit(q, c, penalty, float(lam)))
            continue
        gamma, z, u, it, _, rho_cur = _admm_core(
            eig, q.cross, c, penalty.weights, float(lam), z, u, rho_cur, tol, max_iter
        )
        results.append(_finalize(q.gram, q, c, penalty, float(lam), gamma, z, it))
    return results
