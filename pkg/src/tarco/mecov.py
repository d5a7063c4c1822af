"""Measurement-error covariance on the log-ratio scale.

Multiplicative noise on counts becomes additive noise after the log-ratio
transform.  Its covariance ``Sigma_U`` lives on the p-1 non-reference
coordinates; it is either supplied, estimated from technical replicates,
or taken from the exchangeable working model ``tau^2 (I + 1 1^T)`` that
i.i.d. log-scale errors with variance ``tau^2`` induce.

Aggregation along the tree pads the reference coordinate back in with an
explicit zero row/column and conjugates by the aggregation matrix, so
every node-level entry is auditable as ``a_k^T pad(Sigma_U) a_l``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from tarco.tree import AggregationMatrix

__all__ = [
    "ErrorCov",
    "AggregatedErrorCov",
    "estimate_sigma_u",
    "working_sigma_u",
    "aggregate_sigma",
    "padding_injection",
]

PROVENANCES = ("known", "estimated", "working-model")

# Replicate designs with one group dominating the pooled degrees of
# freedom make the estimator unstable; purely diagnostic threshold.
UNBALANCE_RATIO = 10.0


@dataclass(frozen=True)
class ErrorCov:
    """Symmetric (p-1) x (p-1) error covariance, reference excluded.

    ``ref`` is the excluded coordinate when known (None for the
    exchangeable working model, which is reference-agnostic).
    """

    sigma: np.ndarray
    ref: int | None
    tau: float | None
    provenance: str

    def __post_init__(self):
        s = self.sigma
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValueError(f"covariance must be square, got {s.shape}")
        if not np.isfinite(s).all():
            raise ValueError("covariance contains non-finite entries")
        if np.abs(s - s.T).max() > 1e-12:
            raise ValueError("covariance must be symmetric within 1e-12")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "working-model":
            d = s.shape[0]
            want = self.tau**2 * (np.eye(d) + np.ones((d, d)))
            if not np.array_equal(s, want):
                raise ValueError("working-model covariance has the wrong form")
        s.setflags(write=False)

    @property
    def dim(self) -> int:
        return int(self.sigma.shape[0])


@dataclass(frozen=True)
class AggregatedErrorCov:
    """Node-level error covariance ``A^T pad(Sigma_U) A`` (T x T)."""

    sigma_agg: np.ndarray
    ref: int

    def __post_init__(self):
        s = self.sigma_agg
        if np.abs(s - s.T).max() > 1e-10:
            raise ValueError("aggregated covariance must be symmetric")
        s.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return int(self.sigma_agg.shape[0])


def estimate_sigma_u(groups, ref: int | None = None) -> ErrorCov:
    """Pooled within-group covariance of replicate log-ratio vectors.

    ``groups`` is a sequence of (t_i, p-1) arrays, one per sample, each
    holding t_i >= 2 replicate measurements with the reference coordinate
    already dropped.  The estimator sums squared deviations from the
    group means and divides by the pooled degrees of freedom
    ``sum_i (t_i - 1)``.
    """
    groups = [np.asarray(g, dtype=float) for g in groups]
    if not groups:
        raise ValueError("no replicate groups provided")
    d = groups[0].shape[1] if groups[0].ndim == 2 else -1
    dof = 0
    for i, g in enumerate(groups):
        if g.ndim != 2 or g.shape[1] != d:
            raise ValueError(f"group {i} has shape {g.shape}, expected (t_i, {d})")
        if g.shape[0] < 2:
            raise ValueError(f"group {i} has {g.shape[0]} replicate(s); need >= 2")
        dof += g.shape[0] - 1

    max_dof = max(g.shape[0] - 1 for g in groups)
    if len(groups) > 1 and max_dof > UNBALANCE_RATIO * dof / len(groups):
        warnings.warn(
            "replicate counts are highly unbalanced; the pooled covariance "
            "estimate may be dominated by a few samples",
            stacklevel=2,
        )

    acc = np.zeros((d, d))
    for g in groups:
        dev = g - g.mean(axis=0)
        acc += dev.T @ dev
    sigma = acc / dof
    sigma = 0.5 * (sigma + sigma.T)
    return ErrorCov(sigma=sigma, ref=ref, tau=None, provenance="estimated")


def working_sigma_u(p: int, tau: float) -> ErrorCov:
    """Exchangeable working covariance ``tau^2 (I_{p-1} + 1 1^T)``."""
    if p < 2:
        raise ValueError(f"need at least 2 parts, got {p}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    d = p - 1
    sigma = tau**2 * (np.eye(d) + np.ones((d, d)))
    return ErrorCov(sigma=sigma, ref=None, tau=tau, provenance="working-model")


def padding_injection(p: int, ref: int) -> np.ndarray:
    """The p x (p-1) matrix inserting a zero row at the reference index."""
    if not (0 <= ref < p):
        raise ValueError(f"reference index {ref} out of range")
    pad = np.zeros((p, p - 1))
    col = 0
    for j in range(p):
        if j == ref:
            continue
        pad[j, col] = 1.0
        col += 1
    return pad


def aggregate_sigma(
    sigma: ErrorCov, agg: AggregationMatrix, ref: int
) -> AggregatedErrorCov:
    """Conjugate the padded error covariance by the aggregation matrix."""
    p = agg.n_leaves
    if sigma.dim != p - 1:
        raise ValueError(
            f"covariance dimension {sigma.dim} does not match p-1 = {p - 1}"
        )
    if sigma.ref is not None and sigma.ref != ref:
        raise ValueError(
            f"covariance excludes coordinate {sigma.ref}, not reference {ref}"
        )
    pad = padding_injection(p, ref)
    padded = pad @ sigma.sigma @ pad.T
    out = agg.a.T @ padded @ agg.a
    out = 0.5 * (out + out.T)
    return AggregatedErrorCov(sigma_agg=out, ref=ref)
