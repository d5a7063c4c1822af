"""Count tables, compositions, and additive log-ratio transforms.

Counts are ingested as nonnegative matrices, zero-handled with a
pseudocount, closed to the simplex, and mapped to log-ratio coordinates
relative to a reference part.  The log-ratio matrix keeps all ``p``
columns with the reference column identically zero, which keeps leaf
indexing aligned with the tree throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CountTable",
    "CompositionMatrix",
    "LogRatioMatrix",
    "apply_pseudocount",
    "close_composition",
    "alr_transform",
    "alr_inverse",
    "select_reference",
    "align_columns",
]

DEFAULT_PSEUDOCOUNT = 0.1


@dataclass(frozen=True)
class CountTable:
    """Observed counts or intensities, one row per sample.

    Entries must be finite and nonnegative; zeros are allowed here and
    handled by :func:`apply_pseudocount` before closure.
    """

    values: np.ndarray
    sample_ids: tuple
    taxa: tuple

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValueError("counts must be a 2-D matrix")
        if v.shape != (len(self.sample_ids), len(self.taxa)):
            raise ValueError(
                f"counts shape {v.shape} does not match "
                f"{len(self.sample_ids)} samples x {len(self.taxa)} taxa"
            )
        if not np.isfinite(v).all():
            raise ValueError("counts contain non-finite entries")
        if (v < 0).any():
            raise ValueError("counts contain negative entries")
        v.setflags(write=False)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_parts(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class CompositionMatrix:
    """Strictly positive rows on the unit simplex."""

    values: np.ndarray
    sample_ids: tuple
    taxa: tuple

    def __post_init__(self):
        v = self.values
        if (v <= 0).any():
            bad = np.argwhere(v <= 0)[0]
            raise ValueError(
                f"composition entry at row {bad[0]}, column {bad[1]} is not "
                "positive; apply a pseudocount before closure"
            )
        rowsums = v.sum(axis=1)
        if np.abs(rowsums - 1.0).max() > 1e-10:
            raise ValueError("composition rows must sum to 1 within 1e-10")
        v.setflags(write=False)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_parts(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LogRatioMatrix:
    """Log-ratio coordinates with the reference column stored as zeros.

    Keeping the zero column makes the matrix n x p, so leaf indices match
    tree indices with no offset bookkeeping; downstream error-covariance
    code drops the reference coordinate via :meth:`without_ref`.
    """

    values: np.ndarray
    ref: int

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValueError("log-ratio matrix must be 2-D")
        if not (0 <= self.ref < v.shape[1]):
            raise ValueError(f"reference index {self.ref} out of range")
        if not np.isfinite(v).all():
            raise ValueError("log-ratio matrix contains non-finite entries")
        if v[:, self.ref].any():
            raise ValueError("reference column must be identically zero")
        v.setflags(write=False)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_parts(self) -> int:
        return self.values.shape[1]

    def without_ref(self) -> np.ndarray:
        """The (n, p-1) matrix with the reference column removed."""
        keep = [j for j in range(self.n_parts) if j != self.ref]
        return self.values[:, keep]


def apply_pseudocount(table: CountTable, c: float = DEFAULT_PSEUDOCOUNT) -> CountTable:
    """Replace zero entries by ``c``, leaving nonzero entries unchanged."""
    if c <= 0:
        raise ValueError(f"pseudocount must be positive, got {c}")
    v = table.values.copy()
    v[v == 0] = c
    return CountTable(values=v, sample_ids=table.sample_ids, taxa=table.taxa)


def close_composition(table: CountTable) -> CompositionMatrix:
    """Normalize each row to the unit simplex."""
    rowsums = table.values.sum(axis=1)
    if (rowsums <= 0).any():
        bad = int(np.argmin(rowsums))
        raise ValueError(
            f"row {bad} has zero sum; apply a pseudocount before closure"
        )
    v = table.values / rowsums[:, None]
    return CompositionMatrix(
        values=v, sample_ids=table.sample_ids, taxa=table.taxa
    )


def alr_transform(comp: CompositionMatrix, ref: int) -> LogRatioMatrix:
    """Additive log-ratio coordinates relative to part ``ref``.

    ``Z[i, j] = log(X[i, j] / X[i, ref])`` for ``j != ref`` and
    ``Z[:, ref] = 0``.
    """
    if not (0 <= ref < comp.n_parts):
        raise ValueError(f"reference index {ref} out of range")
    logx = np.log(comp.values)
    z = logx - logx[:, ref][:, None]
    z[:, ref] = 0.0  # exact zero, not just log(x/x) roundoff
    return LogRatioMatrix(values=z, ref=ref)


def alr_inverse(lrm: LogRatioMatrix, sample_ids=None, taxa=None) -> CompositionMatrix:
    """Map log-ratio coordinates back to the simplex (softmax per row)."""
    z = lrm.values
    shifted = z - z.max(axis=1, keepdims=True)  # overflow guard
    e = np.exp(shifted)
    x = e / e.sum(axis=1, keepdims=True)
    # extreme log-ratios underflow to exact 0; floor at the smallest
    # subnormal so strict positivity holds without changing row sums
    x[x == 0.0] = 5e-324
    n, p = x.shape
    if sample_ids is None:
        sample_ids = tuple(f"s{i}" for i in range(n))
    if taxa is None:
        taxa = tuple(f"t{j}" for j in range(p))
    return CompositionMatrix(values=x, sample_ids=tuple(sample_ids), taxa=tuple(taxa))


def select_reference(comp: CompositionMatrix) -> int:
    """Index of the part with the highest mean relative abundance.

    Ties break toward the lowest index.
    """
    means = comp.values.mean(axis=0)
    return int(np.argmax(means))


def align_columns(table: CountTable, leaf_labels) -> CountTable:
    """Reorder columns to match ``leaf_labels``; labels must agree as sets."""
    want = list(leaf_labels)
    have = list(table.taxa)
    if sorted(want) != sorted(have):
        missing = sorted(set(want) - set(have))
        extra = sorted(set(have) - set(want))
        raise ValueError(
            f"taxa do not match tree leaves (missing {missing}, extra {extra})"
        )
    order = [have.index(t) for t in want]
    return CountTable(
        values=table.values[:, order],
        sample_ids=table.sample_ids,
        taxa=tuple(want),
    )
