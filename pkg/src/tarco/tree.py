"""Rooted taxonomic trees and the linear algebra they induce.

A tree over ``p`` compositional parts is stored as flat arrays over its
``T`` non-root nodes.  Leaves occupy indices ``0..p-1`` in the order they
appear in the Newick source; internal nodes follow at ``p..T-1`` in
post-order.  The root itself is never indexed: it carries no coefficient
and is represented only as the parent value ``-1``.

From a tree we derive

* the 0/1 aggregation matrix ``A`` (leaves x nodes) whose column ``k``
  marks the descendant-leaf set ``L_k`` of node ``k``,
* the constraint vector ``c = A^T 1`` (equal to the leaf counts), and
* a basis ``B`` for the null space of ``c^T`` used when eliminating the
  sum-to-zero constraint.

The coefficient aggregation process maps a leaf-level coefficient vector
``beta`` to the sparsest node-level vector ``gamma`` with ``A gamma = beta``
by merging children with identical values into their parent, bottom-up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TaxTree",
    "AggregationMatrix",
    "BasisMatrix",
    "NewickError",
    "parse_newick",
    "build_aggregation",
    "aggregate_coefficients",
    "expand_coefficients",
    "build_basis",
    "write_aggregation_csv",
]

MERGE_TOL = 1e-12


class NewickError(ValueError):
    """Malformed Newick input; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class TaxTree:
    """A rooted tree over compositional parts, root excluded from indexing.

    Attributes
    ----------
    parent : ndarray of int, shape (T,)
        Parent index of each node; ``-1`` for children of the root.
    labels : tuple of str
        Node labels; leaves first (input order), then internals in
        post-order.  Unlabeled internal nodes get synthetic ``_n{index}``
        labels.
    children : tuple of tuple of int
        Child indices per node; empty tuple for leaves.
    n_leaves : int
        Number of leaves ``p``; leaves are nodes ``0..p-1``.
    """

    parent: np.ndarray
    labels: tuple
    children: tuple
    n_leaves: int
    leaf_sets: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.parent.setflags(write=False)
        sets = [None] * self.n_nodes
        for k in range(self.n_nodes):
            if not self.children[k]:
                sets[k] = frozenset([k])
            else:
                acc: set = set()
                for ch in self.children[k]:
                    acc |= sets[ch]
                sets[k] = frozenset(acc)
        object.__setattr__(self, "leaf_sets", tuple(sets))
        self._validate()

    def _validate(self):
        p, T = self.n_leaves, self.n_nodes
        if p < 1:
            raise ValueError("tree has no leaves")
        if any(len(self.children[k]) > 0 for k in range(p)):
            raise ValueError("leaf indices 0..p-1 must have no children")
        if any(len(self.children[k]) == 0 for k in range(p, T)):
            raise ValueError("internal nodes must have children")
        if len(set(self.labels)) != T:
            dupes = sorted({x for x in self.labels if self.labels.count(x) > 1})
            raise ValueError(f"duplicate node labels: {dupes}")
        top = [k for k in range(T) if self.parent[k] == -1]
        if sum(len(self.leaf_sets[k]) for k in top) != p:
            raise ValueError("root's children must partition the leaves")

    @property
    def n_nodes(self) -> int:
        """Number of non-root nodes ``T``."""
        return int(self.parent.shape[0])

    def is_leaf(self, k: int) -> bool:
        return k < self.n_leaves

    def leaf_count(self, k: int) -> int:
        """``|L_k|``: number of leaves below (or at) node ``k``."""
        return len(self.leaf_sets[k])

    def ancestors_or_self(self, k: int) -> list:
        """Indices on the path from ``k`` up to (but excluding) the root."""
        path = [k]
        while self.parent[path[-1]] != -1:
            path.append(int(self.parent[path[-1]]))
        return path

    def descendants_or_self(self, k: int) -> frozenset:
        """All node indices in the subtree rooted at ``k``, including ``k``."""
        out = {k}
        stack = list(self.children[k])
        while stack:
            m = stack.pop()
            out.add(m)
            stack.extend(self.children[m])
        return frozenset(out)

    @property
    def leaf_labels(self) -> tuple:
        return self.labels[: self.n_leaves]


@dataclass(frozen=True)
class AggregationMatrix:
    """Dense aggregation matrix ``A`` with its leaf-count weights.

    ``a[j, k] = 1`` iff node ``k`` is an ancestor-or-self of leaf ``j``.
    ``leaf_counts[k] = |L_k|`` doubles as the diagonal of the weighting
    matrix ``W`` and as the constraint vector ``c = A^T 1``.
    """

    a: np.ndarray
    leaf_counts: np.ndarray
    labels: tuple

    def __post_init__(self):
        self.a.setflags(write=False)
        self.leaf_counts.setflags(write=False)

    @property
    def n_leaves(self) -> int:
        return int(self.a.shape[0])

    @property
    def n_nodes(self) -> int:
        return int(self.a.shape[1])

    @property
    def c(self) -> np.ndarray:
        """Constraint vector ``A^T 1`` (a view of the leaf counts)."""
        return self.leaf_counts


@dataclass(frozen=True)
class BasisMatrix:
    """Basis ``b`` (T x T-1) for the null space of ``c^T``.

    Column order follows node order with the reference leaf's column
    removed; ``ref`` records the eliminated coordinate.
    """

    b: np.ndarray
    ref: int

    def __post_init__(self):
        self.b.setflags(write=False)


# ---------------------------------------------------------------------------
# Newick parsing
# ---------------------------------------------------------------------------

def _scan_label(text: str, i: int):
    """Read a (possibly quoted) label starting at ``i``; return (label, next)."""
    n = len(text)
    if i < n and text[i] == "'":
        j = i + 1
        out = []
        while True:
            if j >= n:
                raise NewickError("unterminated quoted label", i)
            ch = text[j]
            if ch == "'":
                if j + 1 < n and text[j + 1] == "'":  # '' escapes a quote
                    out.append("'")
                    j += 2
                    continue
                return "".join(out), j + 1
            out.append(ch)
            j += 1
    j = i
    while j < n and text[j] not in "(),:;":
        j += 1
    return text[i:j].strip(), j


def _skip_branch_length(text: str, i: int) -> int:
    """Skip a ``:length`` annotation if present (lengths are not used)."""
    if i < len(text) and text[i] == ":":
        j = i + 1
        while j < len(text) and text[j] not in "(),;":
            j += 1
        try:
            float(text[i + 1 : j])
        except ValueError:
            raise NewickError("invalid branch length", i + 1) from None
        return j
    return i


def parse_newick(text: str) -> TaxTree:
    """Parse a single-tree Newick string into a :class:`TaxTree`.

    Node indexing is deterministic: leaves take ``0..p-1`` in
    left-to-right source order, internal nodes take ``p..T-1`` in
    post-order.  Branch lengths are accepted and ignored.  Internal
    labels are optional; missing ones become ``_n{index}``.

    Raises
    ------
    NewickError
        On malformed parentheses, quotes, or a missing ``;`` terminator,
        with the byte offset of the fault.
    ValueError
        On duplicate leaf labels (or a label colliding with a synthetic
        internal label).
    """
    s = text.strip()
    if not s:
        raise NewickError("empty input", 0)

    # children lists keyed by preliminary id; leaves and internals are
    # renumbered once the full topology is known.
    leaf_labels: list = []
    internals: list = []  # (children: list of ('leaf'|'int', prelim_id), label)

    def parse_clade(i: int):
        """Parse one clade starting at ``i``; return (kind, id, next_i)."""
        if i >= len(s):
            raise NewickError("unexpected end of input", i)
        if s[i] == "(":
            kids = []
            j = i + 1
            while True:
                kind, ident, j = parse_clade(j)
                kids.append((kind, ident))
                if j >= len(s):
                    raise NewickError("unbalanced '('", i)
                if s[j] == ",":
                    j += 1
                    continue
                if s[j] == ")":
                    j += 1
                    break
                raise NewickError(f"unexpected character {s[j]!r}", j)
            label, j = _scan_label(s, j)
            j = _skip_branch_length(s, j)
            internals.append((kids, label))
            return "int", len(internals) - 1, j
        label, j = _scan_label(s, i)
        if not label:
            raise NewickError("empty leaf label", i)
        j = _skip_branch_length(s, j)
        leaf_labels.append(label)
        return "leaf", len(leaf_labels) - 1, j

    kind, top, i = parse_clade(0)
    if i >= len(s) or s[i] != ";":
        raise NewickError("missing ';' terminator", i)
    if s[i + 1 :].strip():
        raise NewickError("trailing content after ';'", i + 1)
    if kind == "leaf":
        raise NewickError("tree must have a parenthesized root", 0)

    p = len(leaf_labels)
    seen: dict = {}
    for j, lab in enumerate(leaf_labels):
        if lab in seen:
            raise ValueError(f"duplicate leaf label {lab!r}")
        seen[lab] = j

    # The outermost clade is the (unindexed) root; everything below it is
    # renumbered: internal prelim ids are already in post-order because a
    # clade is appended only after its children.
    n_internal = len(internals) - 1  # root excluded
    T = p + n_internal

    def node_index(kind: str, ident: int) -> int:
        return ident if kind == "leaf" else p + ident

    parent = np.full(T, -1, dtype=np.int64)
    children: list = [() for _ in range(T)]
    labels = list(leaf_labels) + [""] * n_internal
    for prelim, (kids, label) in enumerate(internals):
        if prelim == top:
            kid_idx = [node_index(k, ii) for k, ii in kids]
            for ci in kid_idx:
                parent[ci] = -1
            continue
        me = p + prelim
        labels[me] = label if label else f"_n{me + 1}"
        kid_idx = [node_index(k, ii) for k, ii in kids]
        for ci in kid_idx:
            parent[ci] = me
        children[me] = tuple(kid_idx)

    return TaxTree(
        parent=parent, labels=tuple(labels), children=tuple(children), n_leaves=p
    )


# ---------------------------------------------------------------------------
# Tree-derived matrices
# ---------------------------------------------------------------------------

def build_aggregation(tree: TaxTree) -> AggregationMatrix:
    """Build ``A`` (leaves x nodes), with leaf counts / constraint vector."""
    p, T = tree.n_leaves, tree.n_nodes
    a = np.zeros((p, T))
    for k in range(T):
        for j in tree.leaf_sets[k]:
            a[j, k] = 1.0
    counts = a.sum(axis=0)
    return AggregationMatrix(a=a, leaf_counts=counts, labels=tree.labels)


def expand_coefficients(gamma: np.ndarray, agg: AggregationMatrix) -> np.ndarray:
    """Leaf-level coefficients ``beta = A gamma``."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (agg.n_nodes,):
        raise ValueError(
            f"gamma has shape {gamma.shape}, expected ({agg.n_nodes},)"
        )
    return agg.a @ gamma


def aggregate_coefficients(
    beta: np.ndarray, tree: TaxTree, tol: float = MERGE_TOL
) -> np.ndarray:
    """Sparsest node-level representation of a leaf coefficient vector.

    Children sharing one value (within ``tol``) are merged into their
    parent, bottom-up, so the returned ``gamma`` satisfies
    ``A gamma = beta`` exactly, has the minimal number of nonzeros among
    all such vectors, and places at most one nonzero on every
    root-to-leaf path.

    The merged value assigned to a parent is taken from its first child,
    so exact inputs (simulation ground truths) propagate without
    rounding.
    """
    beta = np.asarray(beta, dtype=float)
    p, T = tree.n_leaves, tree.n_nodes
    if beta.shape != (p,):
        raise ValueError(f"beta has shape {beta.shape}, expected ({p},)")

    # uniform[k] = the single value shared by every leaf below k, or None.
    # Internal nodes follow leaves in post-order, so children precede
    # parents in a plain index sweep.
    uniform: list = [None] * T
    for k in range(T):
        if tree.is_leaf(k):
            uniform[k] = beta[k]
            continue
        vals = [uniform[ch] for ch in tree.children[k]]
        if all(v is not None for v in vals) and all(
            abs(v - vals[0]) <= tol for v in vals
        ):
            uniform[k] = vals[0]

    gamma = np.zeros(T)
    for k in range(T):
        if uniform[k] is None:
            continue
        par = tree.parent[k]
        if par == -1 or uniform[par] is None:
            gamma[k] = uniform[k]
    return gamma


def build_basis(agg: AggregationMatrix, ref: int) -> BasisMatrix:
    """Null-space basis of ``c^T`` eliminating the reference leaf.

    Column for node ``k != ref`` is ``e_k - |L_k| e_ref``, which satisfies
    ``c^T (e_k - |L_k| e_ref) = c_k - |L_k| = 0`` because the reference is
    a leaf (``c_ref = 1``).
    """
    T = agg.n_nodes
    if not (0 <= ref < agg.n_leaves):
        raise ValueError(f"reference index {ref} is not a leaf")
    cols = [k for k in range(T) if k != ref]
    b = np.zeros((T, T - 1))
    for jcol, k in enumerate(cols):
        b[k, jcol] = 1.0
        b[ref, jcol] = -agg.leaf_counts[k]
    return BasisMatrix(b=b, ref=ref)


def write_aggregation_csv(agg: AggregationMatrix, path) -> None:
    """Debug export of ``A``: rows are leaves, columns are node labels."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["leaf"] + list(agg.labels))
        for j in range(agg.n_leaves):
            w.writerow([agg.labels[j]] + [int(x) for x in agg.a[j]])
