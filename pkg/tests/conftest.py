import numpy as np
import pytest

from tarco.tree import TaxTree, build_aggregation, parse_newick

# Worked three-leaf example: leaves a,b,c; one internal node n4 grouping
# a and b.  Node order: a=0, b=1, c=2, n4=3.
FIG_TREE = "((a,b)n4,c);"

# Small catalog of trees with T <= 12 nodes for exhaustive checks.
TREE_CATALOG = {
    "fig": FIG_TREE,
    "star5": "(a,b,c,d,e);",
    "balanced4": "((a,b),(c,d));",
    "caterpillar5": "((((a,b)i1,c)i2,d)i3,e);",
    "wide7": "((a,b,c),(d,e),(f,g));",
    "deep6": "(((a,b),(c,d)),(e,f));",
}


@pytest.fixture
def fig_tree() -> TaxTree:
    return parse_newick(FIG_TREE)


@pytest.fixture
def fig_agg(fig_tree):
    return build_aggregation(fig_tree)


@pytest.fixture
def star5() -> TaxTree:
    return parse_newick(TREE_CATALOG["star5"])


@pytest.fixture
def catalog():
    return {name: parse_newick(nwk) for name, nwk in TREE_CATALOG.items()}


def rng_for_test(name: str) -> np.random.Generator:
    """Fixed-entropy generator so test data never drifts between runs."""
    import zlib

    return np.random.default_rng(np.random.SeedSequence(zlib.crc32(name.encode())))
