"""Pseudocounts, closure, and the log-ratio transform pair."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tarco.compdata import (
    CountTable,
    LogRatioMatrix,
    align_columns,
    alr_inverse,
    alr_transform,
    apply_pseudocount,
    close_composition,
    select_reference,
)


def table(values, taxa=None):
    values = np.asarray(values, dtype=float)
    n, p = values.shape
    return CountTable(
        values=values,
        sample_ids=tuple(f"s{i}" for i in range(n)),
        taxa=tuple(taxa) if taxa else tuple(f"t{j}" for j in range(p)),
    )


class TestCounts:
    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            table([[1.0, -2.0]])

    def test_nan_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            table([[1.0, np.nan]])

    def test_pseudocount_replaces_only_zeros(self):
        t = apply_pseudocount(table([[0.0, 5.0, 0.0]]), c=0.1)
        np.testing.assert_array_equal(t.values, [[0.1, 5.0, 0.1]])

    def test_pseudocount_must_be_positive(self):
        with pytest.raises(ValueError):
            apply_pseudocount(table([[1.0, 2.0]]), c=0.0)

    def test_input_not_mutated(self):
        t = table([[0.0, 5.0]])
        apply_pseudocount(t)
        np.testing.assert_array_equal(t.values, [[0.0, 5.0]])


class TestClosure:
    def test_simple_row(self):
        comp = close_composition(table([[1.0, 1.0, 2.0]]))
        np.testing.assert_allclose(comp.values, [[0.25, 0.25, 0.5]])

    def test_already_closed_unchanged(self):
        comp = close_composition(table([[0.25, 0.25, 0.5]]))
        np.testing.assert_allclose(comp.values, [[0.25, 0.25, 0.5]])

    def test_constant_row_becomes_uniform(self):
        comp = close_composition(apply_pseudocount(table([[0.0, 0.0, 0.0]])))
        np.testing.assert_allclose(comp.values, [[1 / 3, 1 / 3, 1 / 3]])

    def test_zero_row_sum_rejected(self):
        with pytest.raises(ValueError, match="pseudocount"):
            close_composition(table([[0.0, 0.0]]))

    def test_idempotent(self):
        rng = np.random.default_rng(7)
        t = table(rng.random((5, 4)) + 0.01)
        once = close_composition(t)
        twice = close_composition(
            CountTable(values=once.values.copy(), sample_ids=t.sample_ids, taxa=t.taxa)
        )
        np.testing.assert_allclose(twice.values, once.values, atol=1e-15)


class TestAlr:
    def test_hand_example(self):
        comp = close_composition(table([[0.5, 0.25, 0.25]]))
        z = alr_transform(comp, ref=2)
        np.testing.assert_allclose(z.values, [[np.log(2), 0.0, 0.0]], atol=1e-15)

    def test_uniform_row_is_zero(self):
        comp = close_composition(table([[1.0, 1.0, 1.0, 1.0]]))
        z = alr_transform(comp, ref=1)
        np.testing.assert_array_equal(z.values, np.zeros((1, 4)))

    def test_reference_column_exactly_zero(self):
        rng = np.random.default_rng(3)
        comp = close_composition(table(rng.random((20, 6)) + 0.05))
        z = alr_transform(comp, ref=4)
        assert not z.values[:, 4].any()

    def test_inverse_hand_example(self):
        z = LogRatioMatrix(values=np.array([[np.log(2), 0.0, 0.0]]), ref=2)
        comp = alr_inverse(z)
        np.testing.assert_allclose(comp.values, [[0.5, 0.25, 0.25]], atol=1e-15)

    def test_inverse_zero_row_uniform(self):
        z = LogRatioMatrix(values=np.zeros((1, 5)), ref=0)
        np.testing.assert_allclose(alr_inverse(z).values, np.full((1, 5), 0.2))

    def test_inverse_overflow_guard(self):
        z = np.zeros((1, 3))
        z[0, 1] = 800.0  # exp(800) overflows without the max shift
        comp = alr_inverse(LogRatioMatrix(values=z, ref=0))
        assert np.isfinite(comp.values).all()
        np.testing.assert_allclose(comp.values[0, 1], 1.0, atol=1e-12)

    @given(
        x=hnp.arrays(
            float,
            st.tuples(st.integers(1, 8), st.integers(2, 9)),
            elements=st.floats(0.01, 100.0),
        ),
        data=st.data(),
    )
    @settings(max_examples=80, deadline=None)
    def test_roundtrip_on_simplex(self, x, data):
        comp = close_composition(table(x))
        ref = data.draw(st.integers(0, x.shape[1] - 1))
        back = alr_inverse(alr_transform(comp, ref))
        assert np.abs(back.values - comp.values).max() < 1e-10

    def test_without_ref_drops_column(self):
        z = LogRatioMatrix(values=np.array([[1.0, 0.0, 3.0]]), ref=1)
        np.testing.assert_array_equal(z.without_ref(), [[1.0, 3.0]])


class TestReference:
    def test_argmax_of_means(self):
        comp = close_composition(table([[0.1, 0.6, 0.3], [0.1, 0.6, 0.3]]))
        assert select_reference(comp) == 1

    def test_tie_breaks_low_index(self):
        comp = close_composition(table([[0.5, 0.5]]))
        assert select_reference(comp) == 0

    def test_dominant_column(self):
        counts = table([[1.0, 8.0, 1.0], [2.0, 6.0, 2.0], [1.0, 7.0, 2.0]])
        assert select_reference(close_composition(counts)) == 1


class TestAlign:
    def test_reorders_to_leaf_order(self):
        t = table([[1.0, 2.0, 3.0]], taxa=["c", "a", "b"])
        out = align_columns(t, ["a", "b", "c"])
        assert out.taxa == ("a", "b", "c")
        np.testing.assert_array_equal(out.values, [[2.0, 3.0, 1.0]])

    def test_mismatch_reported(self):
        t = table([[1.0, 2.0]], taxa=["a", "x"])
        with pytest.raises(ValueError, match="missing \\['b'\\]"):
            align_columns(t, ["a", "b"])
