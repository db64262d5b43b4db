"""Grids, binomial designs, Bernstein evaluation, basis reduction and sketches."""

from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oocloss.design import (
    BasisSpec,
    PGrid,
    SketchedDesign,
    basis_design,
    basis_matrix,
    bernstein_eval,
    binomial_design,
    corruption_level,
    make_pgrid,
    sketch_design,
    sketch_error_bound,
)
from oocloss.errors import InvalidConfig, InvalidK, InvalidP0, OutOfRange, RankDeficientSketch


def _exact_pmf(n, p, j):
    p = Fraction(p)
    return float(comb(n, j) * p**j * (1 - p) ** (n - j))


class TestGrid:
    def test_two_levels(self):
        np.testing.assert_array_equal(make_pgrid(0.0, 2).levels, [0.0, 1.0])

    def test_ten_levels(self):
        g = make_pgrid(0.1, 10)
        assert g.m == 10 and g.levels[0] == 0.1 and g.levels[-1] == 1.0
        np.testing.assert_allclose(np.diff(g.levels), 0.1, atol=1e-15)

    def test_three_levels(self):
        np.testing.assert_array_equal(make_pgrid(0.5, 3).levels, [0.5, 0.75, 1.0])

    @pytest.mark.parametrize("p0", [-0.1, 1.0, 1.5])
    def test_invalid_p0(self, p0):
        with pytest.raises(InvalidP0):
            make_pgrid(p0, 5)

    def test_invalid_m(self):
        with pytest.raises(InvalidConfig):
            make_pgrid(0.1, 1)

    def test_nonincreasing_rejected(self):
        with pytest.raises(InvalidConfig):
            PGrid(0.0, [0.0, 0.5, 0.5, 1.0])


class TestCorruptionLevel:
    def test_examples(self):
        assert corruption_level(0.3, 0.3) == 0.0
        assert corruption_level(1.0, 0.3) == 1.0
        assert corruption_level(0.55, 0.1) == pytest.approx(0.5, abs=1e-15)

    def test_out_of_range(self):
        with pytest.raises(OutOfRange):
            corruption_level(0.05, 0.1)
        with pytest.raises(OutOfRange):
            corruption_level(1.0, 1.0)


class TestBinomialDesign:
    def test_fair_coin(self):
        A = binomial_design(2, PGrid(0.0, [0.0, 0.5, 1.0])).matrix
        np.testing.assert_allclose(A[1], [0.25, 0.5, 0.25], atol=1e-15)

    def test_endpoint_rows_exact(self):
        A = binomial_design(3, make_pgrid(0.0, 4)).matrix
        np.testing.assert_array_equal(A[0], [1, 0, 0, 0])
        np.testing.assert_array_equal(A[-1], [0, 0, 0, 1])

    def test_exact_rational_oracle(self):
        A = binomial_design(20, PGrid(0.0, [0.0, 0.3, 1.0])).matrix
        for j in range(21):
            ref = _exact_pmf(20, 0.3, j)
            assert A[1, j] == pytest.approx(ref, rel=1e-12)

    @pytest.mark.parametrize("n", [1, 10, 1000, 100000])
    def test_partition_of_unity(self, n):
        A = binomial_design(n, make_pgrid(0.05, 8)).matrix
        assert np.all(np.isfinite(A)) and A.min() >= 0 and A.max() <= 1
        np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-12)

    def test_read_only(self):
        A = binomial_design(3, make_pgrid(0.0, 3)).matrix
        with pytest.raises(ValueError):
            A[0, 0] = 2.0


class TestBernstein:
    def test_constant(self):
        for p in (0.0, 0.3, 1.0):
            assert bernstein_eval(np.full(7, 2.5), p) == pytest.approx(2.5, abs=1e-14)

    def test_endpoint(self):
        assert bernstein_eval([0, 0, 0, 1], 1.0) == 1.0

    def test_against_design_row(self):
        rng = np.random.default_rng(0)
        c = rng.normal(size=11)
        A = binomial_design(10, PGrid(0.0, [0.0, 0.37, 1.0])).matrix
        assert bernstein_eval(c, 0.37) == pytest.approx(A[1] @ c, abs=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 200), st.integers(0, 2**32 - 1))
    def test_consistency_property(self, n, seed):
        rng = np.random.default_rng(seed)
        c = rng.normal(size=n + 1)
        D = binomial_design(n, make_pgrid(0.1, 9))
        np.testing.assert_allclose(bernstein_eval(c, D.grid.levels), D.matrix @ c, atol=1e-10)


class TestBasis:
    def test_monomial_example(self):
        psi = basis_matrix(BasisSpec("monomial", 1), 2).psi
        np.testing.assert_array_equal(psi, [[1, 0], [1, 0.5], [1, 1]])

    @pytest.mark.parametrize("kind", ["monomial", "chebyshev"])
    def test_first_column_ones(self, kind):
        np.testing.assert_array_equal(basis_matrix(BasisSpec(kind, 5), 9).psi[:, 0], 1.0)

    def test_chebyshev_endpoints(self):
        psi = basis_matrix(BasisSpec("chebyshev", 3), 4).psi
        # T_j(-1) = (-1)^j and T_j(1) = 1
        np.testing.assert_allclose(psi[0], [1, -1, 1, -1])
        np.testing.assert_allclose(psi[-1], [1, 1, 1, 1])

    def test_chebyshev_better_conditioned(self):
        grid = make_pgrid(0.1, 32)
        A = binomial_design(100, grid).matrix
        conds = {k: np.linalg.cond(A @ basis_matrix(BasisSpec(k, 7), 100).psi)
                 for k in ("monomial", "chebyshev")}
        assert np.isfinite(conds["chebyshev"])
        assert conds["chebyshev"] < conds["monomial"]

    @pytest.mark.parametrize("kind", ["monomial", "chebyshev"])
    @pytest.mark.parametrize("n", [1, 3, 10, 57, 400])
    def test_moment_design_matches_explicit_product(self, kind, n):
        spec = BasisSpec(kind, 4)
        grid = make_pgrid(0.2, 10)
        ref = binomial_design(n, grid).matrix @ basis_matrix(spec, n).psi
        np.testing.assert_allclose(basis_design(spec, grid, n), ref, atol=1e-10)

    @pytest.mark.parametrize("n", [100, 1000, 10000])
    def test_condition_stays_bounded(self, n):
        s = 7
        grid = make_pgrid(0.1, 4 * (s + 1))
        assert np.linalg.cond(basis_design(BasisSpec("chebyshev", s), grid, n)) < 1e8

    def test_invalid_degree(self):
        with pytest.raises(InvalidConfig):
            BasisSpec("chebyshev", 0)


class TestSketch:
    def test_k_equals_n(self):
        D = binomial_design(6, make_pgrid(0.1, 9))
        sk = sketch_design(D, 6)
        np.testing.assert_array_equal(sk.S, D.matrix)
        np.testing.assert_array_equal(sk.partition, np.arange(7))
        assert sk.epsilon == 0.0

    def test_contiguous_groups(self):
        sk = sketch_design(binomial_design(4, make_pgrid(0.1, 6)), 2)
        np.testing.assert_array_equal(sk.partition, [0, 1, 1, 2, 2])

    def test_uneven_groups_larger_first(self):
        sk = sketch_design(binomial_design(7, make_pgrid(0.1, 6)), 3)
        np.testing.assert_array_equal(sk.group_sizes, [1, 3, 2, 2])

    def test_first_column_preserved(self):
        D = binomial_design(30, make_pgrid(0.1, 8))
        sk = sketch_design(D, 5)
        np.testing.assert_array_equal(sk.S[:, 0], D.matrix[:, 0])
        assert sk.partition[0] == 0 and np.count_nonzero(sk.partition == 0) == 1

    def test_epsilon_brute_force(self):
        D = binomial_design(50, make_pgrid(0.1, 8))
        sk = sketch_design(D, 7)
        A = D.matrix
        eps = max(np.sqrt(((A[:, i] - sk.S[:, sk.partition[i]]) ** 2).sum()) for i in range(51))
        assert sk.epsilon == pytest.approx(eps, rel=1e-14)
        # each representative is the medoid of its run
        for g in range(1, 8):
            cols = np.flatnonzero(sk.partition == g)
            cost = [sum(np.linalg.norm(A[:, c] - A[:, o]) for o in cols) for c in cols]
            assert sk.medoids[g] == cols[int(np.argmin(cost))]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 80), st.integers(0, 2**32 - 1), st.data())
    def test_feasibility(self, n, seed, data):
        k = data.draw(st.integers(1, n))
        D = binomial_design(n, make_pgrid(0.1, 8))
        sk = sketch_design(D, k)
        e = np.random.default_rng(seed).normal(size=n + 1)
        grouped = np.bincount(sk.partition, weights=e, minlength=k + 1)
        gap = np.linalg.norm(sk.S @ grouped - D.matrix @ e)
        assert gap <= sk.epsilon * np.abs(e).sum() + 1e-12

    def test_invalid_k(self):
        D = binomial_design(4, make_pgrid(0.1, 6))
        with pytest.raises(InvalidK):
            sketch_design(D, 0)
        with pytest.raises(InvalidK):
            sketch_design(D, 5)


class TestSketchBound:
    def test_zero_epsilon(self):
        sk = sketch_design(binomial_design(5, make_pgrid(0.1, 8)), 5)
        assert sketch_error_bound(sk, 3.0, 5) == 0.0

    def test_zero_e0(self):
        sk = sketch_design(binomial_design(20, make_pgrid(0.1, 8)), 4)
        assert sketch_error_bound(sk, 0.0, 20) == 0.0

    def test_square_hand_computation(self):
        # square S with inverse [[0.5, 0, 0], [0, 1, 0], [-0.125, 0, 0.25]]
        S = np.array([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 4.0]])
        sk = SketchedDesign(S, np.array([0, 1, 1, 2, 2]), np.array([0, 1, 3]), 0.2, 2)
        # s' = [0.5, 0, 0], so the bound is 0.2 * 4 * 0.5 * 1.5
        assert sketch_error_bound(sk, 1.5, 4) == pytest.approx(0.6, rel=1e-14)

    def test_rank_deficient(self):
        # without interior grid levels near 1 the last row of S vanishes
        sk = sketch_design(binomial_design(6, make_pgrid(0.2, 3)), 2)
        with pytest.raises(RankDeficientSketch):
            sketch_error_bound(sk, 1.0, 6)

    def test_bound_holds_for_exact_solve(self):
        # a curve whose b is exactly representable by A, solved on the sketch
        n = 40
        D = binomial_design(n, make_pgrid(0.1, 12))
        sk = sketch_design(D, 6)
        e = 2.0 * np.exp(-np.arange(n + 1) / 10)
        b = D.matrix @ e
        v = np.linalg.lstsq(sk.S, b, rcond=None)[0]
        assert abs(v[0] - e[0]) <= sketch_error_bound(sk, e[0], n) + 1e-12
