import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stickydisp import operators as op
from stickydisp.dist_core import (
    make_bernoulli, make_classical_equilibrium, make_modified_poisson, random_probvec,
)
from stickydisp.errors import DimensionError, DomainError

seeds = st.integers(0, 2**32 - 1)


def ctx(mu, n_max=60):
    return op.OperatorContext(mu, n_max)


def half_half(n_max=10):
    p = np.zeros(n_max + 1)
    p[0] = p[2] = 0.5
    return p


def q_reference(p, mu):
    """Term-by-term transcription of the sticky generator with p_{N+1} = 0."""
    nu = mu - 1 + p[0]
    N = len(p) - 1
    out = [-nu * p[0]]
    for n in range(1, N + 1):
        nxt = p[n + 1] if n < N else 0.0
        out.append(n * nxt + nu * p[n - 1] - (n - 1) * p[n] - nu * p[n])
    return np.array(out)


class TestContext:
    @pytest.mark.parametrize("mu,n", [(0, 10), (-1, 10), (1, 1), (1, 2.5)])
    def test_invalid(self, mu, n):
        with pytest.raises(DomainError):
            op.OperatorContext(mu, n)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            op.q_apply(np.ones(5) / 5, ctx(2.0, 10))
        with pytest.raises(DimensionError):
            op.l_apply(np.ones((2, 2)))


class TestQ:
    def test_hand_example(self):
        q = op.q_apply(half_half(), ctx(1.0, 10))
        assert q[:5].tolist() == [-0.25, 0.75, -0.75, 0.25, 0.0]
        n = np.arange(11)
        assert q.sum() == 0 and n @ q == 0

    def test_matches_transcription(self, rng):
        for mu in (0.6, 1.0, 2.5):
            for _ in range(50):
                p = random_probvec(rng, 40, mu).values
                assert np.max(np.abs(op.q_apply(p, ctx(mu, 40)) - q_reference(p, mu))) <= 1e-14

    @pytest.mark.parametrize("mu", [0.3, 0.6, 1.0])
    def test_bernoulli_fixed_point(self, mu):
        assert np.max(np.abs(op.q_apply(make_bernoulli(mu, 60), ctx(mu)))) <= 1e-15

    @pytest.mark.parametrize("mu", [1.5, 2.0, 3.0, 5.0])
    def test_modified_poisson_fixed_point(self, mu):
        assert np.max(np.abs(op.q_apply(make_modified_poisson(mu, 60), ctx(mu)))) <= 1e-12

    def test_mean_mismatch_warns(self):
        with pytest.warns(RuntimeWarning, match="differs from mu"):
            op.q_apply(half_half(), ctx(2.0, 10))

    @given(seeds, st.sampled_from([0.4, 1.0, 2.5, 4.0]))
    def test_conservation_with_flux(self, seed, mu):
        p = random_probvec(np.random.default_rng(seed), 50, mu).values
        q, flux = op.q_apply(p, ctx(mu, 50), return_flux=True)
        assert flux == pytest.approx((mu - 1 + p[0]) * p[-1])
        assert abs(q.sum() + flux) <= 1e-13
        assert abs(np.arange(51) @ q + 51 * flux) <= 1e-12

    def test_conservation_compact_support(self, rng):
        for mu in (0.5, 1.0, 3.0):
            for _ in range(100):
                p = np.append(random_probvec(rng, 30, mu).values, np.zeros(5))
                q, flux = op.q_apply(p, ctx(mu, 35), return_flux=True)
                assert flux == 0.0
                assert abs(q.sum()) <= 1e-13
                assert abs(np.arange(36) @ q) <= 1e-13

    @given(seeds, st.sampled_from([0.3, 0.6, 1.0, 2.5, 5.0]))
    def test_general_form_agrees_on_S_mu(self, seed, mu):
        p = random_probvec(np.random.default_rng(seed), 60, mu).values
        assert np.max(np.abs(op.q_apply(p, ctx(mu)) - op.q_apply_general(p))) <= 1e-12

    def test_general_form_examples(self):
        assert np.all(op.q_apply_general(make_bernoulli(0.6, 10)) == 0)
        delta1 = np.zeros(10)
        delta1[1] = 1
        assert np.all(op.q_apply_general(delta1) == 0)


class TestMomentNu:
    def test_examples(self):
        d = np.zeros(5)
        d[1] = 1
        assert op.moment_nu(d) == 0
        assert op.moment_nu(make_modified_poisson(3.0, 60)) == pytest.approx(2.0, abs=1e-10)
        assert op.moment_nu(make_bernoulli(0.6, 10)) == 0

    @given(seeds, st.sampled_from([0.5, 1.0, 3.0]))
    def test_equals_mean_minus_one_plus_p0(self, seed, mu):
        p = random_probvec(np.random.default_rng(seed), 40, mu).values
        assert op.moment_nu(p) == pytest.approx(mu - 1 + p[0], abs=1e-13)


class TestQhat:
    def test_kernel(self):
        pbar = make_modified_poisson(3.0, 60)
        assert np.max(np.abs(op.qhat_apply(pbar, ctx(3.0)))) <= 1e-12

    def test_domain(self):
        with pytest.raises(DomainError):
            op.qhat_apply(make_bernoulli(1.0, 10), ctx(1.0, 10))

    @given(seeds, seeds, st.floats(0, 1))
    def test_linear(self, s1, s2, a):
        p = random_probvec(np.random.default_rng(s1), 40).values
        q = random_probvec(np.random.default_rng(s2), 40).values
        c = ctx(2.5, 40)
        lhs = op.qhat_apply(a * p + (1 - a) * q, c)
        rhs = a * op.qhat_apply(p, c) + (1 - a) * op.qhat_apply(q, c)
        assert np.max(np.abs(lhs - rhs)) <= 1e-12

    @given(seeds)
    def test_mass_preserved_up_to_flux(self, seed):
        p = random_probvec(np.random.default_rng(seed), 40).values
        q, flux = op.qhat_apply(p, ctx(2.5, 40), return_flux=True)
        assert abs(q.sum() + flux) <= 1e-13

    @given(seeds, st.sampled_from([1.5, 2.0, 3.0, 5.0]))
    def test_decomposition(self, seed, mu):
        p = random_probvec(np.random.default_rng(seed), 60, mu).values
        c = ctx(mu)
        lhs = op.q_apply(p, c)
        rhs = op.qhat_apply(p, c) - p[0] * op.dminus_apply(p)
        assert np.max(np.abs(lhs - rhs)) <= 1e-14

    @given(seeds, st.sampled_from([1.5, 2.0, 2.5, 3.0, 5.0]))
    def test_fokker_planck_form(self, seed, mu):
        p = random_probvec(np.random.default_rng(seed), 60).values
        c = ctx(mu)
        fp = op.qhat_fokker_planck(p, c)
        assert fp[0] == pytest.approx(-(mu - 1) * p[0], abs=1e-15)
        assert np.max(np.abs(fp - op.qhat_apply(p, c))) <= 1e-12

    def test_fokker_planck_kernel(self):
        pbar = make_modified_poisson(2.0, 60)
        assert np.max(np.abs(op.qhat_fokker_planck(pbar, ctx(2.0)))) <= 1e-12

    def test_fokker_planck_underflow(self):
        p = np.zeros(2001)
        p[1] = 1
        with pytest.raises(DomainError, match="underflow"):
            op.qhat_fokker_planck(p, ctx(1.5, 2000))


class TestShiftAndDifferences:
    def test_shift(self):
        d1 = np.array([0, 1.0, 0, 0])
        assert op.shift_R(d1).tolist() == [0, 0, 1, 0]
        assert op.dminus_apply(d1).tolist() == [0, 1, -1, 0]

    @given(seeds)
    def test_dminus_sum_is_boundary(self, seed):
        p = random_probvec(np.random.default_rng(seed), 20).values
        out, flux = op.dminus_apply(p, return_flux=True)
        assert flux == p[-1]
        assert out.sum() == pytest.approx(p[-1], abs=1e-15)
        _, f2 = op.shift_R(p, return_flux=True)
        assert f2 == p[-1]

    def test_calculus(self):
        assert np.all(op.dplus(np.full(6, 3.0)) == 0)
        n = np.arange(10.0)
        lap = op.laplace(n ** 2)
        assert np.all(lap[1:] == 2)
        assert op.dminus_seq([4.0, 5.0])[0] == 4.0
        assert len(op.dplus(n)) == 9 and len(op.laplace(n)) == 9

    def test_ratio(self):
        assert op.ratio(0, 0) == 1
        assert op.ratio(3, 0) == np.inf and op.ratio(-3, 0) == -np.inf
        assert op.ratio([1, 0, 2], [2, 0, 4]).tolist() == [0.5, 1.0, 0.5]


class TestNonlinearFokkerPlanck:
    @given(seeds)
    def test_p0_zero_both_prefactors(self, seed):
        p = random_probvec(np.random.default_rng(seed), 60, 3.0, p0_zero=True).values
        c = ctx(3.0)
        ref = op.q_apply(p, c)
        for pref in op.FK_PREFACTORS:
            assert np.max(np.abs(op.fk_nonlinear_form(p, c, pref) - ref)) <= 1e-12

    def test_self_consistent_quasi_stationary_is_zero(self):
        # p = q forces p_0 = 0, where q is the modified Poisson law
        c = ctx(3.0)
        pbar = make_modified_poisson(3.0, 60).values
        assert np.max(np.abs(op.quasi_stationary(pbar, c) - pbar)) <= 1e-15
        assert np.max(np.abs(op.fk_nonlinear_form(pbar, c))) <= 1e-12

    def test_constant_ratio_leaves_only_the_p0_flux(self):
        c = ctx(3.0)
        p = np.zeros(61)
        p[0] = 0.2
        q = op.quasi_stationary(p, c)
        p[1:] = 0.8 * q[1:] / q[1:].sum()
        out = op.fk_nonlinear_form(p, c, "effective")
        nu = 2.0 + 0.2
        assert out[0] == pytest.approx(-nu * 0.2) and out[1] == pytest.approx(nu * 0.2)
        assert np.max(np.abs(out[2:])) <= 1e-12

    @given(seeds)
    def test_effective_prefactor_matches_q(self, seed):
        p = random_probvec(np.random.default_rng(seed), 60, 2.0).values
        res = op.fk_nonlinear_residuals(p, ctx(2.0))
        assert res["effective"] <= 1e-12

    def test_printed_prefactor_residual_reported(self, rng):
        p = random_probvec(rng, 60, 2.0).values
        while p[0] < 0.05:
            p = random_probvec(rng, 60, 2.0).values
        res = op.fk_nonlinear_residuals(p, ctx(2.0))
        assert res["printed"] > 1e-6 > res["effective"]

    def test_bad_prefactor(self):
        with pytest.raises(ValueError):
            op.fk_nonlinear_form(make_modified_poisson(2.0, 60), ctx(2.0), "other")


class TestL:
    def test_hand_example(self):
        out = op.l_apply(half_half())
        assert out[:5].tolist() == [-0.5, 1.5, -1.5, 0.5, 0.0]
        assert out.sum() == 0 and np.arange(11) @ out == 0

    def test_fixed_points(self):
        assert np.all(op.l_apply(make_bernoulli(0.6, 10)) == 0)
        d1 = np.zeros(10)
        d1[1] = 1
        assert np.all(op.l_apply(d1) == 0)
        for mu in (2.0, 3.0):
            assert np.max(np.abs(op.l_apply(make_classical_equilibrium(mu, 60)))) <= 1e-10

    @given(seeds, st.sampled_from([0.5, 1.0, 3.0]))
    def test_conservation(self, seed, mu):
        p = np.append(random_probvec(np.random.default_rng(seed), 30, mu).values, np.zeros(3))
        out, flux = op.l_apply(p, return_flux=True)
        assert flux == 0
        assert abs(out.sum()) <= 1e-13
        assert abs(np.arange(34) @ out) <= 1e-12

    def test_flux(self, rng):
        p = random_probvec(rng, 20, 3.0).values
        out, flux = op.l_apply(p, return_flux=True)
        assert abs(out.sum() + flux) <= 1e-13
        assert flux == pytest.approx(float(np.arange(21)[2:] @ p[2:]) * p[-1])
