import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stickydisp import diagnostics as dg
from stickydisp.dist_core import ProbVec, make_bernoulli, make_modified_poisson, random_probvec
from stickydisp.errors import DomainError
from stickydisp.ode_engine import Explicit, OdeConfig, TwoPoint, integrate

seeds = st.integers(0, 2**32 - 1)
E2_MINUS_1 = 6.38905609893065022723042746057500781318  # mpmath, 40 digits
T_STAR_MU06 = 3.202334613655160794017408155192600844612  # mpmath findroot on the logistic


def vec(*head, n_max=10):
    p = np.zeros(n_max + 1)
    p[: len(head)] = head
    return p


class TestGini:
    def test_examples(self):
        assert dg.gini(vec(0, 1)) == 0.0
        assert dg.gini(make_bernoulli(0.6, 10)) == pytest.approx(0.4, abs=1e-15)
        assert dg.gini(vec(0.5, 0, 0.5)) == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("n", [1, 2, 7, 30])
    def test_point_mass(self, n):
        p = np.zeros(31)
        p[n] = 1
        assert dg.gini(p) == 0.0

    def test_zero_mean(self):
        with pytest.raises(DomainError):
            dg.gini(vec(1.0))
        with pytest.raises(DomainError):
            dg.gini_pairwise(vec(1.0))

    @given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=60))
    def test_cdf_form_matches_pairwise(self, w):
        w = np.asarray(w)
        if w[1:].sum() <= 1e-9:
            return
        p = w / w.sum()
        g = dg.gini(p)
        assert 0.0 <= g <= 1.0
        assert abs(g - dg.gini_pairwise(p)) <= 1e-12

    def test_report(self):
        r = dg.gini_report(vec(0.5, 0, 0.5), 1.0)
        assert r.value == pytest.approx(0.5)
        assert r.derivative_identity_value == 0.25
        assert r.cdf[-1] == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.diff(r.cdf) >= 0)


class TestGiniDerivative:
    def test_counterexamples(self):
        assert abs(dg.gini_derivative_identity(vec(0.5, 0, 0.5), 1.0) - 0.25) <= 1e-15
        assert abs(dg.gini_derivative_identity(vec(0.75, 0, 0.25), 0.5) - 1 / 16) <= 1e-15

    def test_equilibrium(self):
        assert dg.gini_derivative_identity(make_bernoulli(0.6, 10), 0.6) == pytest.approx(0, abs=1e-15)

    @given(seeds, st.sampled_from([0.5, 1.0, 2.0]))
    def test_matches_generator_derivative(self, seed, mu):
        # directional derivative of G along Q by a high-order difference
        from stickydisp.operators import OperatorContext, q_apply

        p = random_probvec(np.random.default_rng(seed), 30, mu).values
        if p[-1] > 0:
            p = np.append(p, [0.0, 0.0])
        q = q_apply(p, OperatorContext(mu, p.size - 1))
        h = 1e-4
        step = h / max(1.0, np.abs(q).max())
        g = lambda s: dg.gini_pairwise(p + s * q)
        fd = (-g(2 * step) + 8 * g(step) - 8 * g(-step) + g(-2 * step)) / (12 * step)
        if np.any(p + 2 * step * q < 0) or np.any(p - 2 * step * q < 0):
            return  # left the simplex; G is not smooth there
        assert fd == pytest.approx(dg.gini_derivative_identity(p, mu), abs=1e-7)

    def test_along_trajectory(self):
        cfg = OdeConfig(mu=1.0, t_end=2.0, initial=TwoPoint(10), n_max=60, dt=1e-3, sample_every=0.01)
        t, fd, ident = dg.gini_derivative_check(integrate(cfg))
        # central differences with h = 0.01 are O(h^2)
        assert np.max(np.abs(fd - ident)) <= 1e-2 ** 2 * 50


class TestObservationBounds:
    def test_equilibrium(self):
        ob = dg.observation_bounds(make_bernoulli(0.6, 10), 0.6)
        assert ob.f1 == 1.0 and ob.f1_lower == pytest.approx(1.0)
        assert ob.gini_excess == pytest.approx(0, abs=1e-15)
        assert ob.holds

    def test_random_mu06(self, rng):
        for _ in range(1000):
            assert dg.observation_bounds(random_probvec(rng, 40, 0.6), 0.6).holds

    @given(seeds)
    def test_mu1(self, seed):
        p = random_probvec(np.random.default_rng(seed), 40, 1.0).values
        ob = dg.observation_bounds(p, 1.0)
        assert ob.f1 >= 1 - p[0] - 1e-12
        assert dg.gini(p) <= 3 * p[0] + 1e-12

    def test_domain(self):
        with pytest.raises(DomainError):
            dg.observation_bounds(make_modified_poisson(2, 40), 2.0)


class TestHNorm:
    def test_examples(self):
        pbar = make_modified_poisson(3.0, 60)
        assert dg.h_norm_sq(pbar, pbar) == 0.0
        d1 = vec(0, 1, n_max=60)
        assert dg.h_norm_sq(d1, d1) == 0.0
        assert dg.h_norm_sq(d1, pbar) == pytest.approx(E2_MINUS_1, rel=1e-13)
        assert dg.h_norm_sq_poisson(d1, 3.0) == pytest.approx(E2_MINUS_1, rel=1e-13)

    def test_interior_zero(self):
        with pytest.raises(DomainError, match="interior zero"):
            dg.h_norm_sq(vec(0, 0.5, 0.5), vec(0, 0.5, 0, 0.5))
        with pytest.raises(DomainError, match="vanishes"):
            dg.h_norm_sq(vec(0, 0.5, 0.5), vec(0, 1.0))

    @given(seeds, st.sampled_from([1.5, 3.0]))
    def test_log_space_matches_direct(self, seed, mu):
        p = random_probvec(np.random.default_rng(seed), 40).values
        pbar = make_modified_poisson(mu, 40)
        direct = dg.h_norm_sq(p, np.exp(np.log(np.maximum(pbar.values, 1e-300))) * (pbar.values > 0))
        exact = dg.h_norm_sq_poisson(p, mu)
        assert exact == pytest.approx(direct, rel=1e-9)

    def test_huge_nmax_does_not_underflow(self):
        p = np.zeros(10001)
        p[0], p[100] = 0.97, 0.03
        h = dg.h_norm_sq_poisson(p, 3.0)  # pbar_100 ~ 1e-128, computed in log space
        assert math.isfinite(h) and h > 1e100


class TestDirichletPoincare:
    def test_zero_at_equilibrium(self):
        pbar = make_modified_poisson(2.0, 60)
        assert dg.dirichlet_form(pbar, 2.0) <= 1e-15
        r = dg.poincare_check(pbar, 2.0)
        assert r.lhs <= 1e-12 and r.rhs <= 1e-12 and r.holds

    def test_matches_ratio_definition(self, rng):
        from stickydisp.operators import dplus, ratio

        for _ in range(50):
            mu = 2.5
            p = random_probvec(rng, 40).values
            pbar = np.exp(np.append(-np.inf, np.log(make_modified_poisson(mu, 45).values[1:])))
            ext = np.append(p, np.zeros(5))
            w = pbar[1:]
            r = ratio(ext[1:], w)
            naive = (mu - 1) * np.sum(w[:-1] * dplus(r) ** 2)
            assert dg.dirichlet_form(p, mu) == pytest.approx(naive, rel=1e-9)

    @given(seeds)
    def test_positive_off_equilibrium(self, seed):
        p = random_probvec(np.random.default_rng(seed), 40, 2.0, p0_zero=True)
        assert dg.dirichlet_form(p, 2.0) > 0

    def test_delta1(self):
        r = dg.poincare_check(vec(0, 1, n_max=60), 3.0)
        assert r.lhs == pytest.approx(E2_MINUS_1, rel=1e-12)
        assert r.holds

    @pytest.mark.parametrize("mu", [1.5, 2.0, 3.0, 5.0])
    def test_random(self, rng, mu):
        for _ in range(1000):
            assert dg.poincare_check(random_probvec(rng, 60), mu).holds

    def test_domain(self):
        with pytest.raises(DomainError):
            dg.dirichlet_form(vec(0, 1), 1.0)

    def test_potential(self):
        v = dg.potential_V(4, 3.0)
        assert v.tolist() == [0.0, -1.0, -1.5, -1.5, -1.0]


class TestThresholds:
    def test_closed_form_inversions(self):
        assert dg.p0_hitting_time(1.0, 1.0, 1 / 6) == pytest.approx(5.0, abs=1e-14)
        assert dg.p0_hitting_time(1.0, 1 / 7, 1 / 6) == 0.0
        assert dg.p0_hitting_time(0.6, 1.0, 0.48) == pytest.approx(T_STAR_MU06, abs=1e-13)
        assert dg.p0_hitting_time(0.6, 1.0, 0.4) is None

    def test_levels(self):
        assert dg.threshold_levels(1.0) == (1 / 6, None, None)
        _, lvl, delta = dg.threshold_levels(0.6, 0.2)
        assert delta == pytest.approx(0.08) and lvl == pytest.approx(0.48)
        with pytest.raises(DomainError):
            dg.threshold_levels(0.6, 0.3)  # 0.09 + 0.6 > 1/2

    def test_trajectory_methods_agree(self):
        p = np.zeros(61)
        p[0], p[6] = 5 / 6 + 1e-12, 1 / 36
        p[0] = 1 - 1 / 6.0
        p[6] = 1 / 6.0
        cfg = OdeConfig(mu=1.0, t_end=10.0, initial=Explicit(ProbVec(p)), n_max=60, dt=1e-3,
                        sample_every=0.1)
        tr = integrate(cfg)
        a = dg.threshold_times(tr, method="interpolate").t_star
        b = dg.threshold_times(tr, method="closed_form").t_star
        assert b == pytest.approx(6 - 1.2, abs=1e-12)
        assert abs(a - b) <= 0.1

    def test_not_reached(self):
        cfg = OdeConfig(mu=1.0, t_end=1.0, initial=TwoPoint(100), n_max=120, dt=1e-3, sample_every=0.1)
        tr = integrate(cfg)
        assert dg.threshold_times(tr).t_star is None
        assert dg.threshold_times(tr, method="closed_form").t_star is None

    def test_bad_method(self):
        cfg = OdeConfig(mu=1.0, t_end=0.1, initial=TwoPoint(10), n_max=20, dt=1e-2)
        with pytest.raises(ValueError):
            dg.threshold_times(integrate(cfg), method="newton")


class TestConstants:
    def test_examples(self):
        c = dg.theorem_constants(0.6)
        assert c.C_mu == pytest.approx(0.1) and c.delta == pytest.approx(0.08)
        assert dg.theorem_constants(3.0, p0_init=1.0).K_mu == pytest.approx(1 + 2 * math.e ** 2)
        assert 0.2 ** 2 + 2 * 0.2 <= 0.5

    def test_gamma(self):
        g = dg.theorem_constants(0.6, p0_init=0.994).gamma_mu
        assert g == pytest.approx(0.0796780684104627766599597585513078470825, rel=1e-14)

    def test_domains(self):
        with pytest.raises(DomainError):
            dg.theorem_constants(1.0)
        with pytest.raises(DomainError):
            dg.theorem_constants(2.0)
        with pytest.raises(DomainError):
            dg.theorem_constants(0.5, K=1.0)


class TestFitDecay:
    def test_power(self):
        t = np.linspace(10, 100, 50)
        f = dg.fit_decay(t, 7 / t, "power", (10, 100))
        assert abs(f.slope + 1) <= 1e-10 and f.r_squared == pytest.approx(1.0)
        assert f.intercept == pytest.approx(math.log(7))

    def test_exponential(self):
        t = np.linspace(0, 30, 100)
        f = dg.fit_decay(t, 3 * np.exp(-0.4 * t), "exponential")
        assert abs(f.slope + 0.4) <= 1e-10
        assert f.window[0] >= 12.0 - 1e-9

    def test_nonpositive_listed(self):
        t = np.linspace(1, 20, 20)
        y = np.exp(-t)
        y[5] = 0.0
        with pytest.raises(DomainError, match="t=6"):
            dg.fit_decay(t, y, "exponential", (1, 20))

    def test_too_few_points(self):
        t = np.linspace(1, 2, 5)
        with pytest.raises(DomainError, match="need 10"):
            dg.fit_decay(t, 1 / t, "power", (1, 2))

    def test_default_window_skips_roundoff(self):
        t = np.linspace(0, 40, 401)
        y = np.exp(-t)  # below 100 eps after t ~ 31.4; window starts at 16
        f = dg.fit_decay(t, y, "exponential")
        assert f.window[0] == 16.0 and 31 < f.window[1] < 32 and abs(f.slope + 1) < 1e-8

    @given(st.floats(0.1, 3.0), st.floats(0.1, 10.0))
    def test_recovers_rates(self, rate, amp):
        t = np.linspace(0, 10, 200)
        f = dg.fit_decay(t, amp * np.exp(-rate * t), "exponential")
        assert f.slope == pytest.approx(-rate, abs=1e-9)
        assert 0 <= f.r_squared <= 1


class TestBakryEmery:
    def test_equilibrium(self):
        pbar = make_modified_poisson(3.0, 60)
        cfg = OdeConfig(mu=3.0, t_end=1.0, initial=Explicit(pbar), n_max=60, dt=1e-2, sample_every=0.1)
        rep = dg.bakry_emery_report(integrate(cfg))
        assert np.max(rep.h2) <= 1e-20 and rep.holds

    def test_requires_p0_zero(self):
        cfg = OdeConfig(mu=3.0, t_end=1.0, initial=TwoPoint(10), n_max=60, dt=1e-2, sample_every=0.1)
        with pytest.raises(DomainError):
            dg.bakry_emery_report(integrate(cfg))

    @pytest.mark.parametrize("method", ["finite-difference", "generator"])
    def test_decay(self, method):
        p = np.zeros(61)
        p[1], p[6] = 0.6, 0.4
        cfg = OdeConfig(mu=3.0, t_end=4.0, initial=Explicit(ProbVec(p)), n_max=60, dt=1e-3,
                        sample_every=0.05)
        rep = dg.bakry_emery_report(integrate(cfg), method=method)
        assert rep.holds
        assert np.all(rep.h2 <= rep.h2[0] * np.exp(-2 * rep.t) * (1 + 1e-6))

    def test_generator_derivative_matches_fd(self):
        # the finite-difference derivative converges to the generator one at O(h^2)
        p = np.zeros(61)
        p[1], p[4] = 0.5, 0.5
        gaps = []
        for h in (0.02, 0.01):
            cfg = OdeConfig(mu=2.5, t_end=1.0, initial=Explicit(ProbVec(p)), n_max=60, dt=1e-3,
                            sample_every=h)
            tr = integrate(cfg)
            a = dg.bakry_emery_report(tr, "finite-difference")
            b = dg.bakry_emery_report(tr, "generator")
            gaps.append(np.max(np.abs(a.dh2[1:-1] - b.dh2[1:-1])))
        assert gaps[1] <= 0.01 * 21.3
        assert 3.0 <= gaps[0] / gaps[1] <= 5.0


class TestLinearEnvelope:
    @pytest.mark.parametrize("mu", [1.8, 3.0, 4.0])
    def test_qhat_flow_below_envelope(self, mu):
        cfg = OdeConfig(mu=mu, t_end=8.0, initial=TwoPoint(8), n_max=80, dt=1e-3, sample_every=0.1,
                        generator="linear")
        tr = integrate(cfg)
        h = np.array([dg.h_norm_sq_poisson(s, mu) for s in tr.states])
        chi0 = dg.chi_sq_poisson(tr.states[0], mu)
        env = dg.qhat_hnorm_envelope(tr.times, mu, chi0, tr.p0[0])
        assert np.all(h <= env * (1 + 1e-6) + 1e-12)


class TestTimeSeries:
    def test_fields(self, sticky_runs):
        tr, _, _ = sticky_runs[3.0]
        recs = dg.time_series(tr)
        assert len(recs) == len(tr)
        assert recs[0].as_row()[0] == 0.0
        assert dg.series_column(recs, "hnorm_sq")[-1] < 1e-10
        assert dg.series_column(recs, "mean")[-1] == pytest.approx(3.0, abs=1e-9)
        with pytest.raises(KeyError):
            dg.series_column(recs, "nope")

    def test_hnorm_nan_below_one(self, sticky_runs):
        tr, _, _ = sticky_runs[0.6]
        recs = dg.time_series(tr)
        assert all(math.isnan(r.hnorm_sq) for r in recs[:3])
        assert recs[-1].l2 < 1e-6

    def test_gini_envelopes_mu06(self, sticky_runs):
        tr, _, _ = sticky_runs[0.6]
        g = np.array([dg.gini(s) for s in tr.states]) - 0.4
        assert np.all(g >= -1e-12)
