"""Functionals, inequality checks and decay fits along mean-field trajectories.

Everything here is a pure function of probability vectors or of a
:class:`~stickydisp.ode_engine.Trajectory`.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import linregress, poisson

from .dist_core import EquilibriumSpec, make_bernoulli, modified_poisson_logpmf, p0_closed_form
from .errors import DomainError
from .ode_engine import Generator, Trajectory
from .operators import OperatorContext, q_apply

EPS = np.finfo(float).eps
DEFAULT_K = 0.2
INEQ_TOL = 1e-12
HNORM_FLOOR = 1e-28  # squared H-norms below this are roundoff (eps^2 ~ 5e-32)


def _arr(p):
    return np.asarray(p, dtype=float)


# -- Gini index ---------------------------------------------------------------

def cdf(p) -> np.ndarray:
    """``F_n = sum_{i <= n} p_i``."""
    return np.cumsum(_arr(p))


def gini(p) -> float:
    """Gini index ``(1/2mu) sum_ij |i-j| p_i p_j`` in O(n_max).

    Uses ``G = (1/mu) sum_i i p_i (F_{i-1} + F_i) - 1`` with ``mu`` the mean of
    ``p``. Round-off below zero is clipped.
    """
    p = _arr(p)
    n = np.arange(p.size, dtype=float)
    mu = float(n @ p)
    if not mu > 0:
        raise DomainError("the Gini index needs a distribution with positive mean")
    f = np.cumsum(p)
    f_prev = np.concatenate(([0.0], f[:-1]))
    g = float((n * p) @ (f_prev + f)) / mu - 1.0
    return min(max(g, 0.0), 1.0)


def gini_pairwise(p) -> float:
    """O(n_max^2) double-sum Gini index; reference for :func:`gini`."""
    p = _arr(p)
    n = np.arange(p.size, dtype=float)
    mu = float(n @ p)
    if not mu > 0:
        raise DomainError("the Gini index needs a distribution with positive mean")
    return float(p @ np.abs(n[:, None] - n[None, :]) @ p) / (2.0 * mu)


def gini_derivative_identity(p, mu) -> float:
    """``dG/dt`` along the sticky flow, expressed through the CDF.

    ``(2/mu) [mu - 1 + F_0 - sum_i (F_{i+1} - F_i) F_i (F_0 + i + mu - 1)]``
    """
    p = _arr(p)
    f = np.cumsum(p)
    i = np.arange(p.size - 1, dtype=float)
    s = float(np.sum(p[1:] * f[:-1] * (f[0] + i + mu - 1.0)))
    return 2.0 / mu * (mu - 1.0 + f[0] - s)


@dataclass
class GiniReport:
    value: float
    derivative_identity_value: float
    cdf: np.ndarray


def gini_report(p, mu) -> GiniReport:
    return GiniReport(gini(p), gini_derivative_identity(p, mu), cdf(p))


@dataclass
class ObservationBounds:
    """Two inequalities that hold on ``S_mu`` for ``mu <= 1``.

    ``f1 >= f1_lower`` and ``0 <= gini_excess <= excess_upper``.
    """

    f1: float
    f1_lower: float
    gini_excess: float
    excess_upper: float
    f1_holds: bool
    excess_holds: bool

    @property
    def holds(self):
        return self.f1_holds and self.excess_holds


def observation_bounds(p, mu, tol=INEQ_TOL) -> ObservationBounds:
    """Evaluate ``F_1 >= 2 - mu - p_0`` and ``0 <= G - (1-mu) <= 3(mu - 1 + F_0)``."""
    if not 0 < mu <= 1:
        raise DomainError(f"observation bounds need 0 < mu <= 1, got {mu}")
    p = _arr(p)
    f = np.cumsum(p)
    f1, lower = float(f[1]), 2.0 - mu - p[0]
    excess, upper = gini(p) - (1.0 - mu), 3.0 * (mu - 1.0 + f[0])
    return ObservationBounds(
        f1=f1, f1_lower=float(lower), gini_excess=excess, excess_upper=float(upper),
        f1_holds=f1 >= lower - tol,
        excess_holds=(-tol <= excess <= upper + tol),
    )


# -- H-norm, Dirichlet form, weak Poincare ------------------------------------

def _weighted_sq(diff, logw):
    """``diff^2 / exp(logw)`` computed in log space; zero where ``diff == 0``."""
    out = np.zeros_like(diff)
    nz = diff != 0
    with np.errstate(over="ignore"):
        out[nz] = np.exp(2.0 * np.log(np.abs(diff[nz])) - logw[nz])
    return out


def h_norm_sq(p, pbar) -> float:
    """``p_0^2 + sum_{n>=1} (p_n - pbar_n)^2 / pbar_n`` over the stored range.

    ``pbar`` may end in zeros (a point mass, say) as long as ``p`` vanishes
    there too.

    Raises
    ------
    DomainError
        If ``pbar`` has a zero followed by positive mass, or if ``p`` puts
        mass where ``pbar`` vanishes.
    """
    p, pbar = _arr(p), _arr(pbar)
    if p.size != pbar.size:
        raise DomainError(f"length mismatch: {p.size} vs {pbar.size}")
    w = pbar[1:]
    zero = w == 0
    if np.any(zero):
        first = int(np.argmax(zero))
        if np.any(w[first:] > 0):
            raise DomainError(f"reference has an interior zero at n={first + 1}")
        if np.any(p[1:][zero] != 0):
            raise DomainError("p has mass where the reference vanishes")
    d = p[1:] - w
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(zero, 0.0, d * d / np.where(zero, 1.0, w))
    return float(p[0] ** 2 + terms.sum())


def _poisson_tail_mass(mu, n_max):
    """``P(X > n_max)`` for ``X = 1 + Poisson(mu - 1)``."""
    return float(poisson.sf(n_max - 1, mu - 1.0))


def chi_sq_poisson(p, mu) -> float:
    """``sum_{n>=1} (p_n - pbar_n)^2 / pbar_n`` against the exact modified Poisson.

    ``p`` is read as an infinite sequence that vanishes above ``n_max``, so the
    discarded reference tail is added. Weights are handled in log space and
    never underflow.
    """
    p = _arr(p)
    logw = modified_poisson_logpmf(mu, p.size - 1)
    diff = p[1:] - np.exp(logw[1:])
    return float(_weighted_sq(diff, logw[1:]).sum()) + _poisson_tail_mass(mu, p.size - 1)


def h_norm_sq_poisson(p, mu) -> float:
    """H-norm squared distance to the modified Poisson law at ``mu``."""
    p = _arr(p)
    return float(p[0] ** 2) + chi_sq_poisson(p, mu)


def dirichlet_form(p, mu) -> float:
    """``(mu-1) sum_{n>=1} pbar_n (p_{n+1}/pbar_{n+1} - p_n/pbar_n)^2``.

    ``p`` is extended by zeros above ``n_max``, so the last term is
    ``p_{n_max}^2 / pbar_{n_max}``. Each term is evaluated as
    ``(n p_{n+1}/(mu-1) - p_n)^2 / pbar_n``, which avoids the huge ratios
    ``p_n / pbar_n`` in the tail.
    """
    if not mu > 1:
        raise DomainError(f"the Dirichlet form needs mu > 1, got {mu}")
    p = _arr(p)
    lam = mu - 1.0
    logw = modified_poisson_logpmf(mu, p.size - 1)
    n = np.arange(1, p.size, dtype=float)
    nxt = np.append(p[2:], 0.0)
    diff = n * nxt / lam - p[1:]
    return lam * float(_weighted_sq(diff, logw[1:]).sum())


@dataclass
class PoincareResult:
    lhs: float
    rhs: float
    holds: bool


def poincare_check(p, mu, tol=INEQ_TOL) -> PoincareResult:
    """Weak Poincare inequality ``chi^2(p, pbar) <= p_0^2 + D(p)``.

    ``holds`` allows ``tol`` relative to ``max(1, rhs)``: for vectors with
    mass deep in the reference tail both sides reach 1e90 and an absolute
    slack would be below their rounding error.
    """
    p = _arr(p)
    lhs = chi_sq_poisson(p, mu)
    rhs = float(p[0] ** 2) + dirichlet_form(p, mu)
    return PoincareResult(lhs, rhs, bool(lhs <= rhs + tol * max(1.0, rhs)))


def potential_V(n_max, mu) -> np.ndarray:
    """``V_n = (n-1) n / (2(mu-1)) - n`` for ``n = 0..n_max``."""
    if not mu > 1:
        raise DomainError(f"V needs mu > 1, got {mu}")
    n = np.arange(n_max + 1, dtype=float)
    return (n - 1.0) * n / (2.0 * (mu - 1.0)) - n


# -- threshold times and theorem constants ------------------------------------

@dataclass
class ThresholdTimes:
    t_star: float | None
    t_star_mu: float | None
    delta: float | None
    k_const: float


def _check_k(K):
    if not K > 0 or K * K + 2 * K > 0.5 + 1e-15:
        raise DomainError(f"K must satisfy K > 0 and K^2 + 2K <= 1/2, got {K}")


def p0_hitting_time(mu, p0_init, level) -> float | None:
    """First ``t`` with ``p_0(t) <= level`` on the exact logistic solution.

    ``None`` if the level is never reached.
    """
    x = p0_init
    if x <= level:
        return 0.0
    if mu == 1:
        return 1.0 / level - 1.0 / x
    a = 1.0 - mu
    if level <= max(a, 0.0):
        return None
    return math.log(level * (a - x) / (x * (a - level))) / a


def _first_crossing(t, y, level):
    below = np.nonzero(y <= level)[0]
    if below.size == 0:
        return None
    k = int(below[0])
    if k == 0:
        return float(t[0])
    t0, t1, y0, y1 = t[k - 1], t[k], y[k - 1], y[k]
    return float(t0 + (level - y0) * (t1 - t0) / (y1 - y0))


def threshold_levels(mu, K=DEFAULT_K):
    """``(level for t_*, level for t^*, delta)``; absent entries are ``None``."""
    _check_k(K)
    if mu == 1:
        return 1.0 / 6.0, None, None
    if mu < 1:
        delta = K * min(mu, 1.0 - mu)
        return None, 1.0 - mu + delta, delta
    return None, None, None


def threshold_times(traj: Trajectory, mu=None, K=DEFAULT_K, method="interpolate") -> ThresholdTimes:
    """First sample-interpolated (or exact) crossing of the ``p_0`` thresholds.

    Parameters
    ----------
    method : {"interpolate", "closed_form"}
        ``"interpolate"`` linearly interpolates between samples;
        ``"closed_form"`` inverts the exact ``p_0(t)``.
        Crossings after the last sample are reported as ``None`` either way.
    """
    mu = traj.mu if mu is None else mu
    if Generator(traj.generator) is not Generator.STICKY:
        raise DomainError("threshold times are defined along sticky trajectories")
    lvl_star, lvl_mu, delta = threshold_levels(mu, K)
    horizon = float(traj.times[-1])

    def cross(level):
        if level is None:
            return None
        if method == "interpolate":
            return _first_crossing(traj.times, traj.p0, level)
        if method == "closed_form":
            t = p0_hitting_time(mu, float(traj.p0[0]), level)
            return None if t is None or t > horizon else t
        raise ValueError(f"unknown method {method!r}")

    return ThresholdTimes(cross(lvl_star), cross(lvl_mu), delta, K)


@dataclass
class TheoremConstants:
    C_mu: float | None
    delta: float | None
    gamma_mu: float | None
    K_mu: float | None


def theorem_constants(mu, K=DEFAULT_K, p0_init=None) -> TheoremConstants:
    """Constants of the Gini envelopes (``mu < 1``) and of the Q-hat bound (``mu > 1``).

    ``gamma_mu`` needs ``p0_init``; for ``mu > 1`` ``p0_init`` is the initial
    ``p_0`` of the linear flow and is required.
    """
    _check_k(K)
    if 0 < mu < 1:
        c = min(mu, 1.0 - mu) / 4.0
        gamma = None
        if p0_init is not None:
            if not p0_init > 0:
                raise DomainError("gamma_mu needs p0(0) > 0")
            gamma = 2.0 / mu * c * (1.0 - mu) * (mu - 1.0 + p0_init) / p0_init
        return TheoremConstants(c, K * min(mu, 1.0 - mu), gamma, None)
    if mu > 1:
        if p0_init is None:
            raise DomainError("K_mu needs the initial p0")
        return TheoremConstants(None, None, None, (1.0 + (mu - 1.0) * math.exp(mu - 1.0)) * p0_init)
    raise DomainError(f"no theorem constants are defined at mu={mu}")


def gini_upper_envelope(t, t_anchor, excess_anchor, mu):
    """``(G(t^*) - (1-mu)) exp(-(2 C_mu / 3 mu)(t - t^*))``."""
    c = theorem_constants(mu).C_mu
    return excess_anchor * np.exp(-2.0 * c / (3.0 * mu) * (np.asarray(t) - t_anchor))


def gini_lower_envelope(t, mu, p0_init):
    """``(gamma_mu / (1-mu)) exp(-(1-mu) t)``."""
    gamma = theorem_constants(mu, p0_init=p0_init).gamma_mu
    return gamma / (1.0 - mu) * np.exp(-(1.0 - mu) * np.asarray(t))


def qhat_hnorm_envelope(t, mu, h0_chi_sq, p0_init):
    """Upper bound on the H-norm squared along the linear Q-hat flow.

    ``h0_chi_sq`` is ``sum_{n>=1} (p_n(0) - pbar_n)^2 / pbar_n`` (twice the
    quantity ``H(0)`` of the decay estimate).
    """
    t = np.asarray(t, dtype=float)
    k = theorem_constants(mu, p0_init=p0_init).K_mu
    h0 = 0.5 * h0_chi_sq
    if mu == 3:
        h = h0 * np.exp(-2 * t) + k * t * np.exp(-2 * t)
    else:
        h = h0 * np.exp(-2 * t) + k / (mu - 3.0) * (np.exp(-2 * t) - np.exp(-(mu - 1.0) * t))
    return p0_init ** 2 * np.exp(-2 * (mu - 1.0) * t) + 2.0 * h


# -- decay fits ---------------------------------------------------------------

class DecayModel(enum.Enum):
    POWER_LAW = "power"
    EXPONENTIAL = "exponential"


@dataclass
class DecayFit:
    model: DecayModel
    window: tuple
    slope: float
    intercept: float
    r_squared: float
    n_points: int

    def as_dict(self):
        d = asdict(self)
        d["model"] = self.model.value
        d["window"] = list(self.window)
        return d


def default_window(t, y, fraction=0.6):
    """Last ``fraction`` of the time range, restricted to ``y > 100 eps``."""
    t, y = _arr(t), _arr(y)
    start = t[0] + (1.0 - fraction) * (t[-1] - t[0])
    keep = (t >= start) & (y > 100 * EPS)
    if not np.any(keep):
        raise DomainError("no samples above 100 eps in the default window")
    return float(t[keep].min()), float(t[keep].max())


def fit_decay(t, y, model="power", window=None, min_points=10) -> DecayFit:
    """Least-squares fit of a power law (log-log) or exponential (semilog).

    Raises
    ------
    DomainError
        If the window holds fewer than ``min_points`` samples, or any
        nonpositive ``y`` (the offending samples are listed).
    """
    model = DecayModel(model)
    t, y = _arr(t), _arr(y)
    if window is None:
        window = default_window(t, y)
        sel = (t >= window[0]) & (t <= window[1]) & (y > 100 * EPS)
    else:
        lo, hi = window
        if lo > hi:
            raise DomainError(f"empty window {window}")
        sel = (t >= lo - 1e-12) & (t <= hi + 1e-12)
        bad = sel & ~(y > 0)
        if np.any(bad):
            shown = ", ".join(f"t={a:.6g}: y={b:.3g}" for a, b in zip(t[bad][:10], y[bad][:10]))
            raise DomainError(f"nonpositive values in the fit window ({shown})")
    if sel.sum() < min_points:
        raise DomainError(f"fit window {window} holds {int(sel.sum())} points, need {min_points}")
    x = t[sel]
    if model is DecayModel.POWER_LAW:
        if np.any(x <= 0):
            raise DomainError("a power-law fit needs t > 0")
        x = np.log(x)
    res = linregress(x, np.log(y[sel]))
    r2 = min(max(float(res.rvalue) ** 2, 0.0), 1.0)
    return DecayFit(model, (float(window[0]), float(window[1])), float(res.slope),
                    float(res.intercept), r2, int(sel.sum()))


# -- Bakry-Emery ---------------------------------------------------------------

@dataclass
class BakryEmeryReport:
    """H-norm squared along a ``p_0 = 0`` trajectory and its time derivatives.

    ``decay_ok[k]``: ``dH2 <= -2 H2 + tol``; ``convexity_ok[k]``:
    ``d2H2 / 2 >= -dH2 - tol``; ``envelope_ok[k]``:
    ``H2 <= H2(0) exp(-2t) (1 + 1e-6)``.
    """

    t: np.ndarray
    h2: np.ndarray
    dh2: np.ndarray
    d2h2: np.ndarray
    tol: float
    decay_ok: np.ndarray
    convexity_ok: np.ndarray
    envelope_ok: np.ndarray

    @property
    def holds(self):
        return bool(self.decay_ok.all() and self.convexity_ok.all() and self.envelope_ok.all())


def _dh2_generator(p, mu):
    """Exact ``d/dt`` of the H-norm squared using the sticky generator."""
    ctx = OperatorContext(mu, p.size - 1)
    dp = q_apply(p, ctx)
    logw = modified_poisson_logpmf(mu, p.size - 1)
    w = np.exp(logw[1:])
    return 2.0 * p[0] * dp[0] + float(np.sum(2.0 * (p[1:] - w) * np.exp(-logw[1:]) * dp[1:]))


def bakry_emery_report(traj: Trajectory, method="finite-difference", rel_tol=1e-4) -> BakryEmeryReport:
    """Check the Bakry-Emery differential inequalities at every sample.

    Parameters
    ----------
    method : {"finite-difference", "generator"}
        How the first derivative is obtained. The second derivative is
        always a finite difference of the first.
    """
    mu = traj.mu
    if not mu > 1:
        raise DomainError(f"Bakry-Emery needs mu > 1, got {mu}")
    if traj.p0[0] != 0:
        raise DomainError(f"Bakry-Emery needs p0(0) = 0, got {traj.p0[0]}")
    if len(traj) < 3:
        raise DomainError("need at least three samples for finite differences")
    t = traj.times
    h2 = np.array([h_norm_sq_poisson(s, mu) for s in traj.states])
    if method == "finite-difference":
        dh2 = np.gradient(h2, t, edge_order=2)
    elif method == "generator":
        dh2 = np.array([_dh2_generator(s, mu) for s in traj.states])
    else:
        raise ValueError(f"unknown method {method!r}")
    d2h2 = np.gradient(dh2, t, edge_order=2)
    tol = rel_tol * h2[0] + HNORM_FLOOR
    return BakryEmeryReport(
        t=t, h2=h2, dh2=dh2, d2h2=d2h2, tol=tol,
        decay_ok=dh2 <= -2.0 * h2 + tol,
        convexity_ok=0.5 * d2h2 >= -dh2 - tol,
        envelope_ok=h2 <= h2[0] * np.exp(-2.0 * (t - t[0])) * (1.0 + 1e-6) + HNORM_FLOOR,
    )


def gini_derivative_check(traj: Trajectory, mu=None):
    """Central-difference ``dG/dt`` against the identity at interior samples.

    Returns ``(t, finite_difference, identity)``.
    """
    mu = traj.mu if mu is None else mu
    g = np.array([gini(s) for s in traj.states])
    t = traj.times
    fd = (g[2:] - g[:-2]) / (t[2:] - t[:-2])
    ident = np.array([gini_derivative_identity(s, mu) for s in traj.states[1:-1]])
    return t[1:-1], fd, ident


# -- time series ----------------------------------------------------------------

SERIES_FIELDS = ("t", "p0", "gini", "hnorm_sq", "l2", "mass", "mean", "boundary_flux")


@dataclass
class TimeSeriesRecord:
    t: float
    p0: float
    gini: float
    hnorm_sq: float
    l2: float
    mass: float
    mean: float
    boundary_flux: float

    def as_row(self):
        return tuple(getattr(self, f) for f in SERIES_FIELDS)


def reference_equilibrium(mu, n_max, generator=Generator.STICKY) -> np.ndarray:
    """Equilibrium the given flow relaxes to, as a plain vector on ``0..n_max``.

    The modified Poisson is the exact (unrenormalized) law so that very large
    ``n_max`` never triggers a truncation error.
    """
    generator = Generator(generator)
    if generator is Generator.CLASSICAL_L:
        return EquilibriumSpec.for_mu(mu, classical=True).build(n_max).values.copy()
    if mu <= 1:
        return make_bernoulli(mu, n_max).values.copy()
    return np.exp(modified_poisson_logpmf(mu, n_max))


def time_series(traj: Trajectory) -> list[TimeSeriesRecord]:
    """Diagnostics at every sample; ``hnorm_sq`` is NaN where it is undefined."""
    mu = traj.mu
    gen = Generator(traj.generator)
    ref = reference_equilibrium(mu, traj.n_max, gen)
    with_h = mu > 1 and gen is not Generator.CLASSICAL_L
    out = []
    for k, s in enumerate(traj.states):
        out.append(TimeSeriesRecord(
            t=float(traj.times[k]),
            p0=float(s[0]),
            gini=gini(s),
            hnorm_sq=h_norm_sq_poisson(s, mu) if with_h else math.nan,
            l2=float(np.linalg.norm(s - ref)),
            mass=float(s.sum()),
            mean=float(np.arange(s.size) @ s),
            boundary_flux=float(traj.fluxes[k]),
        ))
    return out


def series_column(records, name) -> np.ndarray:
    if name not in SERIES_FIELDS:
        raise KeyError(name)
    return np.array([getattr(r, name) for r in records])
