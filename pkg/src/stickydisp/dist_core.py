"""Probability vectors on {0, ..., n_max} and the closed-form equilibria.

Everything here is a pure function of its inputs. A :class:`ProbVec` owns a
read-only copy of its data, so instances can be shared freely.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import ConvergenceError, DomainError, TruncationError

MASS_TOL = 1e-9
TAIL_TOL = 1e-12


class ProbVec:
    """Truncated probability distribution ``(p_0, ..., p_{n_max})``.

    Parameters
    ----------
    values : array_like
        Non-negative masses indexed by the number of dollars held.
    mass_tol : float, optional
        Allowed deviation of the total mass from 1.

    Raises
    ------
    DomainError
        If an entry is negative or not finite, or the mass is off by more
        than ``mass_tol``.
    """

    __slots__ = ("_values",)

    def __init__(self, values, mass_tol=MASS_TOL):
        arr = np.array(values, dtype=float, copy=True)
        if arr.ndim != 1:
            raise DomainError(f"a ProbVec is one-dimensional, got shape {arr.shape}")
        if arr.size < 2:
            raise DomainError("a ProbVec needs at least the entries p_0 and p_1")
        if not np.all(np.isfinite(arr)):
            raise DomainError("ProbVec entries must be finite")
        if np.any(arr < 0):
            i = int(np.argmin(arr))
            raise DomainError(f"negative mass {arr[i]!r} at n={i}")
        mass = float(arr.sum())
        if abs(mass - 1.0) > mass_tol:
            raise DomainError(f"total mass {mass!r} differs from 1 by more than {mass_tol}")
        arr.setflags(write=False)
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def n_max(self) -> int:
        return self._values.size - 1

    @property
    def mass(self) -> float:
        return float(self._values.sum())

    @property
    def mean(self) -> float:
        return float(np.arange(self._values.size) @ self._values)

    def __len__(self):
        return self._values.size

    def __getitem__(self, n):
        return self._values[n]

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._values
        return self._values.astype(dtype)

    def __repr__(self):
        return f"ProbVec(n_max={self.n_max}, mean={self.mean:.6g})"

    def in_S_mu(self, mu, tol=1e-9) -> bool:
        """Membership test for the set of distributions with mean ``mu``."""
        return abs(self.mean - mu) <= tol and abs(self.mass - 1.0) <= tol

    def padded(self, n_max) -> "ProbVec":
        """Same distribution at a larger truncation level."""
        if n_max < self.n_max:
            if np.any(self._values[n_max + 1:] > 0):
                raise DomainError("cannot shrink a ProbVec with mass above the new n_max")
            return ProbVec(self._values[: n_max + 1])
        out = np.zeros(n_max + 1)
        out[: self._values.size] = self._values
        return ProbVec(out)


class EquilibriumKind(enum.Enum):
    BERNOULLI = "bernoulli"
    MODIFIED_POISSON = "modified-poisson"
    CLASSICAL_L = "classical"


@dataclass(frozen=True)
class EquilibriumSpec:
    """Which closed-form equilibrium to build, and at which mean."""

    kind: EquilibriumKind
    mu: float

    def __post_init__(self):
        kind = EquilibriumKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is EquilibriumKind.BERNOULLI:
            if not 0 < self.mu <= 1:
                raise DomainError(f"Bernoulli equilibrium needs 0 < mu <= 1, got {self.mu}")
        elif not self.mu > 1:
            raise DomainError(f"{kind.value} equilibrium needs mu > 1, got {self.mu}")

    @classmethod
    def for_mu(cls, mu, classical=False):
        """The unique equilibrium of the sticky (or classical) flow at ``mu``."""
        if mu <= 1:
            return cls(EquilibriumKind.BERNOULLI, mu)
        return cls(EquilibriumKind.CLASSICAL_L if classical else EquilibriumKind.MODIFIED_POISSON, mu)

    def build(self, n_max) -> ProbVec:
        if self.kind is EquilibriumKind.BERNOULLI:
            return make_bernoulli(self.mu, n_max)
        if self.kind is EquilibriumKind.MODIFIED_POISSON:
            return make_modified_poisson(self.mu, n_max)
        return make_classical_equilibrium(self.mu, n_max)


def make_bernoulli(mu, n_max) -> ProbVec:
    """Two-point law ``p_0 = 1 - mu``, ``p_1 = mu``."""
    if not 0 < mu <= 1:
        raise DomainError(f"Bernoulli equilibrium needs 0 < mu <= 1, got {mu}")
    if n_max < 1:
        raise DomainError("n_max must be at least 1")
    p = np.zeros(n_max + 1)
    p[0] = 1.0 - mu
    p[1] = mu
    return ProbVec(p)


def modified_poisson_logpmf(mu, n_max) -> np.ndarray:
    """Log-masses of ``1 + Poisson(mu - 1)`` on ``0..n_max`` (``-inf`` at 0).

    Exact for any ``n_max``; the linear-scale masses underflow long before
    the logs do.
    """
    if not mu > 1:
        raise DomainError(f"modified Poisson needs mu > 1, got {mu}")
    lam = mu - 1.0
    n = np.arange(1, n_max + 1)
    out = np.empty(n_max + 1)
    out[0] = -np.inf
    out[1:] = (n - 1) * math.log(lam) - lam - gammaln(n)
    return out


def _poisson_tail(lam, k):
    """P(Y >= k) for Y ~ Poisson(lam)."""
    from scipy.stats import poisson

    return float(poisson.sf(k - 1, lam))


def _required_n_max(tail_fn, start):
    n = max(start, 1)
    while tail_fn(n) >= TAIL_TOL:
        n = int(n * 1.25) + 1
    lo = max(start, 1)
    while lo < n:
        mid = (lo + n) // 2
        if tail_fn(mid) < TAIL_TOL:
            n = mid
        else:
            lo = mid + 1
    return n


def make_modified_poisson(mu, n_max) -> ProbVec:
    """Law of ``1 + Poisson(mu - 1)`` truncated at ``n_max`` and renormalized.

    Raises
    ------
    TruncationError
        If the discarded tail ``P(X > n_max)`` is not below 1e-12.
    """
    lam = mu - 1.0
    if not lam > 0:
        raise DomainError(f"modified Poisson needs mu > 1, got {mu}")
    tail = _poisson_tail(lam, n_max)  # P(1 + Y > n_max) = P(Y >= n_max)
    if tail >= TAIL_TOL:
        need = _required_n_max(lambda m: _poisson_tail(lam, m), n_max)
        raise TruncationError(
            f"n_max={n_max} discards tail mass {tail:.3g} for mu={mu}; use n_max >= {need}",
            tail, need,
        )
    logp = modified_poisson_logpmf(mu, n_max)
    p = np.exp(logp - logsumexp(logp[1:]))
    return ProbVec(p)


def p0_closed_form(mu, p0_init, t):
    """Exact solution of ``p0' = -(mu - 1 + p0) p0``.

    ``t`` may be a scalar or an array; the return has the same shape.
    """
    if not mu > 0:
        raise DomainError(f"mu must be positive, got {mu}")
    if not max(0.0, 1.0 - mu) - 1e-15 <= p0_init <= 1.0:
        raise DomainError(f"p0(0)={p0_init} is not reachable in S_mu for mu={mu}")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("t must be non-negative")
    if p0_init == 0:
        out = np.zeros_like(t)
    elif mu == 1:
        out = 1.0 / (t + 1.0 / p0_init)
    else:
        a = 1.0 - mu
        x = p0_init
        # x / (1 + (x - a) (1 - e^{-at}) / a), written with expm1 to stay
        # accurate as mu -> 1; overflow for mu > 1 and large t gives 0.
        with np.errstate(over="ignore"):
            growth = -np.expm1(-a * t) / a
            out = x / (1.0 + (x - a) * growth)
    return float(out) if out.ndim == 0 else out


def lambert_w0(x) -> float:
    """Principal branch of the Lambert W function by Halley iteration.

    Returns ``w >= -1`` with ``w * exp(w) == x``.

    Raises
    ------
    DomainError
        If ``x < -1/e``.
    """
    x = float(x)
    branch = -math.exp(-1.0)
    if not x >= branch:
        raise DomainError(f"W0 is undefined below -1/e, got {x}")
    if x == 0.0:
        return 0.0
    if math.isinf(x):
        return math.inf

    if x < -0.25:
        # series about the branch point
        q = 2.0 * (math.e * x + 1.0)
        if q <= 0.0:
            return -1.0
        s = math.sqrt(q)
        w = -1.0 + s - s * s / 3.0 + 11.0 / 72.0 * s ** 3
    elif x < 3.0:
        w = math.log1p(x)
        if x > 0:
            w *= 0.75
    else:
        l1 = math.log(x)
        l2 = math.log(l1)
        w = l1 - l2 + l2 / l1

    for _ in range(64):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        if wp1 == 0.0 or f == 0.0:
            break
        step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w_new = max(w - step, -1.0)
        if abs(w_new - w) <= 4 * np.finfo(float).eps * (1.0 + abs(w_new)):
            w = w_new
            break
        w = w_new
    return w


def _zero_truncated_poisson(s, n_max):
    """p_n proportional to s^(n-1)/n! on 1..n_max (the L stationarity profile)."""
    n = np.arange(1, n_max + 1)
    logp = np.empty(n_max + 1)
    logp[0] = -np.inf
    logp[1:] = (n - 1) * math.log(s) - gammaln(n + 1)
    log_norm = logsumexp(logp[1:])
    return np.exp(logp - log_norm), logp, log_norm


def make_classical_equilibrium(mu, n_max, max_iter=10_000, tol=1e-15) -> ProbVec:
    """Numerical stationary point of the classical dispersion generator L.

    The stationarity recurrence ``(n+1) p_{n+1} = S p_n`` (n >= 1) fixes the
    profile up to the coefficient ``S = sum_{k>=2} k p_k``; ``S`` is found by
    fixed-point iteration ``S <- mu - p_1(S)`` starting from ``S = mu``, which
    makes the mean equal to ``mu`` at convergence.

    Raises
    ------
    DomainError
        If ``mu <= 1``.
    TruncationError
        If the profile has more than 1e-12 mass above ``n_max``.
    ConvergenceError
        If the iteration does not settle or the generator residual exceeds 1e-10.
    """
    from .operators import l_apply

    if not mu > 1:
        raise DomainError(f"classical equilibrium needs mu > 1, got {mu}")
    if n_max < 2:
        raise DomainError("n_max must be at least 2")
    s = float(mu)
    residual = math.inf
    for _ in range(max_iter):
        p, _, _ = _zero_truncated_poisson(s, n_max)
        s_new = mu - p[1]
        residual = abs(s_new - s)
        s = s_new
        if residual <= tol * max(1.0, s):
            break
    else:
        raise ConvergenceError(
            f"fixed-point iteration on S did not converge in {max_iter} steps", residual
        )

    p, _, _ = _zero_truncated_poisson(s, n_max)
    # mass of the untruncated profile beyond n_max, relative to the kept part
    big = _zero_truncated_poisson(s, 4 * n_max + 50)[0]
    tail = float(big[n_max + 1:].sum())
    if tail >= TAIL_TOL:
        need = _required_n_max(
            lambda m: float(big[m + 1:].sum()) if m < big.size else 0.0, n_max
        )
        raise TruncationError(
            f"n_max={n_max} discards tail mass {tail:.3g}; use n_max >= {need}", tail, need
        )
    out = ProbVec(p)
    gen_residual = float(np.max(np.abs(l_apply(out))))
    if gen_residual > 1e-10:
        raise ConvergenceError(f"max |L[p]| = {gen_residual:.3g} exceeds 1e-10", gen_residual)
    return out


@dataclass(frozen=True)
class ClassicalDiscrepancyReport:
    """Numerical stationary point of L compared with the printed closed form.

    The printed form is ``p1 = -W0(-mu e^-mu)``, ``nu = mu - p1`` and
    ``p_n = nu^(n-1) p1 / (n-1)!``.
    """

    mu: float
    n_max: int
    numerical_p1: float
    lambert_p1: float
    p1_abs_diff: float
    numerical_coefficient: float
    printed_nu: float
    printed_mass: float
    printed_max_deviation: float
    printed_max_generator_residual: float

    def as_dict(self):
        return dict(self.__dict__)


def classical_discrepancy_report(mu, n_max) -> ClassicalDiscrepancyReport:
    """Compare :func:`make_classical_equilibrium` with the Lambert-W formula."""
    from .operators import l_apply

    p = make_classical_equilibrium(mu, n_max).values
    p1_w = -lambert_w0(-mu * math.exp(-mu))
    nu = mu - p1_w
    n = np.arange(1, n_max + 1)
    printed = np.zeros(n_max + 1)
    printed[1:] = np.exp((n - 1) * math.log(nu) - gammaln(n)) * p1_w
    s_num = float(np.arange(n_max + 1)[2:] @ p[2:])
    return ClassicalDiscrepancyReport(
        mu=float(mu),
        n_max=int(n_max),
        numerical_p1=float(p[1]),
        lambert_p1=p1_w,
        p1_abs_diff=abs(float(p[1]) - p1_w),
        numerical_coefficient=s_num,
        printed_nu=nu,
        printed_mass=float(printed.sum()),
        printed_max_deviation=float(np.max(np.abs(printed - p))),
        printed_max_generator_residual=float(np.max(np.abs(l_apply(printed)))),
    )


def random_probvec(rng: np.random.Generator, n_max, mu=None, p0_zero=False) -> ProbVec:
    """Random distribution on ``0..n_max``, optionally with exact mean ``mu``.

    A Dirichlet draw on a random support ``0..K`` is mixed with a point mass
    at ``K`` (or at the lowest allowed level) to hit the requested mean.
    With ``p0_zero`` the support starts at 1 and ``mu`` must exceed 1.
    """
    low = 1 if p0_zero else 0
    if mu is not None:
        if not low < mu < n_max:
            raise DomainError(f"mu={mu} must lie strictly between {low} and n_max={n_max}")
        k_min = int(math.floor(mu)) + 1
    else:
        k_min = low + 1
    k = int(rng.integers(k_min, n_max + 1))
    alpha = float(rng.uniform(0.2, 3.0))
    q = np.zeros(n_max + 1)
    q[low:k + 1] = rng.dirichlet(np.full(k + 1 - low, alpha))
    if mu is None:
        return ProbVec(q)
    levels = np.arange(n_max + 1, dtype=float)
    m = float(levels @ q)
    anchor = k if m < mu else low
    theta = (anchor - mu) / (anchor - m)  # weight on q; in (0, 1]
    p = theta * q
    p[anchor] += 1.0 - theta
    return ProbVec(p)
