"""Mean-field generators and the discrete difference calculus.

All generators act on a truncated vector ``p = (p_0, ..., p_{n_max})`` with
the convention ``p_{n_max+1} = 0``. Mass that the infinite system would move
above ``n_max`` is lost; every ``*_apply`` can report that loss rate as a
``boundary flux`` (``return_flux=True``) so conservation checks can tell
truncation apart from bugs.

Functions accept a :class:`~stickydisp.dist_core.ProbVec` or a plain 1-D
array; derivatives are returned as plain arrays.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .dist_core import modified_poisson_logpmf
from .errors import DimensionError, DomainError

MEAN_WARN_TOL = 1e-6


@dataclass(frozen=True)
class OperatorContext:
    """Conserved mean ``mu`` and truncation level shared by the generators."""

    mu: float
    n_max: int

    def __post_init__(self):
        if not self.mu > 0:
            raise DomainError(f"mu must be positive, got {self.mu}")
        if int(self.n_max) != self.n_max or self.n_max < 2:
            raise DomainError(f"n_max must be an integer >= 2, got {self.n_max}")


def _vec(p, ctx=None):
    arr = np.asarray(p, dtype=float)
    if arr.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {arr.shape}")
    if ctx is not None and arr.size != ctx.n_max + 1:
        raise DimensionError(f"vector has {arr.size} entries, context expects {ctx.n_max + 1}")
    return arr


def _index(size):
    return np.arange(size, dtype=float)


def _finish(out, flux, return_flux):
    return (out, float(flux)) if return_flux else out


def _birth_death(p, up, down_offset):
    """n p_{n+1} + up p_{n-1} - (n - down_offset) p_n - up p_n for n >= 1."""
    n = _index(p.size)
    out = np.empty_like(p)
    out[0] = -up * p[0]
    out[1:-1] = n[1:-1] * p[2:]
    out[-1] = 0.0
    out[1:] += up * p[:-1] - (n[1:] - down_offset + up) * p[1:]
    return out


# -- sticky dispersion ------------------------------------------------------

def moment_nu(p) -> float:
    """``sum_{n>=1} (n-1) p_n``, the mean excess over one dollar."""
    p = _vec(p)
    return float((_index(p.size)[1:] - 1.0) @ p[1:])


def q_apply(p, ctx: OperatorContext, return_flux=False):
    """Sticky mean-field generator using the conserved mean ``ctx.mu``.

    ``Q[p]_0 = -(mu-1+p_0) p_0`` and, for n >= 1,
    ``Q[p]_n = n p_{n+1} + (mu-1+p_0) p_{n-1} - (n-1) p_n - (mu-1+p_0) p_n``.
    """
    p = _vec(p, ctx)
    mean = float(_index(p.size) @ p)
    if abs(mean - ctx.mu) > MEAN_WARN_TOL:
        warnings.warn(
            f"mean(p)={mean:.9g} differs from mu={ctx.mu}; Q assumes p is in S_mu",
            RuntimeWarning, stacklevel=2,
        )
    nu = ctx.mu - 1.0 + p[0]
    return _finish(_birth_death(p, nu, 1.0), nu * p[-1], return_flux)


def q_apply_general(p, return_flux=False):
    """Sticky generator with coefficient ``sum_{k>=2} (k-1) p_k`` taken from ``p``.

    Agrees with :func:`q_apply` whenever ``mean(p)`` equals the context mean.
    """
    p = _vec(p)
    n = _index(p.size)
    coef = float((n[2:] - 1.0) @ p[2:])
    out = np.zeros_like(p)
    out[0] = -coef * p[0]
    for k in range(1, p.size):
        gain = (k * p[k + 1] if k + 1 < p.size else 0.0) + coef * p[k - 1]
        out[k] = gain - (k - 1 + coef) * p[k]
    return _finish(out, coef * p[-1], return_flux)


def qhat_apply(p, ctx: OperatorContext, return_flux=False):
    """Linear part of the sticky generator (``p_0`` frozen out of the drift)."""
    p = _vec(p, ctx)
    if not ctx.mu > 1:
        raise DomainError(f"Q-hat is defined for mu > 1, got {ctx.mu}")
    lam = ctx.mu - 1.0
    return _finish(_birth_death(p, lam, 1.0), lam * p[-1], return_flux)


def shift_R(p, return_flux=False):
    """Right shift ``R[p]_0 = 0``, ``R[p]_n = p_{n-1}``; ``p_{n_max}`` drops out."""
    p = _vec(p)
    out = np.empty_like(p)
    out[0] = 0.0
    out[1:] = p[:-1]
    return _finish(out, p[-1], return_flux)


def dminus_apply(p, return_flux=False):
    """``D^-[p] = p - R[p]``; its entries sum to the dropped ``p_{n_max}``."""
    p = _vec(p)
    out = p - shift_R(p)
    return _finish(out, p[-1], return_flux)


# -- difference calculus ------------------------------------------------------

def dplus(a) -> np.ndarray:
    """Forward difference ``a_{n+1} - a_n``; one entry shorter than ``a``."""
    return np.diff(np.asarray(a, dtype=float))


def dminus_seq(a) -> np.ndarray:
    """Backward difference with ``D^- a_0 = a_0``; same length as ``a``."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    out[0] = a[0]
    out[1:] = a[1:] - a[:-1]
    return out


def laplace(a) -> np.ndarray:
    """``D^-(D^+ a)``, one entry shorter than ``a``."""
    return dminus_seq(dplus(a))


def ratio(num, den):
    """Elementwise ``num / den`` with ``0/0 = 1``.

    A non-zero numerator over a zero denominator gives a signed infinity.
    """
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den
    out = np.where((num == 0) & (den == 0), 1.0, out)
    return float(out) if out.ndim == 0 else out


def _fokker_planck(p, weight, prefactor):
    """``prefactor * D^-(w_n D^+(p_n / w_n))`` with ``w_0 = 0``.

    At n = 0 the weight vanishes; ``w_0 p_1 / w_1`` is 0 and ``w_0 (p_0 / w_0)``
    is read as ``p_0``, so the n = 0 flux is ``-p_0``.
    """
    if np.any(weight[1:] <= 0):
        raise DomainError(
            "reference weights underflow to zero inside the truncation range; "
            "lower n_max or use the direct form"
        )
    r = np.zeros(p.size + 1)
    r[1:-1] = ratio(p[1:], weight[1:])
    flux = np.empty_like(p)
    flux[0] = -p[0]
    flux[1:] = weight[1:] * (r[2:] - r[1:-1])
    return prefactor * dminus_seq(flux)


def qhat_fokker_planck(p, ctx: OperatorContext, return_flux=False):
    """Q-hat evaluated in Fokker-Planck form against the modified Poisson law.

    Independent of :func:`qhat_apply`; the two must agree entrywise.
    """
    p = _vec(p, ctx)
    if not ctx.mu > 1:
        raise DomainError(f"Q-hat is defined for mu > 1, got {ctx.mu}")
    pbar = np.exp(modified_poisson_logpmf(ctx.mu, ctx.n_max))
    out = _fokker_planck(p, pbar, ctx.mu - 1.0)
    return _finish(out, (ctx.mu - 1.0) * p[-1], return_flux)


def quasi_stationary(p, ctx: OperatorContext) -> np.ndarray:
    """Modified Poisson law with parameter ``mu - 1 + p_0`` (not renormalized)."""
    p = _vec(p, ctx)
    nu = ctx.mu - 1.0 + p[0]
    if not nu > 0:
        raise DomainError(f"mu - 1 + p_0 must be positive, got {nu}")
    n = np.arange(1, ctx.n_max + 1)
    q = np.zeros(ctx.n_max + 1)
    q[1:] = np.exp((n - 1) * math.log(nu) - nu - gammaln(n))
    return q


FK_PREFACTORS = ("printed", "effective")


def fk_nonlinear_form(p, ctx: OperatorContext, prefactor="printed"):
    """Nonlinear generator in Fokker-Planck form around the quasi-stationary law.

    Parameters
    ----------
    prefactor : {"printed", "effective"}
        ``"printed"`` multiplies by ``mu - 1``; ``"effective"`` multiplies by
        ``mu - 1 + p_0``. Only the effective prefactor reproduces
        :func:`q_apply` when ``p_0 > 0``; both coincide when ``p_0 = 0``.
    """
    p = _vec(p, ctx)
    if not ctx.mu > 1:
        raise DomainError(f"the Fokker-Planck form needs mu > 1, got {ctx.mu}")
    q = quasi_stationary(p, ctx)
    if prefactor == "printed":
        c = ctx.mu - 1.0
    elif prefactor == "effective":
        c = ctx.mu - 1.0 + p[0]
    else:
        raise ValueError(f"prefactor must be one of {FK_PREFACTORS}, got {prefactor!r}")
    return _fokker_planck(p, q, c)


def fk_nonlinear_residuals(p, ctx: OperatorContext) -> dict:
    """Max-abs residual against :func:`q_apply` for each prefactor choice."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ref = q_apply(p, ctx)
    return {
        name: float(np.max(np.abs(fk_nonlinear_form(p, ctx, name) - ref)))
        for name in FK_PREFACTORS
    }


# -- classical dispersion -----------------------------------------------------

def l_apply(p, ctx: OperatorContext | None = None, return_flux=False):
    """Mean-field generator of the classical dispersion process.

    Vertices holding ``n >= 2`` expel at rate ``n``; arrivals come at rate
    ``S = sum_{k>=2} k p_k``. ``ctx`` is only used for a length check.
    """
    p = _vec(p, ctx)
    n = _index(p.size)
    s = float(n[2:] @ p[2:])
    out = np.empty_like(p)
    out[0] = -s * p[0]
    out[1:-1] = (n[1:-1] + 1.0) * p[2:]
    out[-1] = 0.0
    out[1:] += s * p[:-1] - s * p[1:]
    out[2:] -= n[2:] * p[2:]
    return _finish(out, s * p[-1], return_flux)
