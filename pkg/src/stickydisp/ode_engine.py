"""Fixed-step RK4 integration of the mean-field systems."""
from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .dist_core import EquilibriumSpec, ProbVec, p0_closed_form
from .errors import ConfigError, DomainError, IntegrationError
from .operators import OperatorContext

logger = logging.getLogger(__name__)

NEG_TOL = 1e-12
RENORM_TOL = 1e-12
STABILITY_LIMIT = 2.0


class StabilityWarning(RuntimeWarning):
    """``dt * n_max`` is large enough that RK4 may go unstable."""


class Generator(enum.Enum):
    STICKY = "sticky"
    LINEAR_HAT = "linear"
    CLASSICAL_L = "classical"


# -- right-hand sides on raw arrays (no validation; used inside the loop) -----

def _sticky_rhs(p, mu, n, out):
    nu = mu - 1.0 + p[0]
    out[0] = -nu * p[0]
    out[1:-1] = n[1:-1] * p[2:]
    out[-1] = 0.0
    out[1:] += nu * p[:-1] - (n[1:] - 1.0 + nu) * p[1:]
    return nu * p[-1]


def _linear_rhs(p, mu, n, out):
    lam = mu - 1.0
    out[0] = -lam * p[0]
    out[1:-1] = n[1:-1] * p[2:]
    out[-1] = 0.0
    out[1:] += lam * p[:-1] - (n[1:] - 1.0 + lam) * p[1:]
    return lam * p[-1]


def _classical_rhs(p, mu, n, out):
    s = n[2:] @ p[2:]
    out[0] = -s * p[0]
    out[1:-1] = (n[1:-1] + 1.0) * p[2:]
    out[-1] = 0.0
    out[1:] += s * (p[:-1] - p[1:])
    out[2:] -= n[2:] * p[2:]
    return s * p[-1]


_RHS = {
    Generator.STICKY: _sticky_rhs,
    Generator.LINEAR_HAT: _linear_rhs,
    Generator.CLASSICAL_L: _classical_rhs,
}


# -- initial conditions ---------------------------------------------------------

@dataclass(frozen=True)
class TwoPoint:
    """``p_n = mu / n`` at ``n = n_spike``, the rest at 0."""

    n_spike: int


@dataclass(frozen=True)
class Explicit:
    state: ProbVec


@dataclass(frozen=True)
class Equilibrium:
    spec: EquilibriumSpec


InitialCondition = Union[TwoPoint, Explicit, Equilibrium]


def initial_state(initial: InitialCondition, mu, n_max) -> ProbVec:
    if isinstance(initial, TwoPoint):
        n = initial.n_spike
        if n < 1 or n > n_max:
            raise ConfigError(f"two-point spike at n={n} is outside 1..{n_max}")
        if mu / n > 1:
            raise ConfigError(f"two-point start needs mu/n <= 1, got mu={mu}, n={n}")
        p = np.zeros(n_max + 1)
        p[n] = mu / n
        p[0] += 1.0 - mu / n
        return ProbVec(p)
    if isinstance(initial, Explicit):
        if initial.state.n_max > n_max:
            return initial.state.padded(n_max)
        return initial.state.padded(n_max)
    if isinstance(initial, Equilibrium):
        if initial.spec.mu != mu:
            raise ConfigError(f"equilibrium mean {initial.spec.mu} does not match mu={mu}")
        return initial.spec.build(n_max)
    raise ConfigError(f"unknown initial condition {initial!r}")


# -- configuration and results -----------------------------------------------

def _steps(span, dt, what):
    k = span / dt
    r = round(k)
    if r < 1 or abs(k - r) > 1e-9 * max(1.0, k):
        raise ConfigError(f"{what}={span} is not a whole number of steps dt={dt}")
    return int(r)


@dataclass
class OdeConfig:
    """Run parameters for :func:`integrate`.

    ``t_end`` and ``sample_every`` must be whole multiples of ``dt``.
    """

    mu: float
    t_end: float
    initial: InitialCondition
    n_max: int = 10_000
    dt: float = 1e-3
    sample_every: float | None = None
    generator: Generator = Generator.STICKY

    def __post_init__(self):
        self.generator = Generator(self.generator)
        if self.sample_every is None:
            self.sample_every = self.t_end
        if not self.mu > 0:
            raise ConfigError(f"mu must be positive, got {self.mu}")
        if self.n_max < 2:
            raise ConfigError("n_max must be at least 2")
        if not (0 < self.dt <= self.sample_every <= self.t_end):
            raise ConfigError(
                f"need 0 < dt <= sample_every <= t_end, got dt={self.dt}, "
                f"sample_every={self.sample_every}, t_end={self.t_end}"
            )
        if self.generator is Generator.LINEAR_HAT and not self.mu > 1:
            raise ConfigError("the linear Q-hat generator needs mu > 1")
        self.steps_per_sample = _steps(self.sample_every, self.dt, "sample_every")
        self.n_steps = _steps(self.t_end, self.dt, "t_end")
        if self.dt * self.n_max > STABILITY_LIMIT:
            warnings.warn(
                f"dt*n_max = {self.dt * self.n_max:.3g} > {STABILITY_LIMIT}; "
                f"RK4 may be unstable (suggested dt <= {suggested_dt(self.n_max):.3g})",
                StabilityWarning, stacklevel=3,
            )

    @property
    def context(self) -> OperatorContext:
        return OperatorContext(self.mu, self.n_max)

    def stable(self) -> bool:
        return self.dt * self.n_max <= STABILITY_LIMIT


def suggested_dt(n_max):
    return STABILITY_LIMIT / n_max


@dataclass
class Trajectory:
    """Sampled solution.

    ``states[k]`` is the distribution at ``times[k]``; ``fluxes[k]`` is the
    mass lost through ``n_max`` up to that time, ``mean_fluxes[k]`` the mean
    lost with it, ``drift[k]`` the total renormalization applied and
    ``clamped[k]`` the total of negative round-off set to zero.
    """

    times: np.ndarray
    states: np.ndarray
    fluxes: np.ndarray
    mu: float
    generator: Generator
    dt: float
    mean_fluxes: np.ndarray = field(default=None)
    drift: np.ndarray = field(default=None)
    clamped: np.ndarray = field(default=None)

    def __post_init__(self):
        k = len(self.times)
        for name in ("mean_fluxes", "drift", "clamped"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(k))

    def __len__(self):
        return len(self.times)

    @property
    def n_max(self):
        return self.states.shape[1] - 1

    @property
    def p0(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def masses(self) -> np.ndarray:
        return self.states.sum(axis=1)

    @property
    def means(self) -> np.ndarray:
        return self.states @ np.arange(self.states.shape[1], dtype=float)

    def state(self, k, mass_tol=1e-6) -> ProbVec:
        return ProbVec(self.states[k], mass_tol=mass_tol)

    def final(self) -> ProbVec:
        return self.state(-1)


@dataclass
class StepInfo:
    flux: float
    drift: float
    clamped: float


class _Stepper:
    """RK4 with preallocated stage buffers."""

    def __init__(self, generator, mu, size):
        self.rhs = _RHS[Generator(generator)]
        self.mu = mu
        self.n = np.arange(size, dtype=float)
        self.k = [np.empty(size) for _ in range(4)]
        self.tmp = np.empty(size)

    def step(self, p, dt):
        rhs, mu, n, (k1, k2, k3, k4), tmp = self.rhs, self.mu, self.n, self.k, self.tmp
        f1 = rhs(p, mu, n, k1)
        np.multiply(k1, 0.5 * dt, out=tmp)
        tmp += p
        f2 = rhs(tmp, mu, n, k2)
        np.multiply(k2, 0.5 * dt, out=tmp)
        tmp += p
        f3 = rhs(tmp, mu, n, k3)
        np.multiply(k3, dt, out=tmp)
        tmp += p
        f4 = rhs(tmp, mu, n, k4)
        k2 += k3
        k2 *= 2.0
        k1 += k2
        k1 += k4
        new = p + (dt / 6.0) * k1
        flux = dt / 6.0 * (f1 + 2.0 * f2 + 2.0 * f3 + f4)
        return new, flux


def _postprocess(new, step_index, t):
    if not np.all(np.isfinite(new)):
        raise IntegrationError(f"non-finite state at step {step_index} (t={t:.6g})", step_index, t)
    low = new.min()
    clamped = 0.0
    if low < 0:
        if low < -NEG_TOL:
            i = int(np.argmin(new))
            raise IntegrationError(
                f"negative overshoot {low:.3g} at n={i}, step {step_index} (t={t:.6g}); "
                "dt is probably too large", step_index, t,
            )
        neg = new < 0
        clamped = float(-new[neg].sum())
        new[neg] = 0.0
        logger.debug("clamped %.3g of negative round-off at step %d", clamped, step_index)
    mass = new.sum()
    drift = 0.0
    if abs(mass - 1.0) > RENORM_TOL:
        drift = float(mass - 1.0)
        new /= mass
        logger.debug("renormalized mass drift %.3g at step %d", drift, step_index)
    return new, drift, clamped


def rk4_step(p, dt, generator, ctx: OperatorContext, return_info=False):
    """One classical RK4 step of ``dp/dt = G[p]``.

    The result is renormalized only if its mass drifts by more than 1e-12;
    negative round-off above -1e-12 is clamped to zero. Both corrections are
    reported through ``return_info``.

    Raises
    ------
    IntegrationError
        On NaN or a negative entry below -1e-12.
    """
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    arr = np.asarray(p, dtype=float)
    if arr.size != ctx.n_max + 1:
        raise DomainError(f"vector has {arr.size} entries, context expects {ctx.n_max + 1}")
    stepper = _Stepper(generator, ctx.mu, arr.size)
    new, flux = stepper.step(arr, dt)
    new, drift, clamped = _postprocess(new, 0, dt)
    out = ProbVec(new)
    if return_info:
        return out, StepInfo(flux=float(flux), drift=drift, clamped=clamped)
    return out


def integrate(cfg: OdeConfig, initial_state_override=None) -> Trajectory:
    """Integrate ``cfg`` and sample every ``cfg.sample_every`` time units."""
    p = np.array(
        initial_state_override if initial_state_override is not None
        else initial_state(cfg.initial, cfg.mu, cfg.n_max),
        dtype=float,
    )
    size = cfg.n_max + 1
    n_samples = cfg.n_steps // cfg.steps_per_sample + 1
    extra = cfg.n_steps % cfg.steps_per_sample != 0
    total_samples = n_samples + int(extra)

    times = np.empty(total_samples)
    states = np.empty((total_samples, size))
    fluxes = np.empty(total_samples)
    mean_fluxes = np.empty(total_samples)
    drifts = np.empty(total_samples)
    clamps = np.empty(total_samples)

    stepper = _Stepper(cfg.generator, cfg.mu, size)
    cum_flux = cum_mean_flux = cum_drift = cum_clamp = 0.0
    exit_level = float(size)  # a particle leaving from n_max would sit at n_max + 1
    k = 0

    def record(step):
        times[k] = step * cfg.dt
        states[k] = p
        fluxes[k] = cum_flux
        mean_fluxes[k] = cum_mean_flux
        drifts[k] = cum_drift
        clamps[k] = cum_clamp

    record(0)
    k += 1
    for step in range(1, cfg.n_steps + 1):
        new, flux = stepper.step(p, cfg.dt)
        p, drift, clamped = _postprocess(new, step, step * cfg.dt)
        cum_flux += flux
        cum_mean_flux += exit_level * flux
        cum_drift += abs(drift)
        cum_clamp += clamped
        if step % cfg.steps_per_sample == 0 or step == cfg.n_steps:
            record(step)
            k += 1
    return Trajectory(
        times=times[:k], states=states[:k], fluxes=fluxes[:k], mu=cfg.mu,
        generator=cfg.generator, dt=cfg.dt, mean_fluxes=mean_fluxes[:k],
        drift=drifts[:k], clamped=clamps[:k],
    )


def p0_consistency_report(traj: Trajectory, cfg: OdeConfig | None = None) -> float:
    """Max over samples of ``|p_0(t_k) - closed form|``."""
    generator = cfg.generator if cfg is not None else traj.generator
    mu = cfg.mu if cfg is not None else traj.mu
    if Generator(generator) is not Generator.STICKY:
        raise DomainError("the closed-form p0(t) applies to the sticky generator only")
    exact = p0_closed_form(mu, float(traj.p0[0]), traj.times)
    return float(np.max(np.abs(traj.p0 - exact)))


def observed_order(errors, ratio=2.0):
    """Convergence order from errors at successively refined steps."""
    errors = np.asarray(errors, dtype=float)
    return np.log(errors[:-1] / errors[1:]) / math.log(ratio)
