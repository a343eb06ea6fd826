"""Exact event-driven simulation of the N-agent dispersion process.

The hot loop is a numba kernel. Source vertices are drawn from a Fenwick
(binary indexed) tree over integer rates, so one event costs O(log N).

Randomness comes from numpy's Philox 4x64-10 counter-based generator, whose
raw 64-bit stream is fixed across platforms and numpy releases. All
variates are derived from raw words inside the kernel:

* uniform on [0, 1): ``(word >> 11) * 2**-53``
* integer on [0, m): rejection sampling on ``word >> 1``, exact for any m
* waiting time: ``-log1p(-u) / rate``

Words are consumed in the same order regardless of buffer size, so a run is
fully determined by its seed and configuration.
"""
from __future__ import annotations

import enum
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numba
import numpy as np

from .dist_core import ProbVec
from .errors import Absorbed, ConfigError, InvariantError, StickyDispError

logger = logging.getLogger(__name__)

RNG_NAME = "philox4x64-10"
CHECKPOINT_VERSION = 1
BUFFER_WORDS = 1 << 15
WORKERS_ENV = "STICKYDISP_WORKERS"

# kernel status codes
_DONE, _ABSORBED, _TIME_REACHED, _NEED_REFILL = 0, 1, 2, 3
_MAX63 = np.int64(2**63 - 1)


class Rule(enum.Enum):
    STICKY = "sticky"
    CLASSICAL = "classical"


_RULE_CODE = {Rule.STICKY: 0, Rule.CLASSICAL: 1}


# -- numba kernels --------------------------------------------------------------

@numba.njit(cache=True)
def _weight(x, rule):
    if rule == 0:
        return x - 1 if x > 1 else 0
    return x if x > 1 else 0


@numba.njit(cache=True)
def _weights(holdings, rule):
    out = np.empty(holdings.size, dtype=np.int64)
    for i in range(holdings.size):
        out[i] = _weight(holdings[i], rule)
    return out


@numba.njit(cache=True)
def _fenwick_build(w):
    n = w.size
    tree = np.zeros(n + 1, dtype=np.int64)
    for k in range(1, n + 1):
        tree[k] += w[k - 1]
        parent = k + (k & -k)
        if parent <= n:
            tree[parent] += tree[k]
    return tree


@numba.njit(cache=True)
def _fenwick_add(tree, i, delta):
    n = tree.size - 1
    k = i + 1
    while k <= n:
        tree[k] += delta
        k += k & -k


@numba.njit(cache=True)
def _fenwick_find(tree, r):
    """Smallest 0-based index whose inclusive prefix sum exceeds ``r``."""
    n = tree.size - 1
    step = 1
    while step * 2 <= n:
        step *= 2
    pos = 0
    while step > 0:
        nxt = pos + step
        if nxt <= n and tree[nxt] <= r:
            pos = nxt
            r -= tree[nxt]
        step //= 2
    return pos


@numba.njit(cache=True)
def _uniform_int(buf, pos, bound):
    """Exact uniform integer on [0, bound); returns (-1, pos) if words run out."""
    lim = (_MAX63 // bound) * bound
    while pos < buf.size:
        x = np.int64(buf[pos] >> np.uint64(1))
        pos += 1
        if x < lim:
            return x % bound, pos
    return -1, pos


@numba.njit(cache=True)
def _uniform01(word):
    return np.float64(word >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _kernel(x, tree, total, occupied, rule, allow_self, buf, pos, max_events, t, t_limit):
    """Run up to ``max_events`` events or until ``t_limit``.

    Returns ``(status, events, pos, total, occupied, t)``. State is only
    modified by completed events, so a refill request can resume exactly.
    """
    n = x.size
    m = n if allow_self else n - 1
    done = 0
    while done < max_events:
        if total == 0:
            return _ABSORBED, done, pos, total, occupied, t
        start = pos
        if pos >= buf.size:
            return _NEED_REFILL, done, pos, total, occupied, t
        u = _uniform01(buf[pos])
        pos += 1
        dt = -np.log1p(-u) / total
        if t + dt > t_limit:
            return _TIME_REACHED, done, pos, total, occupied, t
        r, pos = _uniform_int(buf, pos, total)
        if r < 0:
            return _NEED_REFILL, done, start, total, occupied, t
        i = _fenwick_find(tree, r)
        d, pos = _uniform_int(buf, pos, m)
        if d < 0:
            return _NEED_REFILL, done, start, total, occupied, t
        if allow_self:
            j = d
        else:
            j = d + 1 if d >= i else d
        t += dt
        done += 1
        if j == i:
            continue
        old = _weight(x[i], rule)
        x[i] -= 1
        delta = _weight(x[i], rule) - old
        if x[i] == 0:
            occupied -= 1
        if delta != 0:
            _fenwick_add(tree, i, delta)
            total += delta
        if x[j] == 0:
            occupied += 1
        old = _weight(x[j], rule)
        x[j] += 1
        delta = _weight(x[j], rule) - old
        if delta != 0:
            _fenwick_add(tree, j, delta)
            total += delta
    return _DONE, done, pos, total, occupied, t


# -- random stream ------------------------------------------------------------

class EventRNG:
    """Buffered raw 64-bit words from a Philox generator."""

    def __init__(self, seed=None, *, bit_generator=None, buffer_words=BUFFER_WORDS):
        if bit_generator is None:
            seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
            bit_generator = np.random.Philox(seq)
        self.bitgen = bit_generator
        self.buffer_words = buffer_words
        self.buf = np.empty(0, dtype=np.uint64)
        self.pos = 0

    def refill(self):
        fresh = self.bitgen.random_raw(self.buffer_words)
        self.buf = np.concatenate((self.buf[self.pos:], fresh))
        self.pos = 0

    def state_dict(self):
        return {"bitgen": self.bitgen.state, "leftover": self.buf[self.pos:].copy()}

    @classmethod
    def from_state(cls, state, buffer_words=BUFFER_WORDS):
        bg = np.random.Philox()
        bg.state = state["bitgen"]
        rng = cls(bit_generator=bg, buffer_words=buffer_words)
        rng.buf = np.asarray(state["leftover"], dtype=np.uint64).copy()
        return rng


# -- state and configuration ----------------------------------------------------

class AgentState:
    """Integer holdings with cached total ``M`` and number of occupied vertices."""

    __slots__ = ("holdings", "total", "occupied_count")

    def __init__(self, holdings):
        h = np.array(holdings, dtype=np.int64)
        if h.ndim != 1 or h.size < 2:
            raise ConfigError("need a 1-D holdings vector with at least two agents")
        if np.any(h < 0):
            raise ConfigError("holdings must be non-negative")
        self.holdings = h
        self.total = int(h.sum())
        self.occupied_count = int(np.count_nonzero(h))

    @classmethod
    def single_vertex(cls, n_agents, m):
        h = np.zeros(n_agents, dtype=np.int64)
        h[0] = m
        return cls(h)

    @property
    def n_agents(self):
        return self.holdings.size

    def copy(self):
        return AgentState(self.holdings)

    def counts(self) -> np.ndarray:
        """Number of agents holding ``n`` dollars, ``n = 0..max`` (at least two bins)."""
        return np.bincount(self.holdings, minlength=2)

    def check(self, rule, total_rate_cached=None, m=None):
        """Recompute the cached quantities and raise on any mismatch."""
        h = self.holdings
        if m is not None and int(h.sum()) != m:
            raise InvariantError(f"sum of holdings {int(h.sum())} != M = {m}")
        if int(h.sum()) != self.total:
            raise InvariantError("cached total is stale")
        if int(np.count_nonzero(h)) != self.occupied_count:
            raise InvariantError("cached occupied count is stale")
        naive = total_rate(self, rule, naive=True)
        if Rule(rule) is Rule.STICKY and naive != self.total - self.occupied_count:
            raise InvariantError(f"sticky rate {naive} != M - occupied {self.total - self.occupied_count}")
        if total_rate_cached is not None and total_rate_cached != naive:
            raise InvariantError(f"tree total {total_rate_cached} != recomputed rate {naive}")


@dataclass(frozen=True)
class Events:
    count: int


@dataclass(frozen=True)
class Time:
    t_end: float


@dataclass
class SimConfig:
    """Particle-simulation parameters.

    ``snapshot_every`` counts events for an :class:`Events` horizon and
    simulated time for a :class:`Time` horizon. ``initial`` is ``None`` for
    all money on agent 0, or an explicit :class:`AgentState`.
    """

    n_agents: int
    mu: float
    seed: int
    horizon: Events | Time
    rule: Rule = Rule.STICKY
    snapshot_every: float | None = None
    initial: AgentState | None = None
    allow_self: bool = False
    check_invariants: bool = True

    def __post_init__(self):
        self.rule = Rule(self.rule)
        if self.n_agents < 2:
            raise ConfigError(f"--agents must be at least 2, got {self.n_agents}")
        if not self.mu > 0:
            raise ConfigError(f"--mu must be positive, got {self.mu}")
        if self.m < 1:
            raise ConfigError(f"M = round(N*mu) = {self.m} must be at least 1")
        if isinstance(self.horizon, Events):
            if self.horizon.count < 0:
                raise ConfigError("event count must be non-negative")
            if self.snapshot_every is None:
                self.snapshot_every = max(self.horizon.count, 1)
            if int(self.snapshot_every) != self.snapshot_every or self.snapshot_every < 1:
                raise ConfigError("--snapshot-every must be a positive integer event count")
            self.snapshot_every = int(self.snapshot_every)
        elif isinstance(self.horizon, Time):
            if not self.horizon.t_end > 0:
                raise ConfigError("time horizon must be positive")
            if self.snapshot_every is None:
                self.snapshot_every = self.horizon.t_end
            if not self.snapshot_every > 0:
                raise ConfigError("--snapshot-every must be positive")
        else:
            raise ConfigError(f"unknown horizon {self.horizon!r}")
        if self.initial is not None:
            if self.initial.n_agents != self.n_agents:
                raise ConfigError("initial state has the wrong number of agents")
            if self.initial.total != self.m:
                raise ConfigError(f"initial state holds {self.initial.total} dollars, expected {self.m}")

    @property
    def m(self):
        return int(round(self.n_agents * self.mu))

    def initial_state(self) -> AgentState:
        if self.initial is not None:
            return self.initial.copy()
        return AgentState.single_vertex(self.n_agents, self.m)

    def as_dict(self):
        d = {
            "n_agents": self.n_agents, "mu": self.mu, "seed": self.seed, "rule": self.rule.value,
            "snapshot_every": self.snapshot_every, "allow_self": self.allow_self,
        }
        if isinstance(self.horizon, Events):
            d["events"] = self.horizon.count
        else:
            d["time"] = self.horizon.t_end
        d["initial"] = None if self.initial is None else self.initial.holdings.tolist()
        return d


@dataclass
class Snapshot:
    event_count: int
    sim_time: float
    counts: np.ndarray
    empirical_dist: ProbVec
    gini: float


@dataclass
class SimResult:
    config: SimConfig
    snapshots: list = field(default_factory=list)
    final_state: AgentState | None = None
    absorbed: bool = False
    dispersion_time: float | None = None

    @property
    def final(self) -> Snapshot:
        return self.snapshots[-1]


# -- public operations ------------------------------------------------------------

def total_rate(s: AgentState, rule, naive=False) -> int:
    """Total jump rate: ``M - occupied`` (sticky) or ``sum_{X_i >= 2} X_i`` (classical)."""
    rule = Rule(rule)
    h = s.holdings
    if rule is Rule.STICKY:
        if naive:
            return int(np.maximum(h - 1, 0).sum())
        return s.total - s.occupied_count
    return int(h[h >= 2].sum())


def _empirical(counts, n_agents):
    from .diagnostics import gini

    dist = counts / n_agents
    return ProbVec(dist), gini(dist)


def snapshot(s: AgentState, events, t) -> Snapshot:
    counts = s.counts()
    dist, g = _empirical(counts, s.n_agents)
    return Snapshot(int(events), float(t), counts, dist, g)


def _as_rng(rng):
    if isinstance(rng, EventRNG):
        return rng
    return EventRNG(rng)


def sample_source(s: AgentState, rng, rule) -> int:
    """Draw a source vertex with probability proportional to its rate."""
    rule = Rule(rule)
    rng = _as_rng(rng)
    w = _weights(s.holdings, _RULE_CODE[rule])
    tree = _fenwick_build(w)
    total = int(w.sum())
    if total == 0:
        raise Absorbed("no vertex has a positive rate")
    while True:
        r, pos = _uniform_int(rng.buf, rng.pos, total)
        if r >= 0:
            rng.pos = pos
            return int(_fenwick_find(tree, r))
        rng.refill()


def step_ctmc(s: AgentState, rng, rule, allow_self=False):
    """One event of the chain; returns ``(new_state, dt)``.

    Raises
    ------
    Absorbed
        If the total rate is zero.
    """
    rule = Rule(rule)
    rng = _as_rng(rng)
    x = s.holdings.copy()
    code = _RULE_CODE[rule]
    w = _weights(x, code)
    tree = _fenwick_build(w)
    total, occupied = int(w.sum()), s.occupied_count
    while True:
        status, done, pos, total, occupied, t = _kernel(
            x, tree, total, occupied, code, allow_self, rng.buf, rng.pos, 1, 0.0, np.inf)
        rng.pos = pos
        if status == _NEED_REFILL:
            rng.refill()
            continue
        if status == _ABSORBED:
            raise Absorbed("total rate is zero")
        return AgentState(x), float(t)


class Simulator:
    """Resumable run of one configuration."""

    def __init__(self, cfg: SimConfig, state: AgentState | None = None, rng: EventRNG | None = None,
                 events=0, time=0.0):
        self.cfg = cfg
        self.state = cfg.initial_state() if state is None else state
        self.rng = EventRNG(np.random.SeedSequence(cfg.seed)) if rng is None else rng
        self.events = int(events)
        self.time = float(time)
        self.code = _RULE_CODE[cfg.rule]
        self.tree = _fenwick_build(_weights(self.state.holdings, self.code))
        self.rate = int(self.tree_total())
        self.absorbed = self.rate == 0
        self.dispersion_time = self.time if self.absorbed else None

    def tree_total(self):
        return int(_weights(self.state.holdings, self.code).sum())

    def _advance(self, max_events, t_limit):
        st = self.state
        while max_events > 0 and not self.absorbed:
            status, done, pos, total, occ, t = _kernel(
                st.holdings, self.tree, self.rate, st.occupied_count, self.code,
                self.cfg.allow_self, self.rng.buf, self.rng.pos, max_events, self.time, t_limit,
            )
            self.rng.pos = pos
            self.rate, st.occupied_count, self.time = int(total), int(occ), float(t)
            self.events += int(done)
            max_events -= int(done)
            if status == _NEED_REFILL:
                self.rng.refill()
            elif status == _ABSORBED:
                self.absorbed = True
                self.dispersion_time = self.time
            elif status == _TIME_REACHED:
                self.time = float(t_limit)
                return
        if self.rate == 0 and not self.absorbed:
            self.absorbed = True
            self.dispersion_time = self.time

    def check(self):
        self.state.check(self.cfg.rule, self.rate, self.cfg.m)

    def snapshot(self) -> Snapshot:
        if self.cfg.check_invariants:
            self.check()
        return snapshot(self.state, self.events, self.time)

    def run(self, stop_after_snapshots=None) -> SimResult:
        """Run to the horizon (or absorption), snapshotting on the schedule.

        ``stop_after_snapshots`` pauses after that many new snapshots so the
        run can be checkpointed and resumed.
        """
        cfg = self.cfg
        result = SimResult(cfg)
        if self.events == 0 and self.time == 0.0:
            result.snapshots.append(self.snapshot())
        taken = 0
        while not self._finished():
            if stop_after_snapshots is not None and taken >= stop_after_snapshots:
                break
            if isinstance(cfg.horizon, Events):
                target = min(self.events + cfg.snapshot_every - self.events % cfg.snapshot_every,
                             cfg.horizon.count)
                self._advance(target - self.events, np.inf)
            else:
                k = int(np.floor(self.time / cfg.snapshot_every + 1e-12)) + 1
                target = min(k * cfg.snapshot_every, cfg.horizon.t_end)
                self._advance(np.iinfo(np.int64).max, target)
            result.snapshots.append(self.snapshot())
            taken += 1
        result.final_state = self.state.copy()
        result.absorbed = self.absorbed
        result.dispersion_time = self.dispersion_time
        return result

    def _finished(self):
        if self.absorbed:
            return True
        if isinstance(self.cfg.horizon, Events):
            return self.events >= self.cfg.horizon.count
        return self.time >= self.cfg.horizon.t_end

    # -- checkpoints --

    def save_checkpoint(self, path):
        """Write a version-tagged ``.npz`` that :meth:`load_checkpoint` resumes exactly."""
        rng_state = self.rng.state_dict()
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "rng": RNG_NAME,
            "config": self.cfg.as_dict(),
            "events": self.events,
            "time": self.time,
            "bitgen": _jsonable(rng_state["bitgen"]),
        }
        with open(path, "wb") as fh:
            np.savez(fh, holdings=self.state.holdings, leftover=rng_state["leftover"],
                     meta=np.array(json.dumps(meta)))

    @classmethod
    def load_checkpoint(cls, path) -> "Simulator":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            holdings = z["holdings"]
            leftover = z["leftover"]
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('format_version')}")
        if meta.get("rng") != RNG_NAME:
            raise ConfigError(f"checkpoint uses generator {meta.get('rng')}, expected {RNG_NAME}")
        cfg = config_from_dict(meta["config"])
        rng = EventRNG.from_state({"bitgen": _from_jsonable(meta["bitgen"]), "leftover": leftover})
        return cls(cfg, AgentState(holdings), rng, meta["events"], meta["time"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": [int(v) for v in obj.ravel()], "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["__array__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


def config_from_dict(d) -> SimConfig:
    horizon = Events(int(d["events"])) if "events" in d else Time(float(d["time"]))
    initial = AgentState(d["initial"]) if d.get("initial") is not None else None
    return SimConfig(
        n_agents=int(d["n_agents"]), mu=float(d["mu"]), seed=int(d["seed"]), horizon=horizon,
        rule=Rule(d.get("rule", "sticky")), snapshot_every=d.get("snapshot_every"),
        initial=initial, allow_self=bool(d.get("allow_self", False)),
    )


def run(cfg: SimConfig) -> SimResult:
    """Simulate ``cfg`` from its initial state to the horizon."""
    return Simulator(cfg).run()


def replica_config(cfg: SimConfig, index: int) -> SimConfig:
    """Configuration of replica ``index``: same parameters, independent stream."""
    seq = np.random.SeedSequence([cfg.seed, index])
    return replace(cfg, seed=int(seq.generate_state(2, np.uint64)[0] >> np.uint64(1)))


def worker_count(default=1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be at least 1")
    return n


def run_replicas(cfg: SimConfig, n_replicas: int, workers=None) -> list[SimResult]:
    """Independent replicas in index order; parallel over processes if ``workers > 1``."""
    cfgs = [replica_config(cfg, i) for i in range(n_replicas)]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or n_replicas <= 1:
        return [run(c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, cfgs))


def merge_counts(count_arrays) -> np.ndarray:
    """Bin-wise sum of count vectors of any lengths (associative and commutative)."""
    arrays = list(count_arrays)
    if not arrays:
        raise StickyDispError("nothing to merge")
    size = max(a.size for a in arrays)
    out = np.zeros(size, dtype=np.int64)
    for a in arrays:
        out[: a.size] += a
    return out


def tv_distance(p, q) -> float:
    """Total-variation distance; the shorter vector is zero-padded."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    size = max(p.size, q.size)
    pp, qq = np.zeros(size), np.zeros(size)
    pp[: p.size], qq[: q.size] = p, q
    return 0.5 * float(np.abs(pp - qq).sum())
