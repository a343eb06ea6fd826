"""``stickydisp`` command-line driver.

Exit codes: 0 success, 2 configuration error, 3 numerical error.
Every subcommand accepts ``--config FILE`` (JSON object keyed by long flag
names); flags given on the command line override the file.
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings

import numpy as np

from .errors import (ConfigError, ConvergenceError, DomainError, IntegrationError,
                     InvariantError, StickyDispError, TruncationError)

log = logging.getLogger("stickydisp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "simulate": dict(agents=1000, mu=3.0, rule="sticky", events=None, time=None, seed=0,
                     out=None, format="json", snapshot_every=None, allow_self=False,
                     replicas=1, checkpoint=None, resume=None, deterministic=False),
    "integrate": dict(mu=3.0, nmax=200, dt=1e-3, t_end=50.0, sample_every=None,
                      generator="sticky", init="two-point:100", out=None, format="csv",
                      save_trajectory=None, strict_stability=False, deterministic=False),
    "equilibrium": dict(kind=None, mu=3.0, nmax=60, out=None, report=False, deterministic=False),
    "diagnose": dict(input=None, fit=None, window=None, series=None, K=0.2, out=None,
                     deterministic=False),
    "verify": dict(mu=2.5, trials=1000, seed=1, nmax=60, deterministic=False),
}


def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override its entries")
    p.add_argument("--deterministic", action="store_true",
                   help="omit timestamps from the manifest so reruns are byte-identical")
    p.add_argument("-v", "--verbose", action="count", help="more logging")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="stickydisp", argument_default=S,
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", argument_default=S, help="N-agent stochastic simulation")
    _add_common(p)
    p.add_argument("--agents", type=int, help="number of agents N (default 1000)")
    p.add_argument("--mu", type=float, help="mean dollars per agent; M = round(N mu)")
    p.add_argument("--rule", choices=["sticky", "classical"])
    h = p.add_mutually_exclusive_group()
    h.add_argument("--events", type=int, help="stop after this many events")
    h.add_argument("--time", type=float, help="stop at this simulated time")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output file (stdout if omitted)")
    p.add_argument("--format", choices=["csv", "json"])
    p.add_argument("--snapshot-every", type=float, dest="snapshot_every",
                   help="events (with --events) or time units (with --time)")
    p.add_argument("--allow-self", action="store_true", dest="allow_self",
                   help="let an agent pick itself as destination (null move)")
    p.add_argument("--replicas", type=int, help="independent replicas; counts are merged")
    p.add_argument("--checkpoint", help="write a resumable checkpoint at the end")
    p.add_argument("--resume", help="continue from a checkpoint to the given horizon")

    p = sub.add_parser("integrate", argument_default=S, help="RK4 integration of the mean-field ODE")
    _add_common(p)
    p.add_argument("--mu", type=float)
    p.add_argument("--nmax", type=int, help="truncation level (default 200)")
    p.add_argument("--dt", type=float)
    p.add_argument("--t-end", type=float, dest="t_end")
    p.add_argument("--sample-every", type=float, dest="sample_every")
    p.add_argument("--generator", choices=["sticky", "linear", "classical"])
    p.add_argument("--init", help="two-point:N | file:PATH | equilibrium")
    p.add_argument("--out")
    p.add_argument("--format", choices=["csv", "json"])
    p.add_argument("--save-trajectory", dest="save_trajectory", help="binary trajectory file")
    p.add_argument("--strict-stability", action="store_true", dest="strict_stability",
                   help="fail (exit 3) when dt*nmax > 2 instead of warning")

    p = sub.add_parser("equilibrium", argument_default=S, help="emit a closed-form equilibrium")
    _add_common(p)
    p.add_argument("--kind", choices=["bernoulli", "modified-poisson", "classical"])
    p.add_argument("--mu", type=float)
    p.add_argument("--nmax", type=int)
    p.add_argument("--out")
    p.add_argument("--report", action="store_true",
                   help="with --kind classical, include the Lambert-W comparison")

    p = sub.add_parser("diagnose", argument_default=S, help="diagnostics of a saved trajectory")
    _add_common(p)
    p.add_argument("--in", dest="input", help="trajectory written by integrate --save-trajectory")
    p.add_argument("--fit", choices=["power", "exponential"])
    p.add_argument("--window", help="fit window a:b")
    p.add_argument("--series", help="gini, gini_excess, hnorm_sq, l2 or p0")
    p.add_argument("--K", type=float, help="threshold constant (default 0.2)")
    p.add_argument("--out")

    p = sub.add_parser("verify", argument_default=S, help="randomized identity suite")
    _add_common(p)
    p.add_argument("--mu", type=float)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--nmax", type=int)
    return parser


def _settings(args) -> dict:
    from .io import load_config

    given = vars(args).copy()
    cmd = given.pop("command")
    given.pop("verbose", None)
    cfg_path = given.pop("config", None)
    settings = dict(DEFAULTS[cmd])
    if cfg_path:
        file_cfg = load_config(cfg_path)
        unknown = set(file_cfg) - set(settings)
        if unknown:
            raise ConfigError(f"--config has unknown keys: {', '.join(sorted(unknown))}")
        settings.update(file_cfg)
    settings.update(given)
    return settings


def _manifest_config(settings, drop=("out", "deterministic", "checkpoint")):
    return {k: v for k, v in sorted(settings.items()) if k not in drop}


def _emit_json(out, payload, manifest):
    from .io import write_json

    if out:
        write_json(out, payload, manifest)
    else:
        import json

        from .io import FORMAT_VERSION, _plain
        doc = {"format_version": FORMAT_VERSION, "manifest": manifest.as_dict(), **_plain(payload)}
        sys.stdout.write(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _emit_csv(out, header, rows, manifest):
    from .io import _fmt, write_csv

    if out:
        write_csv(out, header, rows, manifest)
    else:
        sys.stdout.write(",".join(header) + "\n")
        for r in rows:
            sys.stdout.write(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in r) + "\n")


# -- simulate ---------------------------------------------------------------------

def cmd_simulate(s) -> int:
    from .io import RunManifest
    from .particle_sim import (Events, SimConfig, Simulator, Time, merge_counts,
                               run_replicas)

    if s["events"] is not None and s["time"] is not None:
        raise ConfigError("give only one of --events and --time")
    if s["events"] is None and s["time"] is None:
        raise ConfigError("one of --events or --time is required")
    horizon = Events(int(s["events"])) if s["events"] is not None else Time(float(s["time"]))
    snap = s["snapshot_every"]
    cfg = SimConfig(n_agents=int(s["agents"]), mu=float(s["mu"]), seed=int(s["seed"]),
                    horizon=horizon, rule=s["rule"], snapshot_every=snap,
                    allow_self=bool(s["allow_self"]))
    if s["replicas"] < 1:
        raise ConfigError("--replicas must be at least 1")
    manifest = RunManifest.start("simulate", _manifest_config(s), cfg.seed, s["deterministic"])

    if s["resume"]:
        sim = Simulator.load_checkpoint(s["resume"])
        if (sim.cfg.n_agents, sim.cfg.m, sim.cfg.rule) != (cfg.n_agents, cfg.m, cfg.rule):
            raise ConfigError("--resume checkpoint does not match --agents/--mu/--rule")
        sim.cfg = cfg
        results = [sim.run()]
        sims = [sim]
    elif s["replicas"] == 1:
        sims = [Simulator(cfg)]
        results = [sims[0].run()]
    else:
        if s["checkpoint"]:
            raise ConfigError("--checkpoint is only supported with --replicas 1")
        sims = []
        results = run_replicas(cfg, int(s["replicas"]))
    if s["checkpoint"]:
        sims[0].save_checkpoint(s["checkpoint"])

    final_counts = merge_counts([r.final.counts for r in results])
    total_agents = cfg.n_agents * len(results)
    absorbed = [bool(r.absorbed) for r in results]
    disp = [r.dispersion_time for r in results]
    manifest.finish(s["deterministic"], absorbed=absorbed if len(absorbed) > 1 else absorbed[0],
                    dispersion_time=disp if len(disp) > 1 else disp[0], rng="philox4x64-10",
                    M=cfg.m)

    series = []
    for k, r in enumerate(results):
        for sn in r.snapshots:
            series.append((k, sn.event_count, sn.sim_time, sn.gini))
    final = {
        "counts": final_counts.tolist(),
        "fraction": (final_counts / total_agents).tolist(),
    }
    if s["format"] == "json":
        payload = {
            "snapshots": [
                {"replica": k, "event_count": r.snapshots[i].event_count,
                 "sim_time": r.snapshots[i].sim_time, "gini": r.snapshots[i].gini,
                 "counts": r.snapshots[i].counts.tolist()}
                for k, r in enumerate(results) for i in range(len(r.snapshots))
            ],
            "final": final, "absorbed": absorbed, "dispersion_time": disp,
        }
        _emit_json(s["out"], payload, manifest)
    else:
        _emit_csv(s["out"], ["replica", "event_count", "sim_time", "gini"], series, manifest)
        if s["out"]:
            from .io import write_csv
            rows = [(n, int(c), float(c / total_agents)) for n, c in enumerate(final_counts)]
            write_csv(str(s["out"]) + ".final.csv", ["n", "count", "fraction"], rows)
    for k, a in enumerate(absorbed):
        if a:
            log.info("replica %d absorbed at t=%.6g", k, disp[k])
    return EXIT_OK


# -- integrate ----------------------------------------------------------------------

def parse_init(spec, mu, n_max, generator):
    from .dist_core import EquilibriumSpec
    from .io import load_probvec
    from .ode_engine import Equilibrium, Explicit, Generator, TwoPoint

    if spec.startswith("two-point:"):
        try:
            n = int(spec.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"--init {spec}: spike level must be an integer") from exc
        return TwoPoint(n)
    if spec.startswith("file:"):
        pv = load_probvec(spec.split(":", 1)[1])
        if pv.n_max > n_max:
            raise ConfigError(f"--init file has n_max={pv.n_max} > --nmax {n_max}")
        if abs(pv.mean - mu) > 1e-8 and Generator(generator) is not Generator.LINEAR_HAT:
            raise ConfigError(f"--init file has mean {pv.mean:.12g}, but --mu is {mu}")
        return Explicit(pv)
    if spec == "equilibrium":
        return Equilibrium(EquilibriumSpec.for_mu(mu, classical=Generator(generator) is Generator.CLASSICAL_L))
    raise ConfigError(f"--init must be two-point:N, file:PATH or equilibrium, got {spec!r}")


def cmd_integrate(s) -> int:
    from .diagnostics import SERIES_FIELDS, time_series
    from .io import RunManifest, save_trajectory
    from .ode_engine import (Generator, OdeConfig, StabilityWarning, integrate,
                             p0_consistency_report, suggested_dt)

    mu, n_max, dt = float(s["mu"]), int(s["nmax"]), float(s["dt"])
    gen = Generator(s["generator"])
    if s["strict_stability"] and dt * n_max > 2:
        raise IntegrationError(
            f"--dt {dt} with --nmax {n_max} gives dt*nmax = {dt * n_max:.3g} > 2; "
            f"use --dt {suggested_dt(n_max):.3g} or smaller")
    init = parse_init(s["init"], mu, n_max, gen)
    sample = s["sample_every"]
    if sample is None:
        sample = min(float(s["t_end"]), max(dt, 0.1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StabilityWarning)
        cfg = OdeConfig(mu=mu, t_end=float(s["t_end"]), initial=init, n_max=n_max, dt=dt,
                        sample_every=float(sample), generator=gen)
    if not cfg.stable():
        log.warning("dt*nmax = %.3g > 2; RK4 may be unstable (suggested --dt %.3g)",
                    dt * n_max, suggested_dt(n_max))
    manifest = RunManifest.start("integrate", _manifest_config(s, ("out", "deterministic", "save_trajectory")),
                                 None, s["deterministic"])
    try:
        traj = integrate(cfg)
    except IntegrationError as exc:
        smaller = min(suggested_dt(n_max), dt / 2)
        raise IntegrationError(f"{exc}; suggested --dt {smaller:.3g}", exc.step, exc.time) from exc
    records = time_series(traj)
    extra = {"total_boundary_flux": float(traj.fluxes[-1]), "total_drift": float(traj.drift[-1]),
             "total_clamped": float(traj.clamped[-1])}
    if gen is Generator.STICKY:
        extra["p0_max_deviation"] = p0_consistency_report(traj, cfg)
    manifest.finish(s["deterministic"], **extra)
    if s["save_trajectory"]:
        save_trajectory(s["save_trajectory"], traj, manifest)
    rows = [r.as_row() for r in records]
    if s["format"] == "json":
        _emit_json(s["out"], {"series": {f: [row[i] for row in rows] for i, f in enumerate(SERIES_FIELDS)},
                              "final": traj.states[-1].tolist()}, manifest)
    else:
        _emit_csv(s["out"], list(SERIES_FIELDS), rows, manifest)
    return EXIT_OK


# -- equilibrium ----------------------------------------------------------------------

def cmd_equilibrium(s) -> int:
    from .dist_core import EquilibriumKind, EquilibriumSpec, classical_discrepancy_report
    from .io import RunManifest

    mu, n_max = float(s["mu"]), int(s["nmax"])
    if s["kind"] is None:
        spec = EquilibriumSpec.for_mu(mu)
    else:
        try:
            spec = EquilibriumSpec(EquilibriumKind(s["kind"]), mu)
        except DomainError as exc:
            raise ConfigError(f"--kind {s['kind']} with --mu {mu}: {exc}") from exc
    p = spec.build(n_max)
    payload = {"kind": spec.kind.value, "mu": mu, "n_max": n_max, "mean": p.mean, "p": p.values}
    if s["report"]:
        if spec.kind is not EquilibriumKind.CLASSICAL_L:
            raise ConfigError("--report applies to --kind classical only")
        payload["lambert_w_report"] = classical_discrepancy_report(mu, n_max).as_dict()
    manifest = RunManifest.start("equilibrium", _manifest_config(s), None, s["deterministic"])
    manifest.finish(s["deterministic"])
    _emit_json(s["out"], payload, manifest)
    return EXIT_OK


# -- diagnose ---------------------------------------------------------------------------

def _parse_window(text):
    try:
        a, b = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"--window must look like a:b, got {text!r}") from exc
    return a, b


def cmd_diagnose(s) -> int:
    from dataclasses import asdict

    from .diagnostics import fit_decay, series_column, threshold_times, time_series
    from .io import RunManifest, load_trajectory
    from .ode_engine import Generator

    if not s["input"]:
        raise ConfigError("--in is required")
    traj = load_trajectory(s["input"])
    records = time_series(traj)
    payload = {"mu": traj.mu, "generator": Generator(traj.generator).value,
               "n_samples": len(traj), "t_end": float(traj.times[-1])}
    if Generator(traj.generator) is Generator.STICKY and traj.mu <= 1:
        payload["threshold_times"] = asdict(threshold_times(traj, K=float(s["K"])))
        payload["threshold_times_closed_form"] = asdict(
            threshold_times(traj, K=float(s["K"]), method="closed_form"))
    if s["fit"]:
        name = s["series"] or ("gini" if traj.mu <= 1 else "hnorm_sq")
        if name == "gini_excess":
            y = series_column(records, "gini") - max(1.0 - traj.mu, 0.0)
        else:
            try:
                y = series_column(records, name)
            except KeyError as exc:
                raise ConfigError(f"--series {name!r} is not a known series") from exc
        window = _parse_window(s["window"]) if s["window"] else None
        try:
            fit = fit_decay(traj.times, y, s["fit"], window)
        except DomainError as exc:
            raise ConfigError(f"--fit/--window: {exc}") from exc
        payload["series"] = name
        payload["fit"] = fit.as_dict()
    manifest = RunManifest.start("diagnose", _manifest_config(s), None, s["deterministic"])
    manifest.finish(s["deterministic"])
    _emit_json(s["out"], payload, manifest)
    return EXIT_OK


# -- verify -------------------------------------------------------------------------------

def verification_suite(mu, trials, seed, n_max=60):
    """Run the randomized identity checks; returns ``[(name, max_error, tol, passed)]``."""
    from . import diagnostics as dg
    from . import operators as op
    from .dist_core import random_probvec

    rng = np.random.default_rng(seed)
    ctx = op.OperatorContext(mu, n_max)
    worst = {}

    def record(name, err, tol):
        prev = worst.get(name, (0.0, tol))
        worst[name] = (max(prev[0], err), tol)

    for _ in range(trials):
        p = random_probvec(rng, n_max, mu).values
        q, flux = op.q_apply(p, ctx, return_flux=True)
        record("mass conservation sum Q = -flux", abs(q.sum() + flux), 1e-12)
        mean_rate = np.arange(n_max + 1) @ q
        record("mean conservation n.Q = -(n_max+1) flux", abs(mean_rate + (n_max + 1) * flux), 1e-10)
        record("Q vs Q-general", float(np.max(np.abs(q - op.q_apply_general(p)))), 1e-12)
        record("gini CDF vs pairwise", abs(dg.gini(p) - dg.gini_pairwise(p)), 1e-12)
        if mu > 1:
            qh = op.qhat_apply(p, ctx)
            record("decomposition Q = Qhat - p0 D-",
                   float(np.max(np.abs(q - (qh - p[0] * op.dminus_apply(p))))), 1e-12)
            record("Qhat Fokker-Planck form",
                   float(np.max(np.abs(qh - op.qhat_fokker_planck(p, ctx)))), 1e-12)
            res = op.fk_nonlinear_residuals(p, ctx)
            record("nonlinear Fokker-Planck form (effective prefactor)", res["effective"], 1e-12)
            pc = dg.poincare_check(p, mu)
            record("weak Poincare violation", 0.0 if pc.holds else pc.lhs - pc.rhs, 0.0)
        else:
            ob = dg.observation_bounds(p, mu)
            record("observation bounds violation", 0.0 if ob.holds else 1.0, 0.0)
    return [(name, err, tol, err <= tol) for name, (err, tol) in worst.items()]


def cmd_verify(s) -> int:
    mu, trials = float(s["mu"]), int(s["trials"])
    if not mu > 0:
        raise ConfigError(f"--mu must be positive, got {mu}")
    if trials < 1:
        raise ConfigError("--trials must be at least 1")
    n_max = int(s["nmax"])
    if not mu < n_max:
        raise ConfigError(f"--mu must be below --nmax {n_max}")
    rows = verification_suite(mu, trials, int(s["seed"]), n_max)
    width = max(len(r[0]) for r in rows)
    print(f"{'identity':<{width}}  {'max error':>10}  {'tol':>8}  result")
    for name, err, tol, ok in rows:
        print(f"{name:<{width}}  {err:10.3e}  {tol:8.1e}  {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if all(r[3] for r in rows) else 1


COMMANDS = {"simulate": cmd_simulate, "integrate": cmd_integrate, "equilibrium": cmd_equilibrium,
            "diagnose": cmd_diagnose, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    verbose = getattr(args, "verbose", 0) or 0
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        settings = _settings(args)
        return COMMANDS[args.command](settings)
    except (TruncationError, ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrationError, ConvergenceError, InvariantError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StickyDispError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: invalid configuration value: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
