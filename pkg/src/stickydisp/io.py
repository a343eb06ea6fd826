"""Serialization: run manifests, CSV/JSON series, trajectory files, configs."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dist_core import ProbVec
from .errors import ConfigError
from .ode_engine import Generator, Trajectory

FORMAT_VERSION = 1
TRAJECTORY_VERSION = 1


def _plain(obj):
    """Recursively convert numpy scalars/arrays and enums to JSON types."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    if hasattr(obj, "value") and hasattr(obj, "name"):  # enum
        return obj.value
    return obj


def canonical_json(obj) -> str:
    """Sorted keys, no whitespace, shortest round-trip floats."""
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    tool_version: str
    seed: int | None
    started_at: str | None
    finished_at: str | None = None
    config: dict | None = None
    extra: dict | None = None
    format_version: int = FORMAT_VERSION

    @classmethod
    def start(cls, command, config, seed=None, deterministic=False):
        return cls(
            command=command, config_hash=config_hash(config), tool_version=__version__,
            seed=seed, started_at=None if deterministic else _now(), config=_plain(config),
        )

    def finish(self, deterministic=False, **extra):
        self.finished_at = None if deterministic else _now()
        if extra:
            self.extra = {**(self.extra or {}), **_plain(extra)}
        return self

    def as_dict(self):
        return _plain(asdict(self))


def _fmt(x) -> str:
    """Shortest round-trippable decimal; NaN and infinities as ``nan``/``inf``."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def write_json(path, payload: dict, manifest: RunManifest):
    doc = {"format_version": FORMAT_VERSION, "manifest": manifest.as_dict(), **_plain(payload)}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def write_csv(path, header, rows, manifest: RunManifest | None = None):
    """CSV rows plus a ``<path>.manifest.json`` sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    if manifest is not None:
        sidecar = sidecar_path(path)
        doc = {"format_version": FORMAT_VERSION, "manifest": manifest.as_dict()}
        sidecar.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def read_csv(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], [[float(v) for v in r] for r in rows[1:]]


# -- trajectories ---------------------------------------------------------------

def save_trajectory(path, traj: Trajectory, manifest: RunManifest | None = None):
    """Binary trajectory (``.npz`` container regardless of the file name)."""
    meta = {
        "format_version": TRAJECTORY_VERSION, "mu": traj.mu,
        "generator": Generator(traj.generator).value, "dt": traj.dt,
        "manifest": manifest.as_dict() if manifest else None,
    }
    with open(path, "wb") as fh:
        np.savez_compressed(
            fh, times=traj.times, states=traj.states, fluxes=traj.fluxes,
            mean_fluxes=traj.mean_fluxes, drift=traj.drift, clamped=traj.clamped,
            meta=np.array(json.dumps(_plain(meta))),
        )


def load_trajectory(path) -> Trajectory:
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read trajectory {path}: {exc}") from exc
    with z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != TRAJECTORY_VERSION:
            raise ConfigError(f"unsupported trajectory version {meta.get('format_version')}")
        return Trajectory(
            times=z["times"], states=z["states"], fluxes=z["fluxes"], mu=meta["mu"],
            generator=Generator(meta["generator"]), dt=meta["dt"],
            mean_fluxes=z["mean_fluxes"], drift=z["drift"], clamped=z["clamped"],
        )


def load_probvec(path) -> ProbVec:
    """Read a distribution from JSON (``{"p": [...]}`` or a bare list) or text."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"initial-condition file {path} does not exist")
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        values = np.loadtxt(path, ndmin=1)
    else:
        values = doc.get("p") if isinstance(doc, dict) else doc
        if values is None:
            raise ConfigError(f"{path} has no 'p' array")
    try:
        return ProbVec(np.asarray(values, dtype=float))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path) -> dict:
    """JSON config file; keys are long flag names with dashes or underscores."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"--config file {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("--config must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in doc.items()}
