"""Run configuration: schema, validation, defaults, canonical digest.

Configs are JSON files with sections (geometry, grid, model, evolution,
ensemble, output, experiments).  Every section except the master seed has
defaults; the seed is mandatory because runs must be reproducible from the
config alone.  The digest is a stable hash of the normalized content minus
the output directory, so moving a run elsewhere keeps its identity.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

from .geometry import GeometryParams, SpatialGrid

SCHEMA_VERSION = 1

PROFILE_TAGS = ("default", "conjugate")

EXPERIMENT_NAMES = ("audit", "equivariance", "bell-compare", "geodesics",
                    "foliation", "counting", "reversibility")


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


@dataclass(frozen=True)
class RunConfig:
    mass_parameter: float
    charge: float
    hbar: float
    fermion_mass: float
    n_radial_cells: int
    r_max: float
    n_theta: int
    n_phi: int
    n_max: int
    boundary_profile: str
    dt: float
    horizon: float
    solver_rtol: float
    n_traj: int
    master_seed: int
    checkpoint_times: Tuple[float, ...]
    output_dir: Optional[str]
    experiments: Tuple[str, ...]

    def geometry(self) -> GeometryParams:
        return GeometryParams(mass_parameter=self.mass_parameter,
                              charge=self.charge, hbar=self.hbar,
                              fermion_mass=self.fermion_mass)

    def grid(self) -> SpatialGrid:
        return SpatialGrid.build(self.n_radial_cells, self.r_max,
                                 self.n_theta, self.n_phi)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "geometry": {"mass_parameter": self.mass_parameter,
                         "charge": self.charge, "hbar": self.hbar,
                         "fermion_mass": self.fermion_mass},
            "grid": {"n_radial_cells": self.n_radial_cells,
                     "r_max": self.r_max, "n_theta": self.n_theta,
                     "n_phi": self.n_phi},
            "model": {"n_max": self.n_max,
                      "boundary_profile": self.boundary_profile},
            "evolution": {"dt": self.dt, "horizon": self.horizon,
                          "solver_rtol": self.solver_rtol},
            "ensemble": {"n_traj": self.n_traj,
                         "master_seed": self.master_seed,
                         "checkpoint_times": list(self.checkpoint_times)},
            "output": {"directory": self.output_dir},
            "experiments": list(self.experiments),
        }

    def digest(self) -> str:
        """12-hex identity of the run content (output location excluded)."""
        d = self.to_dict()
        d["output"] = {}
        blob = canonical_json(d).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def replace(self, **kw) -> "RunConfig":
        d = {**self.__dict__, **kw}
        return RunConfig(**d)


def canonical_json(obj) -> str:
    """Key-sorted, minimal-separator JSON; floats keep full precision."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


_DEFAULTS = {
    "geometry": {"mass_parameter": 1.0, "charge": 2.0, "hbar": 1.0,
                 "fermion_mass": 0.0},
    "grid": {"n_radial_cells": 16, "r_max": 2.0, "n_theta": 2, "n_phi": 4},
    "model": {"n_max": 2, "boundary_profile": "default"},
    "evolution": {"dt": 0.005, "horizon": 0.25, "solver_rtol": 3e-12},
    "ensemble": {"n_traj": 1000, "checkpoint_times": []},
    "output": {"directory": None},
}


def _need(section: dict, key: str, kind, where: str):
    v = section[key]
    if kind is float:
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ConfigError(f"{where}.{key}: expected a number, got {v!r}")
        return float(v)
    if kind is int:
        if not isinstance(v, int) or isinstance(v, bool):
            raise ConfigError(f"{where}.{key}: expected an integer, got {v!r}")
        return v
    return v


def from_dict(data: dict, source: str = "<dict>") -> RunConfig:
    """Validate and fill defaults; raises ConfigError with field paths."""
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be an object")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{source}: unsupported schema_version {version}")

    known = {"schema_version", "geometry", "grid", "model", "evolution",
             "ensemble", "output", "experiments"}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"{source}: unknown section(s) {sorted(extra)}")

    merged = {}
    for sec, defaults in _DEFAULTS.items():
        given = data.get(sec, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{source}.{sec}: must be an object")
        bad = set(given) - set(defaults) - ({"master_seed", "n_traj"}
                                            if sec == "ensemble" else set())
        if bad:
            raise ConfigError(f"{source}.{sec}: unknown key(s) {sorted(bad)}")
        merged[sec] = {**defaults, **given}

    geo, grd = merged["geometry"], merged["grid"]
    mdl, evo, ens = merged["model"], merged["evolution"], merged["ensemble"]

    mass = _need(geo, "mass_parameter", float, "geometry")
    charge = _need(geo, "charge", float, "geometry")
    if abs(charge) <= abs(mass):
        raise ConfigError(
            "geometry: requires |charge| > |mass_parameter| so the radial "
            "factor stays positive all the way to r = 0")

    k = _need(grd, "n_radial_cells", int, "grid")
    if k < 3:
        raise ConfigError("grid.n_radial_cells: need at least 3 cells")
    r_max = _need(grd, "r_max", float, "grid")
    if r_max <= 0:
        raise ConfigError("grid.r_max: must be positive")
    nt = _need(grd, "n_theta", int, "grid")
    np_ = _need(grd, "n_phi", int, "grid")
    if nt < 2 or np_ < 3:
        raise ConfigError("grid: need n_theta >= 2 and n_phi >= 3")

    n_max = _need(mdl, "n_max", int, "model")
    if n_max not in (1, 2):
        raise ConfigError("model.n_max: supported values are 1 and 2")
    tag = mdl["boundary_profile"]
    if tag not in PROFILE_TAGS:
        raise ConfigError(f"model.boundary_profile: one of {PROFILE_TAGS}")

    dt = _need(evo, "dt", float, "evolution")
    horizon = _need(evo, "horizon", float, "evolution")
    rtol = _need(evo, "solver_rtol", float, "evolution")
    if dt <= 0 or horizon < 0 or rtol <= 0:
        raise ConfigError("evolution: dt and solver_rtol must be positive, "
                          "horizon nonnegative")

    if "master_seed" not in ens:
        raise ConfigError("ensemble.master_seed: required, runs must be "
                          "reproducible from the config alone")
    seed = _need(ens, "master_seed", int, "ensemble")
    if seed < 0:
        raise ConfigError("ensemble.master_seed: must be nonnegative")
    n_traj = _need({**{"n_traj": 1000}, **ens}, "n_traj", int, "ensemble")
    if n_traj < 1:
        raise ConfigError("ensemble.n_traj: must be at least 1")
    cps = ens.get("checkpoint_times", [])
    if not isinstance(cps, (list, tuple)):
        raise ConfigError("ensemble.checkpoint_times: must be a list")
    cps = tuple(float(t) for t in cps)
    if any(t < 0 or t > horizon for t in cps) or list(cps) != sorted(cps):
        raise ConfigError("ensemble.checkpoint_times: ascending, within "
                          "[0, horizon]")

    out = merged["output"].get("directory")
    if out is not None and not isinstance(out, str):
        raise ConfigError("output.directory: string or null")

    sel = data.get("experiments", [])
    if not isinstance(sel, (list, tuple)):
        raise ConfigError("experiments: must be a list of names")
    for name in sel:
        if name not in EXPERIMENT_NAMES:
            raise ConfigError(f"experiments: unknown name {name!r}; "
                              f"valid: {EXPERIMENT_NAMES}")

    return RunConfig(mass_parameter=mass, charge=charge,
                     hbar=_need(geo, "hbar", float, "geometry"),
                     fermion_mass=_need(geo, "fermion_mass", float,
                                        "geometry"),
                     n_radial_cells=k, r_max=r_max, n_theta=nt, n_phi=np_,
                     n_max=n_max, boundary_profile=tag, dt=dt,
                     horizon=horizon, solver_rtol=rtol, n_traj=n_traj,
                     master_seed=seed, checkpoint_times=cps, output_dir=out,
                     experiments=tuple(sel))


def parse_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{p}: not valid JSON ({err})") from err
    return from_dict(data, source=str(p))


def default_config(master_seed: int, **overrides) -> RunConfig:
    """Programmatic config with defaults; keyword names match RunConfig."""
    cfg = from_dict({"ensemble": {"master_seed": master_seed}},
                    source="<defaults>")
    return cfg.replace(**overrides) if overrides else cfg
