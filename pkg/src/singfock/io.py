"""Artifact writers and readers: checkpoints, CSV tables, JSON reports.

Reproducibility contract: identical config + seed produce byte-identical
files except for the single `# generated=` (CSV) or `"generated"` (JSON)
timestamp line; experiment reports additionally carry wall-clock runtime on
its own `"runtime_s"` line.  Checkpoints use a purpose-built container
instead of npz because zip member timestamps break save->load->save byte
identity.

CSV cells print floats with 17 significant digits so every value round-trips
exactly; JSON numbers rely on the shortest exact repr the encoder emits.
"""

from __future__ import annotations

import json
import struct
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .config import RunConfig, canonical_json
from .fock import FockState
from .geometry import GeometryParams, SpatialGrid
from .spinor import make_boundary_profile

CHECKPOINT_MAGIC = b"SFCK1\n"
IO_SCHEMA_VERSION = 1


class ArtifactError(RuntimeError):
    """Malformed artifact file."""


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, state: FockState, extra: Optional[dict] = None) -> None:
    """Write one wave snapshot; layout: magic, u64 header length, canonical
    JSON header, then the raw little-endian array payload in header order."""
    blocks = [("psi1", np.ascontiguousarray(state.psi1, dtype="<c16"))]
    if state.psi2 is not None:
        blocks.append(("psi2", np.ascontiguousarray(state.psi2, dtype="<c16")))
    header = {
        "schema_version": IO_SCHEMA_VERSION,
        "kind": "checkpoint",
        "time": float(state.time),
        "amplitude_empty": [float(np.real(state.amplitude_empty)),
                            float(np.imag(state.amplitude_empty))],
        "geometry": {
            "mass_parameter": state.params.mass_parameter,
            "charge": state.params.charge,
            "hbar": state.params.hbar,
            "fermion_mass": state.params.fermion_mass,
        },
        "grid": {
            "n_radial_cells": state.grid.n_radial_cells,
            "r_max": state.grid.r_max,
            "n_theta": state.grid.n_theta,
            "n_phi": state.grid.n_phi,
        },
        "profile": state.profile.tag,
        "blocks": [{"name": name, "shape": list(arr.shape), "dtype": "<c16"}
                   for name, arr in blocks],
    }
    if extra:
        header["extra"] = extra
    raw_header = canonical_json(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(raw_header)))
        f.write(raw_header)
        for _, arr in blocks:
            f.write(arr.tobytes())


def load_checkpoint(path) -> FockState:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ArtifactError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("kind") != "checkpoint":
            raise ArtifactError(f"{path}: unexpected kind {header.get('kind')}")
        arrays = {}
        for block in header["blocks"]:
            shape = tuple(block["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 16)
            if len(buf) != count * 16:
                raise ArtifactError(f"{path}: truncated block {block['name']}")
            arrays[block["name"]] = np.frombuffer(
                buf, dtype="<c16").reshape(shape).copy()
    geom = header["geometry"]
    gridspec = header["grid"]
    params = GeometryParams(mass_parameter=geom["mass_parameter"],
                            charge=geom["charge"], hbar=geom["hbar"],
                            fermion_mass=geom["fermion_mass"])
    grid = SpatialGrid.build(gridspec["n_radial_cells"], gridspec["r_max"],
                             gridspec["n_theta"], gridspec["n_phi"])
    re_a, im_a = header["amplitude_empty"]
    return FockState(params=params, grid=grid,
                     profile=make_boundary_profile(header["profile"]),
                     amplitude_empty=complex(re_a, im_a),
                     psi1=arrays["psi1"], psi2=arrays.get("psi2"),
                     time=header["time"])


# -- CSV ----------------------------------------------------------------------

def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence],
              digest: Optional[str] = None) -> None:
    """Comma-separated table with a timestamp comment line and explicit header.

    Floats go through fmt (17 significant digits); everything else through
    str.  None becomes an empty cell.
    """
    lines = [f"# generated={_now()}"]
    if digest is not None:
        lines.append(f"# digest={digest}")
    lines.append(",".join(columns))
    for row in rows:
        cells = []
        for cell in row:
            if cell is None:
                cells.append("")
            elif isinstance(cell, (float, np.floating)):
                cells.append(fmt(cell))
            else:
                cells.append(str(cell))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path):
    """Inverse of write_csv: (columns, rows-of-strings), comments skipped."""
    columns = None
    rows: List[List[str]] = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        if columns is None:
            columns = line.split(",")
        else:
            rows.append(line.split(","))
    if columns is None:
        raise ArtifactError(f"{path}: no header row")
    return columns, rows


# -- JSON reports -------------------------------------------------------------

def write_report(path, report_dict: dict) -> None:
    """Report JSON with schema version; the generated key sits last so byte
    comparison modulo one line stays possible."""
    payload = dict(report_dict)
    payload.setdefault("schema_version", IO_SCHEMA_VERSION)
    payload["generated"] = _now()
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())


def write_run_meta(out_dir, config: RunConfig, command: str,
                   package_version: str) -> None:
    """Invocation record; deliberately omits paths so only the timestamp
    line varies between reruns of the same config."""
    meta = {
        "schema_version": IO_SCHEMA_VERSION,
        "digest": config.digest(),
        "master_seed": config.master_seed,
        "command": command,
        "package_version": package_version,
    }
    write_report(Path(out_dir) / "run_meta.json", meta)


# -- event logs and snapshots -------------------------------------------------

EVENT_COLUMNS = ("time", "kind", "trajectory", "sector_before", "sector_after",
                 "theta", "phi", "cell_theta", "cell_phi", "driving_flux",
                 "hazard")


def write_event_csv(path, records, digest: Optional[str] = None) -> None:
    rows = [(r.time, r.kind, r.trajectory, r.sector_before, r.sector_after,
             r.theta, r.phi, r.cell_theta, r.cell_phi, r.driving_flux,
             r.hazard) for r in records]
    write_csv(path, EVENT_COLUMNS, rows, digest=digest)


SNAPSHOT_COLUMNS = ("trajectory", "sector", "alive", "time",
                    "r1", "theta1", "phi1", "r2", "theta2", "phi2")


def write_snapshot_csv(path, process_states, digest: Optional[str] = None) -> None:
    rows = []
    for ps in process_states:
        cells = [ps.trajectory, ps.sector, int(ps.alive), ps.time]
        flat = list(np.asarray(ps.positions, dtype=float).reshape(-1))
        flat += [None] * (6 - len(flat))
        rows.append(tuple(cells + flat))
    write_csv(path, SNAPSHOT_COLUMNS, rows, digest=digest)
