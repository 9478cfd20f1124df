"""Figure rendering: one function per figure kind, dispatched by FigureSpec.

Every renderer takes already-parsed tables, so by the time an axes object
exists the digest check has passed.  Outputs are deterministic: fixed figure
geometry, pinned PNG/SVG metadata, and no timestamps, so re-rendering the
same run directory reproduces the image files byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .artifacts import ArtifactError, Table, check_digests, read_table

# figure kind -> artifact filenames it consumes from a run directory
FIGURE_KINDS: Dict[str, Tuple[str, ...]] = {
    "density": ("snapshot_final.csv",),
    "events": ("events.csv",),
    "geodesics": ("geodesics.csv",),
    "equivariance": ("equivariance_tv.csv",),
    "foliation": ("foliation.csv",),
}

_EVENT_COLORS = {
    "creation": "tab:green",
    "annihilation": "tab:red",
    "absorption": "tab:gray",
}


@dataclass
class FigureSpec:
    kind: str
    inputs: Tuple[str, ...]
    output: str
    # axis/scale knobs: dpi, bins, bins_r, bins_theta; unknown keys rejected
    # by the renderers that read them
    options: Dict[str, object] = field(default_factory=dict)
    # digest the inputs must carry, e.g. from run_meta.json; None accepts
    # any single common digest
    expected_digest: Optional[str] = None


def fit_log_slope(x, y) -> float:
    """Least-squares slope of log y against log x."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if lx.size < 2:
        raise ArtifactError("slope fit needs at least two points")
    return float(np.polyfit(lx, ly, 1)[0])


def render(spec: FigureSpec) -> str:
    """Validate inputs, draw the figure, write the image; returns its path."""
    if spec.kind not in FIGURE_KINDS:
        raise ArtifactError(f"unknown figure kind {spec.kind!r} "
                            f"(have {', '.join(sorted(FIGURE_KINDS))})")
    tables = [read_table(p) for p in spec.inputs]
    digest = check_digests(tables, reference=spec.expected_digest)
    fig = plt.figure(figsize=(6.4, 4.2))
    try:
        _RENDERERS[spec.kind](fig, tables, spec.options)
        fig.text(0.99, 0.01, f"run {digest}", ha="right", va="bottom",
                 fontsize=6, color="0.55")
        _save(fig, spec.output, spec.options, digest)
    finally:
        plt.close(fig)
    return spec.output


def _save(fig, output, options, digest) -> None:
    out = Path(output)
    out.parent.mkdir(parents=True, exist_ok=True)
    dpi = int(options.get("dpi", 110))
    if out.suffix == ".svg":
        with matplotlib.rc_context({"svg.hashsalt": digest}):
            fig.savefig(out, format="svg", metadata={"Date": None})
    else:
        fig.savefig(out, format="png", dpi=dpi,
                    metadata={"Software": "singfock-plots"})


# -- renderers ----------------------------------------------------------------

def _render_density(fig, tables: Sequence[Table], options) -> None:
    """Final-configuration heatmaps, one panel per occupied sector."""
    snap = tables[0]
    sector = snap.column("sector")
    alive = snap.column("alive")
    bins_r = int(options.get("bins_r", 24))
    bins_theta = int(options.get("bins_theta", 12))

    live = alive == 1
    n_vac = int(np.sum(live & (sector == 0)))
    panels = []
    one = live & (sector == 1)
    if np.any(one):
        panels.append(("one-particle",
                       snap.column("r1")[one], snap.column("theta1")[one]))
    two = live & (sector == 2)
    if np.any(two):
        r = np.concatenate([snap.column("r1")[two], snap.column("r2")[two]])
        th = np.concatenate([snap.column("theta1")[two],
                             snap.column("theta2")[two]])
        panels.append(("two-particle", r, th))

    if not panels:
        ax = fig.add_subplot(1, 1, 1)
        ax.set_axis_off()
        ax.text(0.5, 0.5, f"all {n_vac} live trajectories in vacuum",
                ha="center", va="center")
    else:
        r_hi = max(float(np.nanmax(p[1])) for p in panels)
        for i, (label, r, th) in enumerate(panels):
            ax = fig.add_subplot(1, len(panels), i + 1)
            h, re, te = np.histogram2d(
                r, th, bins=(bins_r, bins_theta),
                range=((0.0, r_hi), (0.0, np.pi)))
            mesh = ax.pcolormesh(re, te, h.T, cmap="viridis")
            fig.colorbar(mesh, ax=ax, shrink=0.85)
            ax.set_xlabel("r")
            ax.set_ylabel("theta" if i == 0 else "")
            ax.set_title(f"{label} ({len(r)} points)", fontsize=10)
    fig.suptitle(f"final configurations (vacuum: {n_vac})", fontsize=11)
    fig.tight_layout()


def _render_events(fig, tables: Sequence[Table], options) -> None:
    """Event-time histograms stacked by kind."""
    events = tables[0]
    times = events.column("time")
    kinds = events.column_str("kind")
    bins = int(options.get("bins", 30))

    ax = fig.add_subplot(1, 1, 1)
    present = sorted(set(kinds))
    if times.size:
        edges = np.histogram_bin_edges(times, bins=bins,
                                       range=(0.0, float(times.max())))
        series = [times[np.asarray(kinds) == k] for k in present]
        ax.hist(series, bins=edges, stacked=True,
                label=present,
                color=[_EVENT_COLORS.get(k, "tab:blue") for k in present])
        ax.legend()
    else:
        ax.text(0.5, 0.5, "no events", ha="center", va="center",
                transform=ax.transAxes)
    ax.set_xlabel("time")
    ax.set_ylabel("events")
    ax.set_title(f"jump events ({times.size} total)")
    fig.tight_layout()


def _render_geodesics(fig, tables: Sequence[Table], options) -> None:
    """Outgoing radial null rays: coordinate time against radius."""
    geo = tables[0]
    r = geo.column("r")
    t = geo.column("t_outgoing")
    ax = fig.add_subplot(1, 1, 1)
    ax.plot(r, t, "-", color="tab:blue", label="outgoing ray")
    ax.plot(r, -t, "--", color="tab:orange", label="ingoing mirror")
    ax.axhline(0.0, color="0.8", lw=0.8)
    ax.set_xlabel("r")
    ax.set_ylabel("t")
    ax.set_title("radial null rays from the singularity")
    ax.legend()
    fig.tight_layout()


def _render_equivariance(fig, tables: Sequence[Table], options) -> None:
    """Total-variation distance over time with the acceptance band."""
    tv = tables[0]
    t = tv.column("time")
    d = tv.column("tv_distance")
    tol = tv.column("tolerance")
    ax = fig.add_subplot(1, 1, 1)
    if tol.size:
        ax.axhspan(0.0, float(tol[0]), color="tab:green", alpha=0.15,
                   label=f"tolerance {tol[0]:g}")
    ax.plot(t, d, "o-", color="tab:blue", label="TV distance")
    ax.set_xlabel("time")
    ax.set_ylabel("total variation")
    ax.set_ylim(bottom=0.0)
    ax.set_title("ensemble law against the wave")
    ax.legend()
    fig.tight_layout()


def _render_foliation(fig, tables: Sequence[Table], options) -> None:
    """Log-log crossing times with the fitted power of the lower bound."""
    fol = tables[0]
    r1 = fol.column("r1")
    ray = fol.column("ray_time")
    low = fol.column("lower_bound")
    slope = fit_log_slope(r1, low)
    ax = fig.add_subplot(1, 1, 1)
    ax.loglog(r1, ray, "o-", color="tab:blue", label="ray crossing time")
    ax.loglog(r1, low, "s--", color="tab:red", label="lower bound")
    ax.set_xlabel("inner radius")
    ax.set_ylabel("time to cross")
    ax.set_title("foliation-time divergence toward the singularity")
    ax.text(0.05, 0.08, f"fitted power: {slope:.3f}",
            transform=ax.transAxes,
            bbox=dict(boxstyle="round", fc="white", ec="0.6"))
    ax.legend()
    fig.tight_layout()


_RENDERERS = {
    "density": _render_density,
    "events": _render_events,
    "geodesics": _render_geodesics,
    "equivariance": _render_equivariance,
    "foliation": _render_foliation,
}
