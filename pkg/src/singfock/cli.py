"""Command line entry point.

Subcommands map onto the experiment suites plus two production runs:

    evolve        wave evolution from vacuum, checkpoints + mass timeline
    trajectories  Markov ensemble from vacuum, event log + final snapshot
    audit         conservation suite
    equivariance  ensemble-law suite
    bell-compare  jump-rate comparison suite
    counting      counting-statistics suite
    reversibility time-reversal suite
    geodesics     radial null ray table + checks
    foliation     proper-time lower-bound table + checks

Every subcommand writes its artifacts under the output directory even when a
check fails; the exit status is 0 on success, 1 when any report row fails and
2 for usage errors.  The default output root is $SINGFOCK_OUT or ./runs.

Heavy imports happen inside main() so --threads can pin the BLAS pool size
through the environment before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys

PACKAGE_VERSION = "0.1.0"

SUITE_COMMANDS = ("audit", "equivariance", "bell-compare", "counting",
                  "reversibility", "geodesics", "foliation")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="singfock",
        description="Fock-space Dirac evolution and the particle-creation "
                    "process on a super-extremal charged background.")
    ap.add_argument("command",
                    choices=("evolve", "trajectories") + SUITE_COMMANDS)
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--seed", type=int,
                    help="master seed (overrides the config; required "
                         "when no config is given)")
    ap.add_argument("--out", help="output directory (overrides config and "
                                  "$SINGFOCK_OUT)")
    ap.add_argument("--threads", type=int,
                    help="BLAS/OpenMP thread cap, set before numpy loads")
    return ap


def _resolve_out(args, config) -> str:
    if args.out:
        return args.out
    if config.output_dir:
        return config.output_dir
    root = os.environ.get("SINGFOCK_OUT", "runs")
    return os.path.join(root, f"{args.command}-{config.digest()}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .config import ConfigError, default_config, parse_config

    try:
        if args.config is not None:
            config = parse_config(args.config)
            if args.seed is not None:
                config = config.replace(master_seed=args.seed)
        else:
            if args.seed is None:
                print("error: provide --config or --seed", file=sys.stderr)
                return 2
            config = default_config(args.seed)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out_dir = _resolve_out(args, config)
    os.makedirs(out_dir, exist_ok=True)

    from . import io as sio
    sio.write_run_meta(out_dir, config, args.command, PACKAGE_VERSION)
    if args.command == "evolve":
        return _cmd_evolve(config, out_dir)
    if args.command == "trajectories":
        return _cmd_trajectories(config, out_dir)
    return _cmd_suite(args.command, config, out_dir)


def _vacuum_state(config):
    from .fock import FockState
    import numpy as np
    grid = config.grid()
    n1 = (grid.n_radial_cells, grid.n_theta, grid.n_phi, 4)
    nflat = grid.n_radial_cells * grid.n_theta * grid.n_phi * 4
    psi2 = np.zeros((nflat, nflat), dtype=complex) if config.n_max >= 2 else None
    from .spinor import make_boundary_profile
    return FockState(params=config.geometry(), grid=grid,
                     profile=make_boundary_profile(config.boundary_profile),
                     amplitude_empty=1.0 + 0.0j,
                     psi1=np.zeros(n1, dtype=complex), psi2=psi2)


def _cmd_evolve(config, out_dir) -> int:
    import numpy as np
    from . import io as sio
    from .hamiltonian import assemble, make_stepper

    digest = config.digest()
    H = assemble(config.geometry(), config.grid(),
                 _vacuum_state(config).profile, n_max=config.n_max)
    stepper = make_stepper(H, config.dt)
    stepper.load(_vacuum_state(config))
    n_steps = int(round(config.horizon / config.dt))
    pending = sorted(set(config.checkpoint_times) | {config.horizon})
    norm0 = stepper.state.total_norm_sq()
    rows = []

    def record():
        m = stepper.state.sector_masses()
        m2 = m[2] if m.size > 2 else None
        rows.append((stepper.time, m[0], m[1], m2,
                     stepper.state.total_norm_sq() - norm0))

    ncp = 0
    record()
    for _ in range(n_steps):
        stepper.advance()
        record()
        while pending and pending[0] <= stepper.time + 0.5 * config.dt:
            pending.pop(0)
            sio.save_checkpoint(
                os.path.join(out_dir, f"checkpoint_{ncp:03d}.sfck"),
                stepper.state, extra={"digest": digest})
            ncp += 1
    sio.write_csv(os.path.join(out_dir, "timeline.csv"),
                  ("time", "mass_empty", "mass_one", "mass_two",
                   "norm_drift"), rows, digest=digest)
    drift = max(abs(r[-1]) for r in rows)
    print(f"evolve: {n_steps} steps, {ncp} checkpoints, "
          f"norm drift {drift:.3e}")
    return 0


def _cmd_trajectories(config, out_dir) -> int:
    from . import bohm
    from . import io as sio
    from .hamiltonian import assemble

    digest = config.digest()
    state0 = _vacuum_state(config)
    H = assemble(config.geometry(), config.grid(), state0.profile,
                 n_max=config.n_max)
    result = bohm.run_markov(H, state0, n_traj=config.n_traj,
                             horizon=config.horizon, dt=config.dt,
                             master_seed=config.master_seed,
                             checkpoint_times=config.checkpoint_times)
    sio.write_event_csv(os.path.join(out_dir, "events.csv"),
                        result.events.records, digest=digest)
    sio.write_snapshot_csv(os.path.join(out_dir, "snapshot_final.csv"),
                           result.trajectories, digest=digest)
    print(f"trajectories: {config.n_traj} trajectories, "
          f"{len(result.events.records)} events, "
          f"wave norm drift {result.wave_norm_drift:.3e}")
    return 0


def _suite_runner(name):
    from . import experiments as ex
    return {
        "audit": ex.run_conservation_suite,
        "equivariance": ex.run_equivariance,
        "bell-compare": ex.run_bell_comparison,
        "counting": ex.run_counting_statistics,
        "reversibility": ex.run_reversibility,
        "geodesics": ex.run_geodesic_suite,
        "foliation": ex.run_foliation_suite,
    }[name]


def _cmd_suite(name, config, out_dir) -> int:
    import numpy as np
    from . import experiments as ex
    from . import io as sio

    digest = config.digest()
    report = _suite_runner(name)(config)
    base = name.replace("-", "_")
    sio.write_report(os.path.join(out_dir, f"{base}_report.json"),
                     report.to_dict())
    sio.write_csv(os.path.join(out_dir, f"{base}_metrics.csv"),
                  ("name", "value", "tolerance", "op", "passed", "note"),
                  [(r.name, r.value, r.tolerance, r.op, int(r.passed), r.note)
                   for r in report.rows], digest=digest)

    if name == "geodesics":
        params = config.geometry()
        rs = np.linspace(0.05, 2.0, 40)
        table = ex.geodesic_table(params, rs)
        sio.write_csv(os.path.join(out_dir, "geodesics.csv"),
                      ("r", "t_outgoing"), list(zip(rs, table)),
                      digest=digest)
    if name == "foliation":
        params = config.geometry()
        rs = np.geomspace(1e-4, 1e-1, 25)
        table = ex.foliation_divergence(params, 1.0, rs)
        sio.write_csv(os.path.join(out_dir, "foliation.csv"),
                      ("r1", "ray_time", "lower_bound"),
                      [tuple(row) for row in table], digest=digest)
    if name == "equivariance":
        _write_equivariance_series(config, report, out_dir, digest)

    for r in report.rows:
        mark = "PASS" if r.passed else "FAIL"
        print(f"{mark} {r.name} {r.value:.6g} (tol {r.op} {r.tolerance:g})")
    print(f"{name}: {'PASS' if report.passed else 'FAIL'} "
          f"({len(report.rows)} checks, {report.runtime_s:.1f}s)")
    return 0 if report.passed else 1


def _write_equivariance_series(config, report, out_dir, digest) -> None:
    """TV-vs-time companion table for the plotting component."""
    from . import io as sio
    rows = []
    for r in report.rows:
        if r.name.startswith("tv-at-t="):
            rows.append((float(r.name.split("=", 1)[1]), r.value,
                         r.tolerance))
    if rows:
        sio.write_csv(os.path.join(out_dir, "equivariance_tv.csv"),
                      ("time", "tv_distance", "tolerance"), rows,
                      digest=digest)


if __name__ == "__main__":
    raise SystemExit(main())
