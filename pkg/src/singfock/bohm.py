"""Piecewise-deterministic particle process driven by the evolving wave.

Between events every particle follows the guidance field of its sector
(currents.GuidanceTables); reaching the singularity is a deterministic jump
that removes the particle, and new particles are born stochastically from the
boundary with rate density

    sigma_t(q -> q u omega) = [radial boundary current at (q, omega)]^+ / density(q),

sampled by inhomogeneous-Poisson thinning.  The decision which transition is
possible at a boundary point is carried by the sign of the radial current
alone: creation draws only from cells with outward current, and the inner-zone
guidance construction makes the infall velocity sign equal the current sign,
so annihilations can only happen under inward current.  The acceptance suite
counts violations of both statements; they are zero by construction, not by
tolerance.

Within one wave step the event rates are interpolated linearly in time between
the step-start and step-end tables with the particle position frozen at the
step start; guidance itself uses the midpoint tables.  Both are second-order
small biases that only shift event times by O(dt), far below the Monte Carlo
resolution the distribution-level tests run at.  After a jump the remainder of
the step is integrated in the new sector; a jump also cancels any creation
still pending for that step, so no second event fires until the next step
boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .currents import DENSITY_FLOOR, GuidanceTables
from .fock import FOUR_PI, FockState, flatten_field, sample_configuration
from .geometry import lambda_of
from .hamiltonian import DiscreteHamiltonian, FockVector, make_stepper
from .rngstreams import trajectory_rng

RATE_FLOOR = 1e-300
THINNING_SAFETY = 1.5


class UndefinedRateError(RuntimeError):
    pass


@dataclass
class EventRecord:
    time: float
    kind: str  # creation | annihilation | absorption
    trajectory: int
    sector_before: int
    sector_after: int
    theta: float
    phi: float
    cell_theta: int
    cell_phi: int
    driving_flux: float
    hazard: float


class EventLog:
    """Ordered event records; per-trajectory times strictly increase."""

    def __init__(self):
        self.records: List[EventRecord] = []
        self._last_time = {}

    def append(self, rec: EventRecord):
        prev = self._last_time.get(rec.trajectory)
        if prev is not None and rec.time <= prev:
            raise ValueError("event times must increase within a trajectory")
        if abs(rec.sector_after - rec.sector_before) > 1:
            raise ValueError("events change the sector by at most one")
        self._last_time[rec.trajectory] = rec.time
        self.records.append(rec)

    def last_time(self, trajectory: int) -> Optional[float]:
        return self._last_time.get(trajectory)

    def of_kind(self, kind: str) -> List[EventRecord]:
        return [r for r in self.records if r.kind == kind]

    def times(self, kind: Optional[str] = None) -> np.ndarray:
        recs = self.records if kind is None else self.of_kind(kind)
        return np.array(sorted(r.time for r in recs))

    def __len__(self):
        return len(self.records)


@dataclass
class ProcessState:
    """One trajectory of the particle process."""

    trajectory: int
    sector: int
    positions: np.ndarray  # (sector, 3) rows of (r, theta, phi)
    time: float
    rng: np.random.Generator
    alive: bool = True
    hazard_empty: float = 0.0  # integrated creation rate while waiting in sector 0
    created_once: bool = False


@dataclass
class MarkovResult:
    events: EventLog
    trajectories: List[ProcessState]
    checkpoints: dict
    truncation_suppressed: int
    wave_norm_drift: float


# -- chart housekeeping -------------------------------------------------------

def _chart_fix(pos: np.ndarray, r_max: float) -> np.ndarray:
    """Reflect theta at the poles and r at the outer wall, wrap phi."""
    pos = pos.copy()
    r, th, ph = pos[..., 0], pos[..., 1], pos[..., 2]
    th = np.mod(th, 2.0 * np.pi)
    over = th > np.pi
    th = np.where(over, 2.0 * np.pi - th, th)
    ph = np.where(over, ph + np.pi, ph)
    r = np.abs(r)
    r = np.where(r > r_max, np.maximum(2.0 * r_max - r, 0.0), r)
    pos[..., 0] = r
    pos[..., 1] = th
    pos[..., 2] = np.mod(ph, 2.0 * np.pi)
    return pos


def _angular_cell(grid, theta: float, phi: float):
    j = int(np.argmin(np.abs(grid.cos_theta - math.cos(theta))))
    k = int(round(phi / (2.0 * np.pi / grid.n_phi))) % grid.n_phi
    return j, k


# -- guidance with annihilation detection -------------------------------------

@dataclass
class Hit:
    slot: int
    time: float
    theta: float
    phi: float


def guide_batch(tables: GuidanceTables, positions: np.ndarray, t0: float,
                dt: float, pair: bool, r_hit: float,
                max_substeps: int = 500_000):
    """RK4 transport of a batch against frozen tables.

    positions is (B, 3) or (B, 2, 3).  Returns (positions, hits, defined):
    hits[b] is None or the first Hit of trajectory b (its motion stops there);
    defined[b] goes False when the density gate tripped during the step.

    The substep length adapts every iteration to the current velocities, so the
    radial displacement stays below a quarter cell even through the lambda ~
    e^2/r^2 blowup near the center; hits are detected on the raw coordinates
    before any chart reflection, which keeps a through-zero overshoot from
    masquerading as an outward bounce.  The asymptotic infall law
    t(r) ~ t0 + (r0^3 - r^3)/(3 e^2 |s|) then refines each hit time below the
    substep resolution.
    """
    grid = tables.state.grid
    params = tables.state.params
    B = positions.shape[0]
    pos = positions.copy()
    hits: List[Optional[Hit]] = [None] * B
    defined = np.ones(B, dtype=bool)
    if B == 0 or dt <= 0:
        return pos, hits, defined
    vel_fn = tables.velocity_pair if pair else tables.velocity_single
    active = np.ones(B, dtype=bool)
    remaining = np.full(B, dt, dtype=float)
    t_at = np.full(B, t0, dtype=float)
    for _ in range(max_substeps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        p = pos[idx]
        v1, ok1 = vel_fn(p)
        # shared substep: quarter-cell radial cap, modest angular cap, times a
        # factor-2 margin for velocity growth inside the substep
        vr_max = float(np.max(np.abs(v1[..., 0]), initial=0.0))
        vth_max = float(np.max(np.abs(v1[..., 1]), initial=0.0))
        vph_eff = np.abs(v1[..., 2]) * np.sin(p[..., 1])
        vph_max = float(np.max(vph_eff, initial=0.0))
        h_sub = min(float(remaining[idx].max()),
                    0.25 * grid.h / (2.0 * max(vr_max, 1e-30)),
                    0.15 / (2.0 * max(vth_max, vph_max, 1e-30)))
        h_sub = max(h_sub, 1e-18)
        v2, ok2 = vel_fn(_chart_fix(p + 0.5 * h_sub * v1, grid.r_max))
        v3, ok3 = vel_fn(_chart_fix(p + 0.5 * h_sub * v2, grid.r_max))
        v4, ok4 = vel_fn(_chart_fix(p + h_sub * v3, grid.r_max))
        ok = ok1 & ok2 & ok3 & ok4
        raw = p + (h_sub / 6.0) * (v1 + 2 * v2 + 2 * v3 + v4)
        if pair:
            below_any = (raw[..., 0] < r_hit).any(axis=1)
        else:
            below_any = raw[..., 0] < r_hit
        stepped = np.minimum(remaining[idx], h_sub)
        done = stepped >= remaining[idx] - 1e-18
        plain = ok & ~below_any
        pos[idx[plain]] = _chart_fix(raw[plain], grid.r_max)
        t_at[idx] += stepped
        remaining[idx] -= stepped
        active[idx[plain & done]] = False
        for a in np.nonzero(~plain)[0]:
            b = idx[a]
            if not ok[a]:
                defined[b] = False
                active[b] = False
                continue
            pb = _chart_fix(raw[a][None, ...], grid.r_max)[0]
            raw_radii = raw[a][:, 0] if pair else np.array([raw[a][0]])
            slot = int(np.nonzero(raw_radii < r_hit)[0][0])
            start = p[a][slot] if pair else p[a]
            vstart = v1[a][slot] if pair else v1[a]
            r0 = float(start[0])
            s = vstart[0] / lambda_of(params, max(r0, 1e-12))
            if s > 0:
                # outward motion yet ended below the gate: transport overshoot;
                # park the particle at the gate and carry on
                pb = pb.copy()
                if pair:
                    pb[slot, 0] = r_hit
                else:
                    pb[0] = r_hit
                pos[b] = pb
                if done[a]:
                    active[b] = False
                continue
            if s < 0:
                dte = (r0 ** 3 - r_hit ** 3) / (3.0 * params.charge_sq * abs(s))
                dte = min(max(dte, 0.0), h_sub)
            else:
                # exact zero radial current ties break toward the hit
                dte = h_sub
            end = pb[slot] if pair else pb
            hits[b] = Hit(slot=slot, time=t_at[b] - stepped[a] + dte,
                          theta=float(end[1]), phi=float(end[2]))
            pos[b] = pb
            active[b] = False
    else:
        raise RuntimeError("guidance substep budget exhausted")
    return pos, hits, defined


# -- jumps and rates ----------------------------------------------------------

def deterministic_jump(positions: np.ndarray, at_singularity) -> np.ndarray:
    """Remove the flagged particles; survivors keep their order."""
    keep = [i for i in range(positions.shape[0]) if i not in set(at_singularity)]
    return positions[keep]


def guide(tables: GuidanceTables, ps: ProcessState, dt: float,
          log: Optional[EventLog] = None,
          r_hit: Optional[float] = None) -> ProcessState:
    """Advance one trajectory by dt under frozen tables, jumps included.

    Annihilation hits en route are applied (particle removed, event logged
    when a log is given); creation is not sampled here, that needs the full
    ensemble driver.  Mutates and returns ps.
    """
    if r_hit is None:
        r_hit = 0.5 * tables.state.grid.h
    if log is None:
        log = EventLog()
    _finish_step_single(ps, tables, ps.time + dt, r_hit, log)
    return ps


def detect_annihilation(tables: GuidanceTables, positions: np.ndarray,
                        t0: float, dt: float,
                        r_hit: Optional[float] = None) -> Optional[Hit]:
    """First boundary hit on the proposed step, or None; does not mutate."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    if r_hit is None:
        r_hit = 0.5 * tables.state.grid.h
    pair = positions.shape[0] == 2
    P = positions[None, :, :] if pair else positions[:1][None, :].reshape(1, 3)
    if pair:
        _, hits, _ = guide_batch(tables, P, t0, dt, True, r_hit)
    else:
        _, hits, _ = guide_batch(tables, P.reshape(1, 3), t0, dt, False, r_hit)
    return hits[0]


def creation_rate_total(tables: GuidanceTables, sector: int,
                        positions: Optional[np.ndarray], n_max: int):
    """Integrated creation rate Lambda and a truncation flag.

    Position-independent in sector 0; in sector 1 the conditional boundary
    current is interpolated at the existing particle's position.
    """
    if sector >= n_max:
        return 0.0, True
    if sector == 0:
        den = abs(tables.state.amplitude_empty) ** 2
        if den < DENSITY_FLOOR:
            return 0.0, False
        return max(tables.net_flux_empty_to_one, 0.0) / den, False
    if sector == 1:
        flux, dens = tables.conditional_flux_at(positions[:1])
        if dens[0] < DENSITY_FLOOR:
            return 0.0, False
        return FOUR_PI * max(float(flux[0]), 0.0) / float(dens[0]), False
    raise UndefinedRateError(f"no creation channel above sector {sector}")


def creation_rates_sector1(tables: GuidanceTables, P: np.ndarray) -> np.ndarray:
    """Batched one-to-two creation rates at positions P (B, 3)."""
    flux, dens = tables.conditional_flux_at(P)
    safe = np.where(dens < DENSITY_FLOOR, 1.0, dens)
    rates = FOUR_PI * np.maximum(flux, 0.0) / safe
    return np.where(dens < DENSITY_FLOOR, 0.0, rates)


def creation_rate_density(tables: GuidanceTables, sector: int,
                          positions: Optional[np.ndarray], n_max: int) -> np.ndarray:
    """Per-angular-cell creation rates, (n_theta, n_phi); sums to Lambda.

    The boundary profiles carry no angular dependence, so the density is the
    uniform current density weighted by the cell areas; the chi-square
    jump-location test checks the ensemble against exactly this array.
    """
    total, _ = creation_rate_total(tables, sector, positions, n_max)
    return tables.state.grid.angular_weights * (total / FOUR_PI)


def creation_rate(tables: GuidanceTables, sector: int,
                  positions: Optional[np.ndarray], n_max: int) -> float:
    """Creation rate per unit solid angle (uniform over the sphere here)."""
    total, _ = creation_rate_total(tables, sector, positions, n_max)
    return total / FOUR_PI


def sample_creation(rate_start: float, rate_end: float, dt: float,
                    rng: np.random.Generator, max_retries: int = 8):
    """First accepted event time in [0, dt) for a linear-in-time rate, or None.

    Thinning against the constant bound THINNING_SAFETY * max(endpoint rates).
    A linear rate cannot exceed that bound, but the refresh-and-retry branch
    stays in place because the contract requires it on a detected violation.
    """
    bound = THINNING_SAFETY * max(rate_start, rate_end)
    for _ in range(max_retries):
        if bound <= RATE_FLOOR:
            return None
        t = 0.0
        violated = False
        while True:
            t += rng.exponential(1.0 / bound)
            if t >= dt:
                return None
            rate_t = rate_start + (rate_end - rate_start) * (t / dt)
            if rate_t > bound:
                bound = THINNING_SAFETY * rate_t
                violated = True
                break
            if rng.uniform() * bound < rate_t:
                return t
        if not violated:
            return None
    raise UndefinedRateError("thinning bound kept failing after retries")


def draw_creation_cell(grid, rng: np.random.Generator):
    """Angular cell of a vacuum creation event; proportional to cell areas.

    The positive-part rate density is angularly uniform for the fixed boundary
    profiles, so the cell law reduces to the area weights.
    """
    p = grid.angular_weights.reshape(-1)
    pick = rng.choice(p.size, p=p / p.sum())
    return divmod(int(pick), grid.n_phi)


def pair_destination_weights(H: DiscreteHamiltonian, state: FockState,
                             spectator_cell) -> np.ndarray:
    """Unnormalized angular law of the newborn in a one-to-two jump.

    Entry (j, k) is the positive cross term between the pair field and the
    coupling image of the one-particle field masked to the spectator's cell,
    with the newborn placed on the innermost interior shell at (j, k).  The
    cells near the spectator are suppressed automatically because the
    antisymmetric pair field vanishes on the diagonal; an area-weighted draw
    would park newborns on that zero and trip the velocity gate.
    """
    grid = state.grid
    nt, npphi = grid.n_theta, grid.n_phi
    i, j, k = spectator_cell
    x = ((i * nt + j) * npphi + k) * 4
    W = H.W_flat
    iota = H.iota
    p1f = flatten_field(state.psi1)
    phi_x = p1f[x:x + 4]
    iota_x = iota[x:x + 4]
    w_x = W[x:x + 4]
    shell = nt * npphi
    blocks = state.psi2[:4 * shell, x:x + 4].reshape(shell, 4, 4)
    w_y = W[:4 * shell].reshape(shell, 4)
    iota_y = iota[:4 * shell].reshape(shell, 4)
    phi_y = np.zeros((shell, 4), dtype=complex)
    cell_y = (0 * nt + j) * npphi + k if i == 0 else None
    if cell_y is not None:
        phi_y[cell_y] = phi_x
    h2 = 1j * (phi_y[:, :, None] * iota_x[None, None, :]
               - iota_y[:, :, None] * phi_x[None, None, :])
    cross = np.einsum("ys,ysa,a,ysa->y", w_y, np.conj(blocks), w_x, h2)
    return np.maximum(cross.imag, 0.0).reshape(nt, npphi)


def draw_pair_creation_cell(H: DiscreteHamiltonian, state: FockState,
                            spectator_cell, rng: np.random.Generator):
    """Destination cell of a one-to-two creation, conditional on the spectator.

    Falls back to the area law when every cross term vanishes (the jump rate
    came from interpolation and the nearest-cell weights all rounded to zero).
    """
    w = pair_destination_weights(H, state, spectator_cell).reshape(-1)
    tot = w.sum()
    if tot <= 0.0:
        return draw_creation_cell(state.grid, rng)
    pick = rng.choice(w.size, p=w / tot)
    return divmod(int(pick), state.grid.n_phi)


# -- Bell-type transition rates ----------------------------------------------

def _masked_vector(H: DiscreteHamiltonian, state: FockState, cell) -> FockVector:
    """Projection of the state onto one configuration cell.

    cell is None for the empty sector, (i, j, k) for a one-particle grid cell
    (interior radial index i), or a pair of such triples for two particles.
    Spinor components are kept whole; the projector is purely spatial.
    """
    a = 0.0 + 0.0j
    psi1 = np.zeros_like(state.psi1)
    psi2 = None if state.psi2 is None else np.zeros_like(state.psi2)
    if cell is None:
        a = state.amplitude_empty
    elif isinstance(cell[0], (int, np.integer)):
        i, j, k = cell
        psi1[i, j, k, :] = state.psi1[i, j, k, :]
    else:
        (i1, j1, k1), (i2, j2, k2) = cell
        grid = state.grid
        ya = ((i1 * grid.n_theta + j1) * grid.n_phi + k1) * 4
        yb = ((i2 * grid.n_theta + j2) * grid.n_phi + k2) * 4
        if psi2 is None:
            raise UndefinedRateError("state has no two-particle sector")
        psi2[ya:ya + 4, yb:yb + 4] = state.psi2[ya:ya + 4, yb:yb + 4]
        psi2[yb:yb + 4, ya:ya + 4] = state.psi2[yb:yb + 4, ya:ya + 4]
    return FockVector(a, psi1, psi2)


def bell_rate(H: DiscreteHamiltonian, state: FockState, cell_from, cell_to) -> float:
    """Discrete-jump rate between configuration cells in adjacent sectors.

    (2/hbar) [Im <psi, P_to coupling P_from psi>]^+ / <psi, P_from psi> with
    spatial cell projectors.  For boundary-profile product states the sum over
    target cells reproduces the process creation rate exactly; the comparator
    experiment quantifies the agreement on refining grids.
    """
    z_from = _masked_vector(H, state, cell_from)
    z_to = _masked_vector(H, state, cell_to)
    den = H.inner(z_from, z_from).real
    if den < DENSITY_FLOOR:
        raise UndefinedRateError("projected weight vanishes for the source cell")
    image = H.apply_full(z_from, coupling_only=True)
    num = H.inner(z_to, image)
    return (2.0 / H.params.hbar) * max(num.imag, 0.0) / den


# -- the process driver -------------------------------------------------------

def _spawn_position(grid, j: int, k: int) -> np.ndarray:
    return np.array([grid.r[1], grid.theta[j], grid.phi[k]])


def _record(log: EventLog, ps: ProcessState, t: float, kind: str,
            sector_after: int, theta: float, phi: float, grid, flux: float):
    prev = log.last_time(ps.trajectory)
    if prev is not None and t <= prev:
        t = float(np.nextafter(prev, math.inf))
    j, k = _angular_cell(grid, theta, phi)
    log.append(EventRecord(time=t, kind=kind, trajectory=ps.trajectory,
                           sector_before=ps.sector, sector_after=sector_after,
                           theta=theta, phi=phi, cell_theta=j, cell_phi=k,
                           driving_flux=flux, hazard=ps.hazard_empty))


def _finish_step_single(ps: ProcessState, tables: GuidanceTables, t_to: float,
                        r_hit: float, log: EventLog):
    """Advance one trajectory to t_to, absorbing any nested hits on the way."""
    grid = tables.state.grid
    while ps.alive and t_to - ps.time > 1e-15:
        if ps.sector == 0:
            ps.time = t_to
            return
        pair = ps.sector == 2
        pos = ps.positions[None, ...] if pair else ps.positions
        new_pos, hits, defined = guide_batch(tables, pos, ps.time,
                                             t_to - ps.time, pair, r_hit)
        if not defined[0]:
            _record(log, ps, ps.time, "absorption", ps.sector, 0.0, 0.0,
                    grid, 0.0)
            ps.alive = False
            return
        hit = hits[0]
        if hit is None:
            ps.positions = new_pos[0] if pair else new_pos
            ps.time = t_to
            return
        _apply_hit(ps, new_pos[0] if pair else new_pos, hit, tables, log)


def _apply_hit(ps: ProcessState, positions: np.ndarray, hit: Hit,
               tables: GuidanceTables, log: EventLog):
    """Log the annihilation and drop the hit particle; advances ps.time."""
    grid = tables.state.grid
    if ps.sector == 2:
        survivor = positions[1 - hit.slot]
        flux, _ = tables.conditional_flux_at(survivor[None, :])
        flux_val = float(flux[0])
    else:
        flux_val = tables.net_flux_empty_to_one / FOUR_PI
    _record(log, ps, hit.time, "annihilation", ps.sector - 1,
            hit.theta, hit.phi, grid, flux_val)
    ps.positions = deterministic_jump(positions, [hit.slot])
    ps.sector -= 1
    ps.time = max(ps.time, hit.time)


def run_markov(H: DiscreteHamiltonian, initial_wave: FockState, *, n_traj: int,
               horizon: float, dt: float, master_seed: int, method: str = "auto",
               checkpoint_times=(), freeze_wave: bool = False,
               initial_configs=None, r_hit: Optional[float] = None) -> MarkovResult:
    """Evolve the wave once and drive an ensemble of trajectories against it.

    All trajectories advance in lockstep with the stepper, so no wave timeline
    is ever stored.  Per-trajectory Philox streams keyed by (master_seed, id)
    make the ensemble order- and worker-count independent.
    """
    grid = H.grid
    if r_hit is None:
        r_hit = 0.5 * grid.h
    n_steps = int(round(horizon / dt))
    stepper = make_stepper(H, dt, method)
    stepper.load(initial_wave.normalized())
    log = EventLog()
    norm0 = stepper.state.total_norm_sq()

    trajs: List[ProcessState] = []
    for tid in range(n_traj):
        rng = trajectory_rng(master_seed, tid)
        if initial_configs is not None:
            sector, positions = initial_configs[tid]
            positions = np.asarray(positions, dtype=float).reshape(sector, 3)
        else:
            conf = sample_configuration(stepper.state, rng)
            sector, positions = conf.sector, conf.positions
        trajs.append(ProcessState(trajectory=tid, sector=sector,
                                  positions=positions, time=0.0, rng=rng))

    pending_checkpoints = sorted(checkpoint_times)
    checkpoints = {}
    # checkpoints at or before the start snapshot the initial ensemble
    while pending_checkpoints and pending_checkpoints[0] <= 0.5 * dt:
        tc = pending_checkpoints.pop(0)
        checkpoints[tc] = [(ps.sector, ps.positions.copy(), ps.alive)
                           for ps in trajs]
    truncated = 0
    norm_drift = 0.0

    tables_cur = GuidanceTables.from_state(stepper.state)
    for _ in range(n_steps):
        t_n = stepper.time
        snap = stepper.snapshot()
        if freeze_wave:
            stepper.advance_time_only()
            tables_mid = tables_cur
            tables_next = tables_cur
        else:
            stepper.advance()
            tables_mid = GuidanceTables.from_state(stepper.midpoint_with(snap))
            tables_next = GuidanceTables.from_state(stepper.state)
            norm_drift = max(norm_drift,
                             abs(stepper.state.total_norm_sq() - norm0))
        t_next = t_n + dt

        alive = [ps for ps in trajs if ps.alive]
        in0 = [ps for ps in alive if ps.sector == 0]
        in1 = [ps for ps in alive if ps.sector == 1]
        in2 = [ps for ps in alive if ps.sector == 2]
        for ps in trajs:
            if not ps.alive:
                ps.time = t_next

        # endpoint rates: shared for sector 0, batched for sector 1
        rate0_a = rate0_b = 0.0
        if in0:
            rate0_a, tr_a = creation_rate_total(tables_cur, 0, None, H.n_max)
            rate0_b, _ = creation_rate_total(tables_next, 0, None, H.n_max)
            if tr_a:
                truncated += len(in0)
        rates1_a = rates1_b = None
        if in1:
            if H.n_max >= 2:
                P = np.stack([ps.positions[0] for ps in in1])
                rates1_a = creation_rates_sector1(tables_cur, P)
                rates1_b = creation_rates_sector1(tables_next, P)
            else:
                rates1_a = np.zeros(len(in1))
                rates1_b = np.zeros(len(in1))
                truncated += len(in1)
        truncated += len(in2)

        deferred = []  # (ps, t_event, rate_at_event) needing individual handling
        batch1, batch2 = [], []
        for group, ra, rb in ((in0, None, None), (in1, rates1_a, rates1_b),
                              (in2, None, None)):
            for pos_in_group, ps in enumerate(group):
                if ps.sector == 0:
                    a, b = rate0_a, rate0_b
                elif ps.sector == 1:
                    a, b = float(ra[pos_in_group]), float(rb[pos_in_group])
                else:
                    a = b = 0.0
                t_event = sample_creation(a, b, dt, ps.rng)
                if ps.sector == 0 and not ps.created_once:
                    if t_event is None:
                        ps.hazard_empty += 0.5 * (a + b) * dt
                    else:
                        rate_t = a + (b - a) * (t_event / dt)
                        ps.hazard_empty += 0.5 * (a + rate_t) * t_event
                        ps.created_once = True
                if t_event is not None:
                    rate_t = a + (b - a) * (t_event / dt)
                    deferred.append((ps, t_event, rate_t))
                elif ps.sector == 1:
                    batch1.append(ps)
                elif ps.sector == 2:
                    batch2.append(ps)
                else:
                    ps.time = t_next

        for ps, t_event, rate_t in deferred:
            sector_sampled = ps.sector
            _finish_step_single(ps, tables_mid, t_n + t_event, r_hit, log)
            if ps.alive and ps.sector == sector_sampled:
                if ps.sector == 1:
                    spec = ps.positions[0]
                    ci = int(np.clip(round(spec[0] / grid.h), 1,
                                     grid.n_radial_cells)) - 1
                    cj, ck = _angular_cell(grid, spec[1], spec[2])
                    j, k = draw_pair_creation_cell(H, tables_mid.state,
                                                   (ci, cj, ck), ps.rng)
                else:
                    j, k = draw_creation_cell(grid, ps.rng)
                newp = _spawn_position(grid, j, k)
                cell_rate = float(grid.angular_weights[j, k] * rate_t / FOUR_PI)
                _record(log, ps, ps.time, "creation", ps.sector + 1,
                        float(newp[1]), float(newp[2]), grid, cell_rate)
                ps.positions = (newp[None, :] if ps.sector == 0
                                else np.vstack([ps.positions, newp]))
                ps.sector += 1
            _finish_step_single(ps, tables_mid, t_next, r_hit, log)

        for group, pair in ((batch1, False), (batch2, True)):
            if not group:
                continue
            if pair:
                P = np.stack([ps.positions for ps in group])
            else:
                P = np.stack([ps.positions[0] for ps in group])
            new_pos, hits, defined = guide_batch(tables_mid, P, t_n, dt,
                                                 pair, r_hit)
            for i, ps in enumerate(group):
                if not defined[i]:
                    _record(log, ps, ps.time, "absorption", ps.sector,
                            0.0, 0.0, grid, 0.0)
                    ps.alive = False
                    continue
                if hits[i] is None:
                    ps.positions = new_pos[i] if pair else new_pos[i][None, :]
                    ps.time = t_next
                else:
                    _apply_hit(ps, new_pos[i] if pair else new_pos[i][None, :],
                               hits[i], tables_mid, log)
                    _finish_step_single(ps, tables_mid, t_next, r_hit, log)

        tables_cur = tables_next
        while pending_checkpoints and t_next >= pending_checkpoints[0] - 0.5 * dt:
            tc = pending_checkpoints.pop(0)
            checkpoints[tc] = [(ps.sector, ps.positions.copy(), ps.alive)
                               for ps in trajs]

    return MarkovResult(events=log, trajectories=trajs, checkpoints=checkpoints,
                        truncation_suppressed=truncated,
                        wave_norm_drift=norm_drift)
