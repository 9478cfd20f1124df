"""Release gate: every headline requirement at production scale, one line each.

Each test prints a PASS line with the measured value against the required
threshold; a failing requirement fails its own test without hiding the rest.
Heavy ensembles are shared through module fixtures, so the whole gate stays
around two minutes of wall time.
"""

import numpy as np
import pytest

from singfock import experiments as ex
from singfock.config import default_config

# shared ensemble scale: massless e=0.3 background, rising quarter-cycle
# window, dt small enough to keep the O(dt) rate interpolation bias inside
# the occupancy band
ENSEMBLE_KW = dict(mass_parameter=0.0, charge=0.3, n_radial_cells=12,
                   r_max=1.2, dt=1.25e-4, n_traj=10_000)


@pytest.fixture(scope="module")
def conservation_report():
    return ex.run_conservation_suite(default_config(101))


@pytest.fixture(scope="module")
def ensemble_report():
    # horizon stops where speed-limited transport still covers every cell the
    # wave feeds; past it the centered-difference dispersion tail of the
    # newborn shell outruns any admissible trajectory and the pair occupancy
    # comparison stops being meaningful at this grid resolution
    cfg = default_config(42, horizon=0.0075,
                         checkpoint_times=(0.0025, 0.005, 0.0075),
                         **ENSEMBLE_KW)
    return ex.run_equivariance(cfg)


@pytest.fixture(scope="module")
def bell_report():
    return ex.run_bell_comparison(default_config(77, mass_parameter=0.0,
                                                 charge=0.3))


@pytest.fixture(scope="module")
def reversibility_report():
    return ex.run_reversibility(default_config(42, horizon=0.01,
                                               **ENSEMBLE_KW))


def _require(rep, name, limit, op="<="):
    row = rep.row(name)
    ok = row.value <= limit if op == "<=" else row.value >= limit
    print(f"{'PASS' if ok and row.passed else 'FAIL'} {name}: "
          f"{row.value:.6g} {op} {limit:g}  [{rep.experiment}] {row.note}")
    assert row.passed
    assert ok
    return row


class TestWaveEvolution:
    def test_unitarity_drift(self, conservation_report):
        _require(conservation_report, "unitarity-drift-1000-steps", 1e-8)

    def test_flux_identity(self, conservation_report):
        _require(conservation_report, "flux-identity-relative-error", 1e-6)

    def test_sector_balance(self, conservation_report):
        _require(conservation_report, "sector-balance-residual", 1e-8)
        _require(conservation_report, "boundary-condition-residual", 1e-8)


class TestEnsembleLaw:
    def test_equivariance_tv_and_occupancy(self, ensemble_report):
        tv_rows = [r for r in ensemble_report.rows
                   if r.name.startswith("tv-at-t=")]
        assert len(tv_rows) >= 3
        for row in tv_rows:
            _require(ensemble_report, row.name, 0.05)
        _require(ensemble_report, "occupancy-max-z", 3.0)

    def test_jump_location_gof(self, ensemble_report):
        _require(ensemble_report, "creation-cell-gof-p", 0.01, op=">=")

    def test_one_sidedness(self, ensemble_report):
        row = _require(ensemble_report, "creations-against-current", 0.0)
        assert row.value == 0.0
        row = _require(ensemble_report, "annihilations-against-current", 0.0)
        assert row.value == 0.0

    def test_counting_statistics(self):
        # waiting-time law behind the jump clock, beyond the headline list
        rep = ex.run_counting_statistics(default_config(31))
        _require(rep, "frozen-rate-ks-p", 0.01, op=">=")
        _require(rep, "first-event-count-p", 0.01, op=">=")


class TestGeometry:
    def test_geodesic_quadrature(self):
        rep = ex.run_geodesic_suite(default_config(1))
        _require(rep, "closed-form-max-error", 1e-8)
        _require(rep, "small-radius-asymptote-rel-error", 0.01)

    def test_foliation_power(self):
        rep = ex.run_foliation_suite(default_config(1))
        _require(rep, "fitted-power-offset", 0.01)
        assert rep.passed


class TestRateAgreement:
    def test_bell_support_exact(self, bell_report):
        row = _require(bell_report, "support-mismatch-count", 0.0)
        assert row.value == 0.0
        row = _require(bell_report, "ingoing-state-support", 0.0)
        assert row.value == 0.0

    def test_bell_rate_ratio(self, bell_report):
        # |ratio - 1| <= 0.1 puts the total-rate ratio inside [0.9, 1.1]
        _require(bell_report, "rate-ratio-offset-fine", 0.1)
        _require(bell_report, "pair-channel-ratio-offset", 0.1)
        assert bell_report.passed


class TestReversibility:
    def test_round_trip_wave(self, reversibility_report):
        _require(reversibility_report, "round-trip-wave-error", 1e-8)

    def test_two_sample_events(self, reversibility_report):
        _require(reversibility_report, "event-count-two-sample-p", 0.01,
                 op=">=")
        _require(reversibility_report, "event-time-two-sample-p", 0.01,
                 op=">=")


class TestNegativeControls:
    def test_every_violation_fixture_fails(self):
        controls = [
            ("conservation/unsymmetrized-operator",
             lambda: ex.run_conservation_suite(
                 default_config(11, n_radial_cells=4, r_max=0.8, n_phi=3),
                 break_adjoint=True)),
            ("equivariance/biased-initial-sample",
             lambda: ex.run_equivariance(
                 default_config(33, mass_parameter=0.0, charge=0.3,
                                n_radial_cells=6, r_max=1.2, dt=1.25e-4,
                                horizon=1e-3, n_traj=150,
                                checkpoint_times=(5e-4, 1e-3)),
                 bias_initial=True)),
            ("counting/doubled-reference-rate",
             lambda: ex.run_counting_statistics(
                 default_config(13, n_radial_cells=8, n_traj=250),
                 bias_rate=True)),
            ("bell/two-point-extraction",
             lambda: ex.run_bell_comparison(
                 default_config(5, mass_parameter=0.0, charge=0.3,
                                n_radial_cells=6),
                 two_point_control=True)),
            ("reversibility/skipped-time-flip",
             lambda: ex.run_reversibility(
                 default_config(42, mass_parameter=0.0, charge=0.3,
                                n_radial_cells=8, r_max=1.2, dt=1.25e-4,
                                horizon=0.01, n_traj=800),
                 skip_time_flip=True)),
            ("geodesics/wrong-asymptote-power",
             lambda: ex.run_geodesic_suite(default_config(1),
                                           wrong_power=True)),
            ("foliation/wrong-fit-window",
             lambda: ex.run_foliation_suite(default_config(1),
                                            wrong_window=True)),
        ]
        leaked = []
        for name, run in controls:
            rep = run()
            print(f"{'PASS' if not rep.passed else 'FAIL'} "
                  f"control {name}: suite passed={rep.passed}")
            if rep.passed:
                leaked.append(name)
        assert leaked == []
