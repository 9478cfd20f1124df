"""Experiment wiring: report plumbing, analytic suites, falsification knobs.

The statistical suites run at production scale in the acceptance tests; the
knob tests here use small configs whose failure is deterministic, checking
that each knob flips its own metric rather than a bystander.
"""

import numpy as np
import pytest

from singfock import experiments as ex
from singfock.config import default_config


class TestReport:
    def test_threshold_ops(self):
        rep = ex.ExperimentReport("demo", "abcdef012345", 7)
        assert rep.add("residual", 1e-12, 1e-8).passed
        assert rep.add("pvalue", 0.5, 0.01, op=">=").passed
        assert rep.passed
        rep.add("pvalue-low", 1e-4, 0.01, op=">=")
        assert not rep.passed

    def test_boundary_values_count_as_passing(self):
        rep = ex.ExperimentReport("demo", "abcdef012345", 7)
        assert rep.add("at-tol", 1.0, 1.0).passed
        assert rep.add("at-tol-ge", 0.01, 0.01, op=">=").passed

    def test_row_lookup(self):
        rep = ex.ExperimentReport("demo", "abcdef012345", 7)
        rep.add("a", 2.0, 1.0, note="big")
        row = rep.row("a")
        assert row.value == 2.0
        assert not row.passed
        assert row.note == "big"
        with pytest.raises(KeyError):
            rep.row("missing")

    def test_to_dict(self):
        rep = ex.ExperimentReport("demo", "abcdef012345", 7)
        rep.add("a", 0.5, 1.0)
        d = rep.to_dict()
        assert d["schema_version"] == 1
        assert d["experiment"] == "demo"
        assert d["digest"] == "abcdef012345"
        assert d["seed"] == 7
        assert d["passed"] is True
        assert d["rows"] == [{"name": "a", "value": 0.5, "tolerance": 1.0,
                              "op": "<=", "passed": True, "note": ""}]


class TestGeodesicSuite:
    def test_table_is_monotone_and_translates(self):
        params = default_config(1).geometry()
        r = np.linspace(0.1, 2.0, 12)
        base = ex.geodesic_table(params, r)
        shifted = ex.geodesic_table(params, r, t0=0.3)
        assert np.all(np.diff(base) > 0)
        np.testing.assert_allclose(shifted - base, 0.3, rtol=0, atol=1e-12)

    def test_passes_on_default_geometry(self):
        rep = ex.run_geodesic_suite(default_config(1))
        assert rep.passed
        assert rep.row("closed-form-max-error").value <= 1e-8
        assert rep.row("small-radius-asymptote-rel-error").value <= 0.01

    def test_wrong_power_knob_fails(self):
        rep = ex.run_geodesic_suite(default_config(1), wrong_power=True)
        assert not rep.passed
        assert not rep.row("small-radius-asymptote-rel-error").passed
        # the closed-form check does not depend on the knob
        assert rep.row("closed-form-max-error").passed


class TestFoliationSuite:
    def test_passes_on_default_geometry(self):
        rep = ex.run_foliation_suite(default_config(1))
        assert rep.passed
        assert rep.row("monotone-divergence-violations").value == 0.0

    def test_wrong_window_knob_fails(self):
        rep = ex.run_foliation_suite(default_config(1), wrong_window=True)
        assert not rep.passed
        assert not rep.row("fitted-power-offset").passed


class TestFalsificationKnobs:
    def test_unsymmetrized_operator(self):
        cfg = default_config(11, n_radial_cells=4, r_max=0.8, n_phi=3)
        rep = ex.run_conservation_suite(cfg, break_adjoint=True)
        assert not rep.passed
        row = rep.row("adjoint-symmetry-residual")
        assert not row.passed
        assert row.value > 1e-3

    def test_biased_initial_sample(self):
        cfg = default_config(33, mass_parameter=0.0, charge=0.3,
                             n_radial_cells=6, r_max=1.2, dt=1.25e-4,
                             horizon=1e-3, n_traj=150,
                             checkpoint_times=(5e-4, 1e-3))
        rep = ex.run_equivariance(cfg, bias_initial=True)
        assert not rep.passed
        # every trajectory parked in one cell: TV against the wave is near 1
        row = rep.row("sampling-baseline-tv")
        assert not row.passed
        assert row.value > 0.5

    def test_doubled_reference_rate(self):
        cfg = default_config(13, n_radial_cells=8, n_traj=250)
        rep = ex.run_counting_statistics(cfg, bias_rate=True)
        assert not rep.passed
        assert not rep.row("frozen-rate-ks-p").passed

    def test_two_point_extraction(self):
        cfg = default_config(5, mass_parameter=0.0, charge=0.3,
                             n_radial_cells=6)
        rep = ex.run_bell_comparison(cfg, two_point_control=True)
        assert not rep.passed
        # spreading the boundary coupling over two shells halves the rates
        row = rep.row("rate-ratio-offset-fine")
        assert not row.passed
        assert row.value > 0.3
        assert not rep.row("pair-channel-ratio-offset").passed

    def test_skipped_time_flip(self):
        cfg = default_config(42, mass_parameter=0.0, charge=0.3,
                             n_radial_cells=8, r_max=1.2, dt=1.25e-4,
                             horizon=0.01, n_traj=800)
        rep = ex.run_reversibility(cfg, skip_time_flip=True)
        assert not rep.passed
        # unreflected clocks pile the two event samples at opposite ends
        assert not rep.row("event-time-two-sample-p").passed
        assert rep.row("round-trip-wave-error").passed
