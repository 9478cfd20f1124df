"""Run configuration parsing, validation, and digests."""

import json

import pytest

from singfock.config import (ConfigError, RunConfig, canonical_json,
                             default_config, from_dict, parse_config)


class TestDefaults:
    def test_default_config_is_valid(self):
        cfg = default_config(7)
        assert cfg.master_seed == 7
        assert cfg.n_max == 2
        assert cfg.boundary_profile == "default"
        assert abs(cfg.charge) > abs(cfg.mass_parameter)
        cfg.geometry()
        cfg.grid()

    def test_overrides_pass_through(self):
        cfg = default_config(3, n_radial_cells=8, dt=1e-4)
        assert cfg.n_radial_cells == 8
        assert cfg.dt == 1e-4
        assert cfg.master_seed == 3

    def test_replace_returns_new_value(self):
        a = default_config(1)
        b = a.replace(charge=3.0)
        assert b.charge == 3.0 and a.charge == 2.0


class TestValidation:
    def test_missing_seed_rejected(self):
        with pytest.raises(ConfigError, match="master_seed"):
            from_dict({})

    def test_negative_seed_rejected(self):
        with pytest.raises(ConfigError, match="master_seed"):
            from_dict({"ensemble": {"master_seed": -1}})

    def test_subextremal_geometry_rejected(self):
        with pytest.raises(ConfigError, match="charge"):
            from_dict({"ensemble": {"master_seed": 0},
                       "geometry": {"mass_parameter": 2.0, "charge": 1.0}})

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown section"):
            from_dict({"ensemble": {"master_seed": 0}, "misc": {}})

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            from_dict({"ensemble": {"master_seed": 0},
                       "grid": {"radius": 1.0}})

    def test_bad_sector_ceiling_rejected(self):
        with pytest.raises(ConfigError, match="n_max"):
            from_dict({"ensemble": {"master_seed": 0}, "model": {"n_max": 3}})

    def test_unknown_profile_rejected(self):
        with pytest.raises(ConfigError, match="boundary_profile"):
            from_dict({"ensemble": {"master_seed": 0},
                       "model": {"boundary_profile": "radial"}})

    def test_unsorted_checkpoints_rejected(self):
        with pytest.raises(ConfigError, match="checkpoint"):
            from_dict({"ensemble": {"master_seed": 0,
                                    "checkpoint_times": [0.2, 0.1]}})

    def test_checkpoint_beyond_horizon_rejected(self):
        with pytest.raises(ConfigError, match="checkpoint"):
            from_dict({"ensemble": {"master_seed": 0,
                                    "checkpoint_times": [1.0]},
                       "evolution": {"horizon": 0.5}})

    def test_boolean_is_not_a_number(self):
        with pytest.raises(ConfigError, match="expected"):
            from_dict({"ensemble": {"master_seed": 0},
                       "geometry": {"charge": True}})

    def test_unknown_experiment_name_rejected(self):
        with pytest.raises(ConfigError, match="experiments"):
            from_dict({"ensemble": {"master_seed": 0},
                       "experiments": ["spectra"]})

    def test_wrong_schema_version_rejected(self):
        with pytest.raises(ConfigError, match="schema_version"):
            from_dict({"schema_version": 99,
                       "ensemble": {"master_seed": 0}})


class TestDigest:
    def test_stable_across_processes(self):
        # digest depends only on canonical JSON content, not object identity
        a = default_config(5)
        b = from_dict(json.loads(canonical_json(a.to_dict())))
        assert a.digest() == b.digest()

    def test_seed_changes_digest(self):
        assert default_config(1).digest() != default_config(2).digest()

    def test_output_dir_excluded(self):
        a = default_config(5)
        b = a.replace(output_dir="/tmp/elsewhere")
        assert a.digest() == b.digest()

    def test_physics_changes_digest(self):
        a = default_config(5)
        assert a.digest() != a.replace(dt=1e-3).digest()
        assert a.digest() != a.replace(charge=2.5).digest()

    def test_digest_format(self):
        d = default_config(0).digest()
        assert len(d) == 12
        int(d, 16)


class TestRoundTrip:
    def test_file_round_trip(self, tmp_path):
        cfg = default_config(41, n_traj=17, checkpoint_times=(0.1, 0.2),
                             output_dir="runs/a")
        p = tmp_path / "run.json"
        p.write_text(json.dumps(cfg.to_dict()))
        back = parse_config(p)
        assert back == cfg
        assert back.digest() == cfg.digest()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError, match="JSON"):
            parse_config(p)

    def test_canonical_json_is_sorted_and_minimal(self):
        s = canonical_json({"b": 1.5, "a": [1, 2]})
        assert s == '{"a":[1,2],"b":1.5}'
