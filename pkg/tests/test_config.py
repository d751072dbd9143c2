import json
import unittest

import pytest

from sphs_core.config import RunConfig, env_overrides, load_run_config, parse_run_config
from sphs_core.errors import ConfigurationError, NumericalError, SphsError, ValidationFailure


def minimal_config(**sim):
    data = {"sim": {"seed": 7}}
    data["sim"].update(sim)
    return data


class TestRunConfig(unittest.TestCase):
    def test_defaults(self):
        """Only the seed is mandatory; every other block has defaults."""
        config = parse_run_config(minimal_config())
        self.assertEqual(config.sim.seed, 7)
        self.assertEqual(config.model.type, "string")
        self.assertEqual(config.noise.I, 16)
        self.assertEqual(config.sim.steps, 1000)

    def test_moments_threshold(self):
        """The moments command has its own standard-error multiple."""
        self.assertEqual(parse_run_config(minimal_config()).moments.n_se, 3.0)
        data = minimal_config()
        data["moments"] = {"n_se": 5.0}
        data["energy"] = {"n_se": 2.0}
        config = parse_run_config(data)
        self.assertEqual(config.moments.n_se, 5.0)
        self.assertEqual(config.energy.n_se, 2.0)
        data["moments"] = {"n_se": 0.0}
        with self.assertRaises(ConfigurationError):
            parse_run_config(data)

    def test_seed_is_mandatory(self):
        with self.assertRaises(ConfigurationError):
            parse_run_config({"sim": {}})

    def test_seed_range(self):
        parse_run_config(minimal_config(seed=2**64 - 1))
        with self.assertRaises(ConfigurationError):
            parse_run_config(minimal_config(seed=2**64))
        with self.assertRaises(ConfigurationError):
            parse_run_config(minimal_config(seed=-1))

    def test_dt_must_be_positive(self):
        with self.assertRaises(ConfigurationError):
            parse_run_config(minimal_config(dt=0.0))

    def test_truncation_limit(self):
        """K may not exceed N/4."""
        parse_run_config(minimal_config(K=64, N=256))
        with self.assertRaises(ConfigurationError):
            parse_run_config(minimal_config(K=65, N=256))

    def test_unknown_keys_rejected(self):
        data = minimal_config()
        data["sim"]["workers"] = 4
        with self.assertRaises(ConfigurationError):
            parse_run_config(data)

    def test_file_model_needs_path(self):
        data = minimal_config()
        data["model"] = {"type": "file"}
        with self.assertRaises(ConfigurationError):
            parse_run_config(data)

    def test_explicit_q_length(self):
        data = minimal_config()
        data["noise"] = {"I": 3, "q": {"type": "explicit", "values": [1.0, 0.5]}}
        with self.assertRaises(ConfigurationError):
            parse_run_config(data)

    def test_hash_is_stable_and_seed_sensitive(self):
        first = parse_run_config(minimal_config())
        second = parse_run_config(minimal_config())
        other = parse_run_config(minimal_config(seed=8))
        self.assertEqual(first.config_hash(), second.config_hash())
        self.assertNotEqual(first.config_hash(), other.config_hash())
        self.assertEqual(len(first.config_hash()), 64)

    def test_manifest_round_trip(self):
        """A manifest embedding the resolved config parses back to the same config."""
        config = parse_run_config(minimal_config(K=8, N=64))
        manifest = {"command": "validate", "resolved_config": config.model_dump(mode="json")}
        self.assertEqual(parse_run_config(manifest).config_hash(), config.config_hash())


def test_load_run_config_seed_precedence(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(minimal_config()))
    assert load_run_config(str(path), environ={}).sim.seed == 7
    assert load_run_config(str(path), environ={"SPHS_SEED": "11"}).sim.seed == 11
    assert load_run_config(str(path), seed=13, environ={"SPHS_SEED": "11"}).sim.seed == 13


def test_load_run_config_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_run_config(str(tmp_path / "missing.json"), environ={})
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_run_config(str(broken), environ={})
    path = tmp_path / "run.json"
    path.write_text(json.dumps(minimal_config()))
    with pytest.raises(ConfigurationError):
        load_run_config(str(path), environ={"SPHS_SEED": "seven"})


def test_env_overrides_strip_prefix():
    env = env_overrides({"SPHS_WORKERS": "4", "SPHS_LOG_LEVEL": "DEBUG", "HOME": "/root"})
    assert env == {"workers": "4", "log_level": "DEBUG"}


def test_worker_count_is_not_part_of_the_config():
    assert "workers" not in RunConfig.model_fields["sim"].annotation.model_fields


@pytest.mark.parametrize("error, code", [
    (ConfigurationError, 3),
    (ValidationFailure, 1),
    (NumericalError, 2),
    (SphsError, 1),
])
def test_exit_codes(error, code):
    assert error.exit_code == code
    assert issubclass(error, SphsError)
