import pytest

from dsbn.config import ExperimentConfig, config_from_dict, dump_config, load_config
from dsbn.errors import ConfigurationError


class TestConfig:
    def test_defaults_validate(self):
        cfg = ExperimentConfig().validate()
        assert cfg.baseline == "mstn" and cfg.batch_size == 40
        assert cfg.stage1.eta0 == 2 * cfg.stage2.eta0
        assert cfg.data.n_per_class == 500 and cfg.data.rotation_deg == 50.0 and cfg.data.noise == 0.35

    def test_nested_override(self):
        cfg = config_from_dict({"seeds": [1, 2], "stage1": {"max_iters": 10}, "data": {"noise": 0.2}})
        assert cfg.seeds == [1, 2] and cfg.stage1.max_iters == 10 and cfg.data.noise == 0.2
        assert cfg.stage2.max_iters == 3000

    def test_int_accepted_as_float(self):
        assert config_from_dict({"data": {"noise": 1}}).data.noise == 1.0

    @pytest.mark.parametrize(
        "raw,field",
        [
            ({"baselin": "mstn"}, "baselin"),
            ({"data": {"nosie": 0.1}}, "data.nosie"),
            ({"batch_size": "40"}, "batch_size"),
            ({"batch_size": True}, "batch_size"),
            ({"baseline": "dann"}, "baseline"),
            ({"norm_stage2": "gn"}, "norm_stage2"),
            ({"seeds": []}, "seeds"),
            ({"stage1": {"eta0": -1.0}}, "stage1"),
            ({"data": {"shift": [1.0]}}, "data.shift"),
            ({"adaptation": {"sm_theta": 1.5}}, "adaptation.sm_theta"),
        ],
    )
    def test_field_level_errors(self, raw, field):
        with pytest.raises(ConfigurationError, match=field.replace(".", r"\.")):
            config_from_dict(raw)

    def test_warm_start_needs_matching_norms(self):
        with pytest.raises(ConfigurationError):
            config_from_dict({"norm_stage1": "bn", "norm_stage2": "dsbn", "adaptation": {"stage2_warm_start": True}})
        config_from_dict({"norm_stage1": "bn", "norm_stage2": "bn", "adaptation": {"stage2_warm_start": True}})

    def test_stage2_none_allowed(self):
        assert config_from_dict({"norm_stage2": "none"}).norm_stage2 == "none"

    def test_dump_load_round_trip(self, tmp_path):
        cfg = config_from_dict({"seeds": [3], "baseline": "cpua", "data": {"shift": [0.5, 0.25]}})
        path = tmp_path / "c.toml"
        path.write_text(dump_config(cfg))
        assert load_config(path) == cfg

    def test_missing_and_malformed(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "absent.toml")
        bad = tmp_path / "bad.toml"
        bad.write_text("seeds = [")
        with pytest.raises(ConfigurationError):
            load_config(bad)
