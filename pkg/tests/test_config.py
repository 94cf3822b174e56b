import yaml

import pytest

from agd import config as C
from agd.errors import InputError


def test_defaults_validate_and_hash_is_stable():
    cfg = C.ExperimentConfig().validate()
    h = C.config_hash(cfg)
    assert len(h) == 16
    assert all(c in "0123456789abcdef" for c in h)
    assert C.config_hash(C.ExperimentConfig()) == h


def test_hash_ignores_key_order():
    d = C.to_dict(C.ExperimentConfig())
    reordered = dict(reversed(list(d.items())))
    assert C.config_hash(C.from_dict(reordered)) == C.config_hash(C.from_dict(d))


def test_hash_tracks_values():
    base = C.ExperimentConfig()
    changed = C.apply_overrides(base, ["seed=7"])
    assert C.config_hash(changed) != C.config_hash(base)


def test_unknown_top_level_key_rejected():
    with pytest.raises(InputError, match="unknown config key"):
        C.from_dict({"seeed": 3})


def test_unknown_nested_key_rejected():
    with pytest.raises(InputError, match="stepz"):
        C.from_dict({"distill": {"stepz": 10}})


def test_non_mapping_section_rejected():
    with pytest.raises(InputError, match="must be a mapping"):
        C.from_dict({"distill": 5})


class TestTypeChecking:
    def test_numeric_string_accepted_for_float(self):
        # YAML reads bare 1e6 as a string; float fields parse it anyway
        cfg = C.apply_overrides(C.ExperimentConfig(), ["base.peak_lr=1e6"])
        assert cfg.base.peak_lr == 1e6

    def test_non_numeric_string_rejected_for_float(self):
        with pytest.raises(InputError, match="base.peak_lr"):
            C.apply_overrides(C.ExperimentConfig(), ["base.peak_lr=fast"])

    def test_list_where_scalar_expected(self):
        with pytest.raises(InputError, match="distill.steps"):
            C.from_dict({"distill": {"steps": [1, 2]}})

    def test_scalar_where_list_expected(self):
        with pytest.raises(InputError, match="base.hidden"):
            C.from_dict({"base": {"hidden": 32}})

    def test_wrong_element_type(self):
        with pytest.raises(InputError, match="base.hidden"):
            C.from_dict({"base": {"hidden": [32, "wide"]}})

    def test_int_promotes_to_float_for_stable_hash(self):
        a = C.apply_overrides(C.ExperimentConfig(), ["schedule.sigma_max=5"])
        b = C.apply_overrides(C.ExperimentConfig(), ["schedule.sigma_max=5.0"])
        assert a.schedule.sigma_max == 5.0
        assert C.config_hash(a) == C.config_hash(b)

    def test_float_rejected_for_int_field(self):
        with pytest.raises(InputError, match="distill.steps"):
            C.apply_overrides(C.ExperimentConfig(), ["distill.steps=5.5"])


def test_yaml_file_round_trip(tmp_path):
    cfg = C.apply_overrides(C.ExperimentConfig(), ["distill.steps=123"])
    path = tmp_path / "run.yaml"
    C.save(cfg, path)
    loaded = C.load(path)
    assert loaded.distill.steps == 123
    assert C.config_hash(loaded) == C.config_hash(cfg)


def test_missing_file_names_path(tmp_path):
    missing = tmp_path / "nope.yaml"
    with pytest.raises(InputError, match="nope.yaml"):
        C.load(missing)


def test_unparseable_yaml_rejected(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("distill: {steps: [unclosed\n")
    with pytest.raises(InputError, match="not valid YAML"):
        C.load(path)


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert C.config_hash(C.load(path)) == C.config_hash(C.ExperimentConfig())


class TestOverrides:
    def test_scalar_types_parse(self):
        cfg = C.apply_overrides(
            C.ExperimentConfig(),
            ["distill.steps=200", "schedule.sigma_max=5.5", "base.hidden=[32, 32]"],
        )
        assert cfg.distill.steps == 200
        assert cfg.schedule.sigma_max == 5.5
        assert cfg.base.hidden == (32, 32)

    def test_original_config_untouched(self):
        cfg = C.ExperimentConfig()
        C.apply_overrides(cfg, ["distill.steps=1"])
        assert cfg.distill.steps == 5000

    def test_unknown_path_rejected(self):
        with pytest.raises(InputError, match="unknown config key"):
            C.apply_overrides(C.ExperimentConfig(), ["distill.nope=1"])
        with pytest.raises(InputError, match="unknown config key"):
            C.apply_overrides(C.ExperimentConfig(), ["nosection.steps=1"])

    def test_malformed_item_rejected(self):
        with pytest.raises(InputError, match="section.key=value"):
            C.apply_overrides(C.ExperimentConfig(), ["distill.steps"])

    def test_validation_still_runs(self):
        with pytest.raises(InputError):
            C.apply_overrides(C.ExperimentConfig(), ["dataset.name=spiral"])


class TestValidation:
    @pytest.mark.parametrize(
        "override",
        [
            "dataset.name=spiral",
            "trajectories.kind=rk4",
            "trajectories.source=hand",
            "trajectories.omega_min=0.5",
            "trajectories.count=0",
            "distill.loss=huber",
            "adapters.architecture=film",
            "schedule.num_steps=1",
            "eval.omegas=[]",
        ],
    )
    def test_bad_values_rejected(self, override):
        with pytest.raises(InputError):
            C.apply_overrides(C.ExperimentConfig(), [override])

    def test_omega_range_must_be_ordered(self):
        with pytest.raises(InputError):
            C.apply_overrides(
                C.ExperimentConfig(),
                ["trajectories.omega_min=4", "trajectories.omega_max=2"],
            )


class TestFactories:
    def test_default_dataset(self):
        cfg = C.ExperimentConfig()
        assert C.make_dataset(cfg).name.startswith("ring8")

    def test_alternate_dataset(self):
        cfg = C.apply_overrides(C.ExperimentConfig(), ["dataset.name=single_gaussian"])
        ds = C.make_dataset(cfg)
        assert ds.name != C.make_dataset(C.ExperimentConfig()).name

    def test_schedule_fields_flow_through(self):
        cfg = C.apply_overrides(
            C.ExperimentConfig(),
            ["schedule.num_steps=16", "schedule.sigma_max=4.0"],
        )
        sched = C.make_schedule(cfg)
        assert sched.num_steps == 16
        assert sched.sigmas[0] == pytest.approx(4.0, rel=1e-12)


def test_saved_yaml_is_plain_scalars(tmp_path):
    path = tmp_path / "cfg.yaml"
    C.save(C.ExperimentConfig(), path)
    data = yaml.safe_load(path.read_text())
    assert isinstance(data["base"]["hidden"], list)
    assert data["distill"]["loss"] == "l2"
