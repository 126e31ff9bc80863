import json

import pytest

import flowrl.config as cfgmod
import flowrl.flow as fl
import flowrl.moons as moons
import flowrl.rl as rl


def test_empty_overlay_echoes_defaults():
    assert cfgmod.resolve_config({}) == cfgmod.default_config()
    assert cfgmod.load_config(None) == cfgmod.default_config()


def test_overlay_changes_only_named_leaves():
    doc = {"rl": {"steps": 7}, "moons": {"fit": {"hidden": 9}}}
    resolved = cfgmod.resolve_config(doc)
    base = cfgmod.default_config()
    assert resolved["rl"]["steps"] == 7
    assert resolved["moons"]["fit"]["hidden"] == 9
    resolved["rl"]["steps"] = base["rl"]["steps"]
    resolved["moons"]["fit"]["hidden"] = base["moons"]["fit"]["hidden"]
    assert resolved == base


def test_overlay_does_not_mutate_defaults():
    cfgmod.resolve_config({"flow": {"steps": 1}})
    assert cfgmod.default_config()["flow"]["steps"] != 1


def test_unknown_top_level_key_rejected():
    with pytest.raises(ValueError, match="bogus"):
        cfgmod.resolve_config({"bogus": {}})


def test_unknown_nested_key_names_full_path():
    with pytest.raises(ValueError, match="moons.fit.bogus"):
        cfgmod.resolve_config({"moons": {"fit": {"bogus": 1}}})


def test_section_must_be_object():
    with pytest.raises(ValueError, match="must be an object"):
        cfgmod.resolve_config({"moons": {"fit": 3}})
    with pytest.raises(ValueError, match="JSON object"):
        cfgmod.resolve_config([1, 2])


def test_load_config_reads_partial_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"dataset": {"n": 123}}))
    cfg = cfgmod.load_config(str(path))
    assert cfg["dataset"]["n"] == 123
    assert cfg["flow"]["kind"] == "cnf"


def test_resolved_config_is_a_fixed_point():
    cfg = cfgmod.resolve_config({"rl": {"gamma": 0.5}})
    assert cfgmod.resolve_config(cfg) == cfg


def test_flow_train_config_builder():
    section = cfgmod.default_config()["flow"]
    ftc = cfgmod.flow_train_config(section)
    assert isinstance(ftc, fl.FlowTrainConfig)
    assert ftc.steps == section["steps"]
    assert ftc.batch_choices == tuple(section["batch_choices"])
    assert ftc.s_max == section["s_max"]


def test_awac_config_builder():
    section = dict(cfgmod.default_config()["rl"])
    section["squash"] = "amp-tanh"
    section["amplitude"] = 2.5
    cfg = cfgmod.awac_config(section)
    assert isinstance(cfg, rl.AWACConfig)
    assert cfg.squash == "amp-tanh"
    assert cfg.amplitude == 2.5
    assert cfg.lambda_temp == pytest.approx(1.0 / 3.0)


def test_moons_config_builder():
    section = cfgmod.default_config()["moons"]
    data, sweep, resolution, seeds = cfgmod.moons_config(section)
    assert isinstance(data, moons.MoonsConfig)
    assert isinstance(sweep, moons.AmplitudeSweep)
    assert sweep.amplitudes == tuple(section["amplitudes"])
    assert resolution == section["resolution"]
    assert seeds == [0, 1, 2]


def test_moons_fit_configs_single_stage_by_default():
    section = cfgmod.default_config()["moons"]
    main, tune = cfgmod.moons_fit_configs(section)
    assert isinstance(main, fl.FlowTrainConfig)
    assert tune is None
    assert main.s_max == section["fit"]["s_max"]


def test_moons_fit_configs_fine_tune_stage():
    section = cfgmod.resolve_config(
        {"moons": {"fit": {"fine_tune_steps": 100, "fine_tune_lr": 1e-4}}}
    )["moons"]
    main, tune = cfgmod.moons_fit_configs(section)
    assert tune is not None
    assert tune.steps == 100
    assert tune.lr == 1e-4
    assert tune.seed == main.seed + 50
    assert tune.s_max == main.s_max
    assert tune.batch_size == main.batch_size


def test_full_scale_records_real_shrinks():
    cfg = cfgmod.default_config()
    for dotted, full in cfgmod.FULL_SCALE.items():
        section, field = dotted.split(".")
        assert cfg[section][field] < full
