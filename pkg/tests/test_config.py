from pathlib import Path

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from photosketch.config import (RUN_ROOT_ENV, RunConfig, apply_overrides, config_hash, dump_config, from_dict,
                                load_config, to_dict)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults_match_recipe():
    c = RunConfig()
    assert (c.schedule.encoder_epochs, c.schedule.estimator_epochs, c.schedule.estimator_lr) == (1300, 1200, 0.003)
    assert (c.optim.optimizer, c.optim.weight_decay, c.optim.batch_size, c.optim.cosine) == ("sgd", 1e-4, 256, True)
    assert c.encoder.momentum == 0.999 and c.encoder.learning_rate == 0.03
    assert (c.loss.lambda_sim, c.loss.lambda_con, c.loss.tau_sim) == (0.1, 1.0, 0.001)
    assert c.schedule.freeze_encoder and not c.schedule.joint


def test_yaml_round_trip(tmp_path):
    cfg = load_config(None, ["encoder.width=16", "loss.loss_stages=[3]", "augment.scale=[0.9, 1.1]"])
    dump_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg
    assert back.loss.loss_stages == (3,) and back.augment.scale == (0.9, 1.1)
    assert config_hash(back) == config_hash(cfg)


def test_overrides_parse_yaml_values():
    data = apply_overrides({"a": {"b": 1}}, ["a.b=2.5", "a.c=[1, 2]", "d.e=true"])
    assert data == {"a": {"b": 2.5, "c": [1, 2]}, "d": {"e": True}}


def test_unknown_key_rejected():
    with pytest.raises(KeyError):
        load_config(None, ["schedule.not_a_field=1"])


@pytest.mark.parametrize("override", ["schedule.estimator_lr=0", "encoder.learning_rate=-1",
                                      "schedule.encoder_epochs=-1", "optim.optimizer=rmsprop",
                                      "encoder.queue_size=100", "loss.tau_sim=0", "optim.grad_clip=0"])
def test_validation_errors(override):
    with pytest.raises(ValueError):
        load_config(None, [override])


def test_hash_changes_with_any_field():
    a = RunConfig()
    b = load_config(None, ["loss.lambda_con=0.5"])
    assert config_hash(a) != config_hash(b)
    assert config_hash(a) == config_hash(RunConfig())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-5, 1.0), st.booleans())
def test_dict_round_trip_property(seed, lr, joint):
    cfg = RunConfig(seed=seed)
    cfg.schedule.estimator_lr = lr
    cfg.schedule.joint = joint
    assert from_dict(RunConfig, to_dict(cfg)) == cfg
    assert from_dict(RunConfig, yaml.safe_load(yaml.safe_dump(to_dict(cfg)))) == cfg


def test_run_root_environment(monkeypatch, tmp_path):
    cfg = RunConfig(run_root=str(tmp_path / "from_config"))
    monkeypatch.delenv(RUN_ROOT_ENV, raising=False)
    assert cfg.resolved_run_root() == tmp_path / "from_config"
    monkeypatch.setenv(RUN_ROOT_ENV, str(tmp_path / "from_env"))
    assert cfg.resolved_run_root() == tmp_path / "from_env"


@pytest.mark.parametrize("name", ["desk.yaml", "full_scale.yaml", "synthetic_recovery.yaml"])
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / name)
    cfg.validate()


def test_desk_profile():
    cfg = load_config(CONFIGS / "desk.yaml")
    assert len(cfg.data.categories) == 5
    assert (cfg.schedule.encoder_epochs, cfg.schedule.estimator_epochs, cfg.optim.batch_size) == (50, 50, 32)


def test_full_scale_profile():
    cfg = load_config(CONFIGS / "full_scale.yaml")
    assert cfg.encoder.backbone_depth == "large"
    assert cfg.schedule.encoder_epochs + cfg.schedule.estimator_epochs == 2500
    assert cfg.optim.batch_size == 256
