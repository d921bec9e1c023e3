import numpy as np
import pytest

from pianomtl import checkpoint
from pianomtl.config import ConfigError, RunConfig, parse_config
from pianomtl.models import ModelSpec, build_model


def test_checkpoint_round_trip(tmp_path):
    model = build_model(ModelSpec(trunk_channels=6, dense_units=8, seed=1))
    checkpoint.save(tmp_path / "m.ckpt", model)
    other = build_model(ModelSpec(trunk_channels=6, dense_units=8, seed=2))
    checkpoint.load_into(tmp_path / "m.ckpt", other)
    for name, p in model.parameters().items():
        assert np.array_equal(p.data, other.parameters()[name].data)
    data = (tmp_path / "m.ckpt").read_bytes()
    assert checkpoint.dumps({n: p.data for n, p in other.parameters().items()}) == data


def test_checkpoint_errors():
    model = build_model(ModelSpec(trunk_channels=6, dense_units=8))
    data = checkpoint.dumps({n: p.data for n, p in model.parameters().items()})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"XXXX" + data[4:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(data[:-3])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_into(data, build_model(ModelSpec(trunk_channels=9, dense_units=8)))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_into(data, build_model(ModelSpec(architecture="cross_stitch", trunk_channels=6,
                                                         dense_units=8)))


def test_parse_config_and_env_override():
    cfg = parse_config("""
        # comment
        seed = 7
        lr = 0.05   # trailing comment
        nesterov = false
        architecture = cross_stitch
        train_dir = /data/train
    """, env={"PIANOMTL_BATCH_SIZE": "12", "PIANOMTL_LR": "0.02"})
    assert cfg.seed == 7 and cfg.lr == 0.02 and cfg.batch_size == 12 and cfg.nesterov is False
    assert cfg.model_spec().architecture == "cross_stitch" and cfg.train_dir == "/data/train"
    assert cfg.train_config().batch_size == 12
    assert cfg.synth_config(3).seed == 7003


def test_config_text_round_trip():
    cfg = parse_config("lr = 0.123\nlambda_sus = 0.01\nout_dir = x\n", env={})
    assert parse_config(cfg.to_text(), env={}) == cfg


@pytest.mark.parametrize("text", [
    "bogus = 1", "seed 3", "seed = three", "nesterov = maybe", "lr = 0", "batch_size = 0",
    "architecture = rnn", "fps = 64", "lambda_on = 0\nlambda_int = 0\nlambda_off = 0\nlambda_vel = 0\nlambda_sus = 0",
    "sustain_threshold = 200",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text, env={})


def test_defaults_follow_training_protocol():
    cfg = RunConfig()
    assert (cfg.momentum, cfg.nesterov, cfg.batch_size, cfg.restart_limit) == (0.9, True, 64, 3)
    assert cfg.weights().as_tuple() == (1.0, 1.0, 1.0, 0.5, 0.1)
