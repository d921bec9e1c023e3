"""Flat ``key = value`` run configuration with environment overrides."""

from __future__ import annotations

import os
import typing
from dataclasses import asdict, dataclass, fields

from .features import FeatureConfig
from .models import ModelSpec
from .synthetic import SynthConfig
from .training import TaskWeights, TrainConfig

ENV_PREFIX = "PIANOMTL_"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # optimisation
    lr: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    batch_size: int = 64
    steps: int = 20000
    restart_limit: int = 3
    lambda_on: float = 1.0
    lambda_int: float = 1.0
    lambda_off: float = 1.0
    lambda_vel: float = 0.5
    lambda_sus: float = 0.1
    velocity_onset_mask: bool = False
    log_every: int = 1
    validate_every: int = 0
    # model
    architecture: str = "hard_sharing"
    stitch_mode: str = "full"
    alpha_init: str = "imbalanced"
    trunk_channels: int = 0
    dense_units: int = 0
    noise_sigma: float = 0.1
    head_prior: float = 0.01            # 0: zero sigmoid-head biases
    # features
    sample_rate: int = 22050
    fps: int = 50
    n_fft: int = 2048
    f_min: float = 27.5
    f_max: float = 0.0
    # groundtruth / evaluation
    sustain_threshold: int = 64
    tau: float = 0.5
    # synthetic data
    synth_pieces: int = 1
    synth_duration: float = 60.0
    synth_polyphony_max: int = 4
    synth_note_rate: float = 4.0
    synth_sustain_prob: float = 0.3
    synth_key_min: int = 21
    synth_key_max: int = 108
    synth_velocity_min: int = 30
    synth_velocity_max: int = 127
    # learning rate range test
    lr_find_start: float = 1e-8
    lr_find_end: float = 10.0
    lr_find_steps: int = 1000
    # paths
    train_dir: str = ""
    valid_dir: str = ""
    out_dir: str = ""
    checkpoint: str = ""
    log: str = ""
    curve: str = ""

    def validate(self):
        if self.sample_rate % self.fps:
            raise ConfigError(f"hop: sample_rate {self.sample_rate} is not divisible by fps {self.fps}")
        try:
            self.train_config()
            self.model_spec()
            self.synth_config(0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not 0 <= self.sustain_threshold <= 127:
            raise ConfigError("sustain_threshold must be in [0, 127]")
        return self

    def weights(self):
        return TaskWeights(self.lambda_on, self.lambda_int, self.lambda_off, self.lambda_vel, self.lambda_sus)

    def train_config(self):
        return TrainConfig(
            lr=self.lr, momentum=self.momentum, nesterov=self.nesterov, batch_size=self.batch_size,
            steps=self.steps, seed=self.seed, restart_limit=self.restart_limit, weights=self.weights(),
            velocity_onset_mask=self.velocity_onset_mask, log_every=self.log_every,
            validate_every=self.validate_every)

    def model_spec(self):
        return ModelSpec(
            architecture=self.architecture, stitch_mode=self.stitch_mode, alpha_init=self.alpha_init,
            trunk_channels=self.trunk_channels or None, dense_units=self.dense_units or None,
            noise_sigma=self.noise_sigma, head_prior=self.head_prior or None, seed=self.seed)

    def feature_config(self):
        return FeatureConfig(self.sample_rate, self.fps, self.n_fft, self.f_min, self.f_max or None)

    def synth_config(self, piece):
        return SynthConfig(
            seed=self.seed * 1000 + piece, duration=self.synth_duration,
            polyphony_max=self.synth_polyphony_max, note_rate=self.synth_note_rate,
            sustain_prob=self.synth_sustain_prob, key_range=(self.synth_key_min, self.synth_key_max),
            velocity_range=(self.synth_velocity_min, self.synth_velocity_max),
            sample_rate=self.sample_rate)

    def to_text(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(self).items())


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_HINTS = typing.get_type_hints(RunConfig)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key, text):
    kind = _HINTS[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_config(text, env=None, base=None):
    """Parse ``key = value`` lines (``#`` starts a comment), then apply
    ``PIANOMTL_<KEY>`` environment overrides."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    env = os.environ if env is None else env
    for key in _TYPES:
        name = ENV_PREFIX + key.upper()
        if name in env:
            values[key] = _coerce(key, env[name])
    cfg = base if base is not None else RunConfig()
    for key, value in values.items():
        setattr(cfg, key, value)
    return cfg.validate()


def load_config(path, env=None):
    with open(path) as f:
        return parse_config(f.read(), env)
