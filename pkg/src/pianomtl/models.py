"""Hard-sharing and cross-stitch multitask transcription networks.

Both share the same convolutional stack (per tower for cross-stitch):

    conv c1 3x3 -> conv c1 3x3 -> pool 1x2 -> conv c2 3x3 -> pool 1x2
    -> conv c3 3xF -> conv c3 3x1 -> dense

where ``F`` spans all remaining frequency bins, so the stack collapses an
11 x 144 snippet to 1 x 1.  Every conv is followed by ELU and a
multiplicative plus an additive gaussian noise layer.  Weights are
Glorot-uniform; biases are zero except those of the sigmoid heads, which
start at the logit of ``head_prior`` so that the initial outputs match the
sparsity of the binary targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import CONTEXT, N_BINS

TASKS = ("on", "int", "off", "vel", "sus")
HEAD_UNITS = {"on": 88, "int": 88, "off": 88, "vel": 88, "sus": 1}
SIGMOID_TASKS = ("on", "int", "off")
HARD_SHARING = "hard_sharing"
CROSS_STITCH = "cross_stitch"


class NonFiniteActivation(FloatingPointError):
    def __init__(self, layer):
        super().__init__(f"non-finite activation after {layer}")
        self.layer = layer


@dataclass
class ModelSpec:
    architecture: str = HARD_SHARING
    stitch_mode: str = "full"           # "full" | "detached"
    alpha_init: str = "imbalanced"      # "imbalanced" | "balanced"
    trunk_channels: int | None = None   # 96 hard sharing, 48 per tower
    dense_units: int | None = None      # 512 hard sharing, 128 per tower
    noise_sigma: float = 0.1
    head_prior: float | None = 0.01     # None: zero sigmoid-head biases
    seed: int = 0
    n_bins: int = N_BINS
    context: int = CONTEXT
    tasks: tuple = field(default=TASKS)

    def __post_init__(self):
        if self.architecture not in (HARD_SHARING, CROSS_STITCH):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.stitch_mode not in ("full", "detached"):
            raise ValueError(f"unknown stitch_mode {self.stitch_mode!r}")
        if self.alpha_init not in ("imbalanced", "balanced"):
            raise ValueError(f"unknown alpha_init {self.alpha_init!r}")
        if self.head_prior is not None and not 0 < self.head_prior < 1:
            raise ValueError(f"head_prior must be in (0, 1), got {self.head_prior}")
        if tuple(self.tasks) != TASKS:
            raise ValueError(f"tasks are fixed to {TASKS}")
        hard = self.architecture == HARD_SHARING
        if self.trunk_channels is None:
            self.trunk_channels = 96 if hard else 48
        if self.dense_units is None:
            self.dense_units = 512 if hard else 128

    @property
    def conv_channels(self):
        c = self.trunk_channels
        return (c // 3, c // 3, 2 * c // 3, c, c)


def conv_layout(spec):
    """``[(name, kernel, pool_after)]`` for the conv stack of ``spec``."""
    c1, c1b, c2, c3, c3b = spec.conv_channels
    width = spec.n_bins - 2 - 2
    width = (width // 2 - 2) // 2
    if width < 1 or spec.context < 9:
        raise ValueError(f"input {spec.context}x{spec.n_bins} too small for the conv stack")
    return [
        ("conv1", (3, 3, c1), False),
        ("conv2", (3, 3, c1b), True),
        ("conv3", (3, 3, c2), True),
        ("conv4", (3, width, c3), False),
        ("conv5", (3, 1, c3b), False),
    ]


def _stack_output(spec):
    t = spec.context - 2 * 5
    return t, spec.conv_channels[-1]


def alpha_matrix(kind, m=len(TASKS), dtype=np.float32):
    if kind == "balanced":
        return np.full((m, m), 1.0 / m, dtype=dtype)
    return np.where(np.eye(m, dtype=bool), 0.9, 0.1).astype(dtype)


@dataclass
class Predictions:
    on: Tensor
    int: Tensor
    off: Tensor
    vel: Tensor
    sus: Tensor

    def __getitem__(self, task):
        return getattr(self, task)

    def numpy(self):
        return {t: getattr(self, t).data for t in TASKS}


class Tower:
    """One conv stack plus dense layer; optionally followed by task heads."""

    def __init__(self, spec, rng, prefix, heads, dtype=np.float32):
        self.spec = spec
        self.prefix = prefix
        self.params = {}
        self.layout = conv_layout(spec)
        c_in = 1
        for name, (kh, kw, c_out), _ in self.layout:
            self._param(f"{name}.w", ad.glorot_uniform((kh, kw, c_in, c_out), rng, dtype))
            self._param(f"{name}.b", np.zeros(c_out, dtype))
            c_in = c_out
        t_out, c_out = _stack_output(spec)
        d_in = t_out * c_out
        self._param("dense.w", ad.glorot_uniform((d_in, spec.dense_units), rng, dtype))
        self._param("dense.b", np.zeros(spec.dense_units, dtype))
        self.heads = tuple(heads)
        for task in self.heads:
            units = HEAD_UNITS[task]
            self._param(f"head.{task}.w", ad.glorot_uniform((spec.dense_units, units), rng, dtype))
            self._param(f"head.{task}.b", np.full(units, _head_bias(spec, task), dtype))

    def _param(self, name, value):
        self.params[f"{self.prefix}{name}"] = Tensor(value, requires_grad=True, name=f"{self.prefix}{name}")

    def p(self, name):
        return self.params[f"{self.prefix}{name}"]

    @property
    def n_layers(self):
        return len(self.layout) + 1

    def layer(self, index, z, training, rng):
        """Apply stack layer ``index`` (0-based; the last one is the dense layer)."""
        sigma = self.spec.noise_sigma
        if index < len(self.layout):
            name, _, pool = self.layout[index]
            z = ad.elu(ad.conv2d(z, self.p(f"{name}.w"), self.p(f"{name}.b")))
            z = ad.gaussian_noise(z, "multiplicative", sigma, training, rng)
            z = ad.gaussian_noise(z, "additive", sigma, training, rng)
            if pool:
                z = ad.max_pool2d(z, (1, 2))
            return z
        return ad.elu(ad.dense(ad.flatten(z), self.p("dense.w"), self.p("dense.b")))

    def head(self, task, h):
        y = ad.dense(h, self.p(f"head.{task}.w"), self.p(f"head.{task}.b"))
        return ad.sigmoid(y) if task in SIGMOID_TASKS else ad.relu_straight_through(y)


def _head_bias(spec, task):
    if task not in SIGMOID_TASKS or spec.head_prior is None:
        return 0.0
    return float(np.log(spec.head_prior / (1 - spec.head_prior)))


def _check(z, layer):
    if not z.is_finite():
        raise NonFiniteActivation(layer)
    return z


def _as_input(x, dtype):
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[..., None]
    return Tensor(x.astype(dtype, copy=False), dtype=dtype)


class Model:
    def __init__(self, spec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)

    @property
    def params(self):
        raise NotImplementedError

    def parameters(self):
        """Parameters in deterministic (sorted-name) order."""
        return dict(sorted(self.params.items()))

    def n_parameters(self):
        return int(np.sum([p.data.size for p in self.params.values()]))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def __call__(self, x, training=False, rng=None):
        return self.forward(x, training, rng)


class HardSharingNet(Model):
    def __init__(self, spec, dtype=np.float32):
        super().__init__(spec, dtype)
        rng = np.random.Generator(np.random.Philox(spec.seed))
        self.trunk = Tower(spec, rng, "trunk.", TASKS, dtype)

    @property
    def params(self):
        return self.trunk.params

    def forward(self, x, training=False, rng=None):
        z = _as_input(x, self.dtype)
        for i in range(self.trunk.n_layers):
            z = _check(self.trunk.layer(i, z, training, rng), f"trunk layer {i + 1}")
        return Predictions(**{t: _check(self.trunk.head(t, z), f"head {t}") for t in TASKS})


def tower_seed(seed, index):
    return [seed, index]


def build_tower(spec, index, dtype=np.float32):
    """Tower ``index`` of a cross-stitch net, initialised exactly as inside the net."""
    task = TASKS[index]
    rng = np.random.Generator(np.random.Philox(key=tower_seed(spec.seed, index)))
    return Tower(spec, rng, f"tower{index}.", (task,), dtype)


class CrossStitchNet(Model):
    """One tower per task, a trainable M x M mixing unit after every layer."""

    def __init__(self, spec, dtype=np.float32):
        super().__init__(spec, dtype)
        self.towers = [build_tower(spec, i, dtype) for i in range(len(TASKS))]
        self.alphas = [
            Tensor(alpha_matrix(spec.alpha_init, dtype=dtype), requires_grad=True, name=f"stitch{l}.alpha")
            for l in range(self.towers[0].n_layers)]

    @property
    def params(self):
        out = {}
        for tower in self.towers:
            out.update(tower.params)
        out.update({a.name: a for a in self.alphas})
        return out

    def forward(self, x, training=False, rng=None):
        x = _as_input(x, self.dtype)
        detached = self.spec.stitch_mode == "detached"
        zs = [x] * len(self.towers)
        for l, alpha in enumerate(self.alphas):
            zs = [_check(tower.layer(l, z, training, rng), f"tower {m} layer {l + 1}")
                  for m, (tower, z) in enumerate(zip(self.towers, zs))]
            zs = [ad.stitch(alpha, zs, m, detached) for m in range(len(zs))]
        return Predictions(**{
            t: _check(tower.head(t, z), f"head {t}") for t, tower, z in zip(TASKS, self.towers, zs)})


class SingleTaskNet(Model):
    """A standalone tower: the cross-stitch net with identity mixing, one task."""

    def __init__(self, spec, index, dtype=np.float32):
        super().__init__(spec, dtype)
        self.task = TASKS[index]
        self.tower = build_tower(spec, index, dtype)

    @property
    def params(self):
        return self.tower.params

    def forward(self, x, training=False, rng=None):
        z = _as_input(x, self.dtype)
        for i in range(self.tower.n_layers):
            z = self.tower.layer(i, z, training, rng)
        return self.tower.head(self.task, z)


def build_model(spec, dtype=np.float32):
    if spec.architecture == HARD_SHARING:
        return HardSharingNet(spec, dtype)
    return CrossStitchNet(spec, dtype)
