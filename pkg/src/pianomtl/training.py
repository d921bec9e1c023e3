"""Losses, weighted multitask objective, Nesterov SGD, LR range test and the
restart-on-divergence training loop."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .models import TASKS, build_model

log = logging.getLogger(__name__)

CONVERGED = "Converged"
UNSTABLE = "Unstable"


class DataEmpty(ValueError):
    pass


class NeverDiverged(RuntimeWarning):
    pass


@dataclass
class TaskWeights:
    on: float = 1.0
    int: float = 1.0
    off: float = 1.0
    vel: float = 0.5
    sus: float = 0.1

    def __post_init__(self):
        values = self.as_tuple()
        if any(v < 0 for v in values) or not any(v > 0 for v in values):
            raise ValueError(f"task weights must be >= 0 with at least one > 0, got {values}")

    def as_tuple(self):
        return tuple(getattr(self, t) for t in TASKS)

    def __getitem__(self, task):
        return getattr(self, task)


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    nesterov: bool = True
    batch_size: int = 64
    steps: int = 20000
    seed: int = 0
    restart_limit: int = 3
    weights: TaskWeights = field(default_factory=TaskWeights)
    velocity_onset_mask: bool = False
    log_every: int = 1
    validate_every: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def task_losses(pred, target, velocity_onset_mask=False):
    """Per-task losses: BCE for on/int/off, squared error for vel/sus.

    ``target`` maps task names to arrays shaped like the predictions.  With
    ``velocity_onset_mask`` the velocity error only counts cells whose
    (widened) onset target is active.
    """
    losses = {t: ad.binary_cross_entropy(pred[t], target[t]) for t in ("on", "int", "off")}
    mask = np.asarray(target["on"]) > 0 if velocity_onset_mask else None
    losses["vel"] = ad.squared_error(pred["vel"], target["vel"], mask)
    sus = np.asarray(target["sus"]).reshape(pred["sus"].shape)
    losses["sus"] = ad.squared_error(pred["sus"], sus)
    return losses


def aggregate_loss(losses, weights):
    """``sum_m lambda_m * L_m``; zero-weighted tasks are left out of the graph."""
    total = None
    for task in TASKS:
        w = weights[task]
        if w == 0:
            continue
        term = losses[task] * float(w)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class NesterovSGD:
    """``v <- mu v - lr g;  theta <- theta + mu v - lr g``."""

    def __init__(self, params, lr, momentum=0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            sgd_nesterov_step(p.data, p.grad, v, self.lr, self.momentum)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def sgd_nesterov_step(param, grad, velocity, lr, momentum=0.9):
    """In-place Nesterov update of ``param`` and ``velocity`` arrays."""
    dt = param.dtype.type
    lr, momentum = dt(lr), dt(momentum)
    velocity *= momentum
    velocity -= lr * grad
    param += momentum * velocity - lr * grad
    return param, velocity


# ---------------------------------------------------------------------------
# learning rate range test
# ---------------------------------------------------------------------------

@dataclass
class LRFinderResult:
    lrs: list
    losses: list
    smoothed: list
    recommended: float
    diverged: bool
    stop_step: int


def analyze_lr_curve(lrs, losses, beta=0.98, divergence_factor=4.0):
    """Smooth a raw (lr, loss) curve and locate the stop point and recommendation.

    Returns ``(smoothed, stop_index, recommended_lr, diverged)``; the
    recommendation is the lr at the smoothed minimum divided by ten.
    """
    avg, best, best_i = 0.0, math.inf, 0
    smoothed = []
    for i, loss in enumerate(losses):
        if not math.isfinite(loss):
            return smoothed, i, lrs[best_i] / 10, True
        avg = beta * avg + (1 - beta) * loss
        s = avg / (1 - beta ** (i + 1))
        smoothed.append(s)
        if i > 0 and s > divergence_factor * best:
            return smoothed, i, lrs[best_i] / 10, True
        if s < best:
            best, best_i = s, i
    return smoothed, len(losses) - 1, lrs[best_i] / 10, False


def lr_range_test(model_builder, data, objective, lr_start=1e-8, lr_end=10.0, growth=None,
                  max_steps=1000, momentum=0.9, beta=0.98, divergence_factor=4.0, seed=0):
    """Exponential learning-rate sweep.

    ``model_builder()`` returns a fresh model exposing ``parameters()``;
    ``objective(model, batch, rng)`` returns a scalar Tensor; ``data`` is a
    sequence of batches, cycled.  ``growth`` defaults to the factor that takes
    ``lr_start`` to ``lr_end`` in ``max_steps`` steps.
    """
    if growth is None:
        growth = (lr_end / lr_start) ** (1.0 / max_steps)
    if growth <= 1:
        raise ValueError("growth must be > 1")
    if len(data) == 0:
        raise DataEmpty("no batches for the range test")
    model = model_builder()
    rng = np.random.Generator(np.random.Philox(seed))
    opt = NesterovSGD(model.parameters().values(), lr_start, momentum)
    lrs, losses = [], []
    lr = lr_start
    for step in range(max_steps):
        opt.lr = lr
        opt.zero_grad()
        try:
            loss = objective(model, data[step % len(data)], rng)
            value = loss.item()
        except FloatingPointError:
            value = math.nan
        lrs.append(lr)
        losses.append(value)
        smoothed, stop, rec, diverged = analyze_lr_curve(lrs, losses, beta, divergence_factor)
        if diverged:
            return LRFinderResult(lrs, losses, smoothed, rec, True, stop)
        loss.backward()
        opt.step()
        lr *= growth
    smoothed, stop, rec, _ = analyze_lr_curve(lrs, losses, beta, divergence_factor)
    warnings.warn(NeverDiverged(f"learning rate range test never diverged in {max_steps} steps"))
    return LRFinderResult(lrs, losses, smoothed, rec, False, stop)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    status: str
    model: object
    records: list
    seed: int
    restarts: int

    @property
    def stable(self):
        return self.status == CONVERGED


def make_objective(weights, velocity_onset_mask=False, training=True):
    def objective(model, batch, rng=None):
        x, target = batch
        pred = model(x, training=training, rng=rng)
        losses = task_losses(pred, target, velocity_onset_mask)
        return aggregate_loss(losses, weights)
    return objective


def attempt_seed(seed, attempt):
    """Seed used for restart ``attempt`` (0 = the configured seed)."""
    if attempt == 0:
        return seed
    return int(np.random.SeedSequence([seed, attempt]).generate_state(1)[0])


def train(config, model_spec, dataset, log_file=None, validation=None, loss_hook=None,
          dtype=np.float32):
    """Run ``config.steps`` minibatch updates, restarting on divergence.

    ``dataset`` needs ``len()`` and ``batch(indices)``.  ``loss_hook(step,
    attempt, loss)`` may replace the aggregate loss value (fault injection).
    Returns a :class:`TrainResult`; every logged record is also written to
    ``log_file`` as a JSON line.
    """
    if len(dataset) == 0:
        raise DataEmpty("training set has no frames")
    records = []

    def emit(record):
        records.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")

    seed = config.seed
    for attempt in range(config.restart_limit + 1):
        seed = attempt_seed(config.seed, attempt)
        spec = _with_seed(model_spec, seed)
        model = build_model(spec, dtype)
        diverged_at = _run(config, model, dataset, seed, attempt, emit, validation, loss_hook)
        if diverged_at is None:
            emit({"event": "status", "status": CONVERGED, "seed": seed, "restarts": attempt})
            return TrainResult(CONVERGED, model, records, seed, attempt)
        if attempt < config.restart_limit:
            next_seed = attempt_seed(config.seed, attempt + 1)
            emit({"event": "restart", "step": diverged_at, "attempt": attempt + 1,
                  "old_seed": seed, "new_seed": next_seed})
            log.warning("non-finite loss at step %d, restarting with seed %d", diverged_at, next_seed)
    emit({"event": "status", "status": UNSTABLE, "seed": seed, "restarts": config.restart_limit})
    return TrainResult(UNSTABLE, model, records, seed, config.restart_limit)


def _with_seed(spec, seed):
    return replace(spec, seed=seed)


def _run(config, model, dataset, seed, attempt, emit, validation, loss_hook):
    rng = np.random.Generator(np.random.Philox(seed))
    opt = NesterovSGD(model.parameters().values(), config.lr, config.momentum if config.nesterov else 0.0)
    weights = config.weights
    n = len(dataset)
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, n, size=config.batch_size)
        x, target = dataset.batch(idx)
        opt.zero_grad()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                pred = model(x, training=True, rng=rng)
                losses = task_losses(pred, target, config.velocity_onset_mask)
                total = aggregate_loss(losses, weights)
                value = total.item()
        except FloatingPointError:
            losses, value = {}, math.nan
        if loss_hook is not None:
            value = loss_hook(step, attempt, value)
        if not math.isfinite(value):
            return step
        if config.log_every and step % config.log_every == 0:
            emit({"event": "step", "step": step, "lr": config.lr,
                  "losses": {t: float(losses[t].item()) for t in TASKS},
                  "aggregate": value})
        with np.errstate(over="ignore", invalid="ignore"):
            total.backward()
            opt.step()
        if validation is not None and config.validate_every and step % config.validate_every == 0:
            emit({"event": "validation", "step": step, **validation(model)})
    return None


def checkpoint_params(model):
    return {name: p.data for name, p in model.parameters().items()}


def config_record(config):
    d = asdict(config)
    d["weights"] = dict(zip(TASKS, config.weights.as_tuple()))
    return d
