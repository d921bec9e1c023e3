"""Acceptance criteria 1-11.  Each test prints one ``[PASS]``/``[FAIL]`` line."""

import contextlib
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from pianomtl import autodiff as ad
from pianomtl import midi_io, synthetic
from pianomtl.autodiff import Tensor
from pianomtl.dataset import FrameDataset, piece_from_audio
from pianomtl.evaluation import (FramewiseCounts, evaluate, framewise_counts, framewise_prf,
                                 predict_frames, r_squared)
from pianomtl.features import FeatureConfig
from pianomtl.midi_io import MidiError, Note, SustainEvent, parse_smf, write_smf
from pianomtl.models import TASKS, CrossStitchNet, ModelSpec, SingleTaskNet, build_model
from pianomtl.targets import derive_targets, read_mtgt, write_mtgt
from pianomtl.training import (NesterovSGD, TaskWeights, TrainConfig, analyze_lr_curve,
                               lr_range_test, make_objective, task_losses, train)

from helpers import golden_midi_bytes, golden_mtgt_bytes, random_midi, strip_time
from test_autodiff import CASES, N_INSTANCES, check_gradients, t64
from test_evaluation import brute_force_prf, brute_force_r2
from test_models import per_task_grads, random_targets, small_spec
from test_training import Quadratic, quadratic_objective

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    @contextlib.contextmanager
    def run(label):
        start = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            with capsys.disabled():
                print(f"\n[FAIL] {label} ({time.perf_counter() - start:.1f}s): {exc!r}"[:400])
            raise
        with capsys.disabled():
            print(f"\n[PASS] {label} ({time.perf_counter() - start:.1f}s)")
    return run


# ---------------------------------------------------------------------- 1

def test_c01_gradient_correctness(verdict):
    with verdict("C1 gradient correctness: float64 central differences, rel err < 1e-4, 20 instances/op"):
        start = time.perf_counter()
        worst = 0.0
        for name in sorted(CASES):
            rng = np.random.default_rng(1000 + sorted(CASES).index(name))
            for _ in range(N_INSTANCES):
                fn, arrays = CASES[name](rng)
                worst = max(worst, check_gradients(fn, arrays, rng))
        assert worst < 1e-4
        assert time.perf_counter() - start < 120


# ---------------------------------------------------------------------- 2

def test_c02_straight_through_relu(verdict):
    with verdict("C2 straight-through ReLU: forward max(0,x), backward = upstream gradient exactly"):
        rng = np.random.default_rng(2)
        for _ in range(200):
            x = rng.standard_normal(int(rng.integers(1, 50))) * 10 ** rng.uniform(-3, 3)
            x[rng.random(x.shape) < 0.1] = 0.0
            g = rng.standard_normal(x.shape)
            xt = t64(x)
            y = ad.relu_straight_through(xt)
            assert np.array_equal(y.data, np.maximum(x, 0))
            y.backward(g)
            assert np.array_equal(xt.grad, g)


# ---------------------------------------------------------------------- 3

def test_c03_detachment_theorem(verdict):
    with verdict("C3 detachment theorem: detached cross-tower gradients bitwise zero, full mode non-zero"):
        start = time.perf_counter()
        rng = np.random.default_rng(3)
        x = rng.random((3, 11, 144))
        target = random_targets(rng, 3)
        for mode in ("detached", "full"):
            model = CrossStitchNet(small_spec(architecture="cross_stitch", stitch_mode=mode), np.float64)
            nonzero = False
            for m, task in enumerate(TASKS):
                for name, g in per_task_grads(model, x, target, task).items():
                    if name.startswith("tower") and not name.startswith(f"tower{m}."):
                        if mode == "detached":
                            assert np.all(g == 0.0), (task, name)
                        nonzero |= bool(np.any(g != 0.0))
            assert nonzero == (mode == "full")

        # crafted two-task toy: tower m computes z_m = elu(w_m * x)
        for detached in (True, False):
            w = [t64(rng.standard_normal(4)), t64(rng.standard_normal(4))]
            alpha = t64([[0.9, 0.1], [0.1, 0.9]])
            xs = rng.standard_normal(4)
            zs = [ad.elu(wm * Tensor(xs, dtype=np.float64)) for wm in w]
            loss0 = ad.reduce_sum(ad.stitch(alpha, zs, 0, detached) * ad.stitch(alpha, zs, 0, detached))
            loss0.backward()
            cross = w[1].grad if w[1].grad is not None else np.zeros(4)
            assert np.all(cross == 0.0) if detached else np.any(cross != 0.0)
            assert np.any(w[0].grad != 0.0)
        assert time.perf_counter() - start < 30


# ---------------------------------------------------------------------- 4

def test_c04_identity_stitch_equivalence(verdict):
    with verdict("C4 identity-stitch equivalence: outputs and full-mode gradients equal 5 single-task nets"):
        rng = np.random.default_rng(4)
        x = rng.random((3, 11, 144))
        target = random_targets(rng, 3)
        spec = small_spec(architecture="cross_stitch", stitch_mode="full", seed=11)
        cs = CrossStitchNet(spec, np.float64)
        for a in cs.alphas:
            a.data[:] = np.eye(5)
        pred = cs(x)
        losses = task_losses(pred, target)
        total = losses["on"]
        for t in TASKS[1:]:
            total = total + losses[t]
        cs.zero_grad()
        total.backward()
        for i, task in enumerate(TASKS):
            single = SingleTaskNet(spec, i, np.float64)
            out = single(x)
            assert np.array_equal(out.data, pred[task].data)
            single.zero_grad()
            task_losses({**{t: pred[t] for t in TASKS}, task: out}, target)[task].backward()
            for name, p in single.parameters().items():
                assert np.array_equal(p.grad, cs.parameters()[name].grad), name


# ---------------------------------------------------------------------- 5

def test_c05_metric_oracles(verdict):
    with verdict("C5 metric oracles: P/R/F1 and R^2 exact on 1000 random matrices; hand case F1 = 2/3"):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            shape = (int(rng.integers(1, 7)), int(rng.integers(1, 7)))
            pred = rng.random(shape) > rng.random()
            target = rng.random(shape) > rng.random()
            assert framewise_prf(pred, target) == brute_force_prf(pred, target)
            tall = (shape[0] + 1, shape[1])  # R^2 needs >= 2 cells
            y, p = rng.random(tall), rng.random(tall)
            assert r_squared(p, y) == pytest.approx(brute_force_r2(p, y), rel=1e-12, abs=1e-12)
        pred, target = np.array([1, 1, 1, 0, 0]), np.array([1, 1, 0, 1, 0])
        assert framewise_counts(pred, target) == FramewiseCounts(2, 1, 1)
        assert framewise_prf(pred, target)[2] == pytest.approx(2 / 3, abs=1e-15)


# ---------------------------------------------------------------------- 6

def test_c06_golden_targets(verdict):
    with verdict("C6 golden target file byte-exact; sustain value 64 -> OFF, 65 -> ON"):
        notes, sustain, _ = midi_io.load_groundtruth(golden_midi_bytes())
        data = write_mtgt(derive_targets(notes, sustain, 50, 152))
        assert data == golden_mtgt_bytes()
        back = read_mtgt(data)
        assert back.on[4:7, 60 - 21].tolist() == [1, 1, 1]          # onset widened to 3 frames
        assert back.int[149, 64 - 21] == 1 and back.int[150, 64 - 21] == 0  # extended to 3.0 s
        note = [Note(60, 0.0, 0.5, 100)]
        for value, extended in ((64, False), (65, True)):
            pedal = [SustainEvent(0.2, value), SustainEvent(1.0, 0)]
            out = midi_io.apply_sustain_correction(note, pedal)[0]
            assert (out.offset == 1.0) == extended and (out.offset == 0.5) != extended
            sus = derive_targets(note, pedal, 50, 60).sus
            np.testing.assert_allclose(sus[10:50], np.float32(value / 127))  # raw pedal depth


# ---------------------------------------------------------------------- 7

def _mutate(rng, data):
    data = bytearray(data)
    for _ in range(int(rng.integers(1, 6))):
        op = rng.integers(0, 4)
        pos = int(rng.integers(0, max(len(data), 1)))
        if op == 0 and data:
            data[pos % len(data)] = int(rng.integers(0, 256))
        elif op == 1:
            data.insert(pos, int(rng.integers(0, 256)))
        elif op == 2 and data:
            del data[pos % len(data)]
        else:
            data = data[:pos]
    return bytes(data)


def test_c07_parser_robustness(verdict):
    with verdict("C7 parser: 500-file write->parse round trip; 10,000 byte mutations raise typed errors only"):
        rng = np.random.default_rng(7)
        corpus = []
        for _ in range(500):
            m = random_midi(rng)
            data = write_smf(m)
            back = parse_smf(data)
            assert (back.format, back.ticks_per_quarter) == (m.format, m.ticks_per_quarter)
            assert [[strip_time(e) for e in t] for t in back.tracks] == \
                [[strip_time(e) for e in t] for t in m.tracks]
            corpus.append(data)
        typed = 0
        for i in range(10_000):
            try:
                parse_smf(_mutate(rng, corpus[i % len(corpus)]))
            except MidiError:
                typed += 1
        assert typed > 0


# ---------------------------------------------------------------------- 8

def test_c08_lr_range_test(verdict):
    with verdict("C8 LR range test on 0.5*100*theta^2: recommendation < 0.02 and rescaling-invariant"):
        base = lr_range_test(Quadratic, [None], quadratic_objective(100.0), 1e-8, 10.0, max_steps=1000)
        assert base.diverged and base.recommended < 2 / 100
        for c in (1e-3, 0.25, 3.0, 1e4):
            # rescaled curve -> same analysis
            _, stop, rec, div = analyze_lr_curve(base.lrs, [c * l for l in base.losses])
            assert (stop, rec, div) == (base.stop_step, base.recommended, base.diverged)
            # rescaled loss with the lr grid rescaled by 1/c -> same trajectory
            scaled = lr_range_test(Quadratic, [None], quadratic_objective(100.0, c), 1e-8 / c, 10.0 / c,
                                   max_steps=1000)
            assert scaled.stop_step == base.stop_step
            assert scaled.recommended * c == pytest.approx(base.recommended, rel=1e-9)


# ---------------------------------------------------------------------- 9

OVERFIT_LR = 0.03


def _synthetic_dataset(seeds, duration, fc, **synth):
    ds = FrameDataset()
    for s in seeds:
        events, notes = synthetic.generate_performance(
            synthetic.SynthConfig(seed=s, duration=duration, sample_rate=fc.sample_rate, **synth))
        audio = synthetic.render_audio(events, fc.sample_rate)
        ds.add(*piece_from_audio(audio, notes, midi_io.extract_sustain(events), fc))
    return ds


def test_c09_overfit_one_batch(verdict):
    with verdict("C9 overfit: hard sharing, lambda=(1,1,1,0.5,0.1), one batch of 64, loss -90% in 500 steps"):
        start = time.perf_counter()
        fc = FeatureConfig()
        ds = _synthetic_dataset([9], 20.0, fc)
        idx = np.random.default_rng(9).choice(len(ds), 64, replace=False)
        batch = ds.batch(idx)
        model = build_model(ModelSpec(architecture="hard_sharing", seed=9))
        weights = TaskWeights(1, 1, 1, 0.5, 0.1)
        train_obj = make_objective(weights, training=True)
        eval_obj = make_objective(weights, training=False)
        opt = NesterovSGD(model.parameters().values(), OVERFIT_LR)
        rng = np.random.Generator(np.random.Philox(9))
        initial = eval_obj(model, batch).item()
        for _ in range(500):
            opt.zero_grad()
            loss = train_obj(model, batch, rng)
            loss.backward()
            opt.step()
            assert math.isfinite(loss.item())
        final = eval_obj(model, batch).item()
        elapsed = time.perf_counter() - start
        print(f"overfit: loss {initial:.4f} -> {final:.4f} ({1 - final / initial:.1%} drop) in {elapsed:.0f}s")
        assert final <= 0.1 * initial
        assert elapsed < 300


# ---------------------------------------------------------------------- 10

E2E_SYNTH = dict(key_range=(60, 65), polyphony_max=2, note_rate=4.0, sustain_prob=0.3)
E2E_RUNS = {
    "hard_sharing": dict(weights=TaskWeights(1, 1, 1, 0.5, 0.1), batch_size=16, lr=0.03),
    "cross_stitch": dict(weights=TaskWeights(1, 1, 1, 1, 1), batch_size=16, lr=0.03),
}


def permuted_f1(pred, target, rng):
    return framewise_prf(pred, target[rng.permutation(len(target))])[2]


@pytest.mark.slow
def test_c10_end_to_end(verdict):
    with verdict("C10 end-to-end: 2000 steps on 120 s synthetic audio, on F1 > 0.5, int F1 > 0.6, > permuted"):
        start = time.perf_counter()
        fc = FeatureConfig()
        train_set = _synthetic_dataset([1, 2, 3, 4], 30.0, fc, **E2E_SYNTH)
        valid_set = _synthetic_dataset([100], 30.0, fc, **E2E_SYNTH)
        assert len(train_set) >= 120 * fc.fps
        targets = valid_set.all_targets()
        failures = []
        for arch, run in E2E_RUNS.items():
            t0 = time.perf_counter()
            result = train(TrainConfig(lr=run["lr"], batch_size=run["batch_size"], steps=2000, seed=0,
                                       weights=run["weights"], log_every=100),
                           ModelSpec(architecture=arch, seed=0), train_set)
            report = evaluate(result.model, valid_set, 0.5, run["weights"])
            pred = predict_frames(result.model, valid_set)
            rng = np.random.default_rng(10)
            base_on = permuted_f1(pred["on"] > 0.5, targets["on"], rng)
            base_int = permuted_f1(pred["int"] > 0.5, targets["int"], rng)
            print(f"{arch}: status={result.status} restarts={result.restarts} on F1={report.on:.3f} "
                  f"(permuted {base_on:.3f}) int F1={report.int:.3f} (permuted {base_int:.3f}) "
                  f"off F1={report.off:.3f} train {time.perf_counter() - t0:.0f}s")
            if not (report.on > 0.5 and report.int > 0.6 and report.on > base_on and report.int > base_int):
                failures.append(arch)
            if arch == "cross_stitch" and result.restarts != 0:
                failures.append("cross_stitch restarts")
        elapsed = time.perf_counter() - start
        print(f"end-to-end total {elapsed:.0f}s")
        assert not failures, failures
        assert elapsed < 1200


# ---------------------------------------------------------------------- 11

def test_c11_reproducibility(verdict, tmp_path):
    with verdict("C11 reproducibility: two identical runs give bit-identical loss logs and checkpoints"):
        data = tmp_path / "data"
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"seed = 5\nsynth_pieces = 2\nsynth_duration = 4\nout_dir = {data}\n"
                       f"train_dir = {data}\ntrunk_channels = 12\ndense_units = 32\nbatch_size = 8\n"
                       f"steps = 30\nlr = 0.01\ncheckpoint = {tmp_path}/run/m.ckpt\n"
                       f"log = {tmp_path}/run/log.jsonl\n")
        env = {k: v for k, v in os.environ.items() if not k.startswith("PIANOMTL_")}
        cmd = [sys.executable, "-m", "pianomtl"]
        subprocess.run(cmd + ["synth", "--config", str(cfg)], check=True, env=env)
        outputs = []
        for _ in range(2):
            subprocess.run(cmd + ["train", "--config", str(cfg)], check=True, env=env)
            outputs.append(((tmp_path / "run/log.jsonl").read_bytes(), (tmp_path / "run/m.ckpt").read_bytes()))
        assert outputs[0] == outputs[1]
        assert outputs[0][0].count(b'"event": "step"') == 30
        # an in-process run with a restart is reproducible too
        ds = FrameDataset()
        ds.add(*piece_from_audio(np.zeros(22050), [Note(60, 0.1, 0.5, 90)], [], FeatureConfig()))
        hook = lambda step, attempt, loss: math.nan if (attempt, step) == (0, 3) else loss
        runs = [train(TrainConfig(lr=0.01, batch_size=4, steps=6, seed=1), small_spec(), ds, loss_hook=hook)
                for _ in range(2)]
        assert runs[0].records == runs[1].records and runs[0].restarts == 1
        for a, b in zip(runs[0].model.parameters().values(), runs[1].model.parameters().values()):
            assert np.array_equal(a.data, b.data)
