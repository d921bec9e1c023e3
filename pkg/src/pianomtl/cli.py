"""Command line entry point: ``pianomtl <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 unstable training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import checkpoint, midi_io, synthetic
from .config import ConfigError, load_config
from .dataset import load_directory
from .evaluation import EvalReport, evaluate, render_table
from .features import write_wav
from .models import build_model
from .targets import derive_targets, frames_needed, write_mtgt
from .training import UNSTABLE, lr_range_test, make_objective, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_UNSTABLE = 0, 1, 2, 3

log = logging.getLogger("pianomtl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(data if isinstance(data, bytes) else data.encode())
    tmp.replace(path)


def cmd_parse(args):
    data = Path(args.midi).read_bytes()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", midi_io.DanglingNoteOn)
        midi = midi_io.parse_smf(data)
        events = midi.events
        notes = midi_io.extract_notes(events)
    sustain = midi_io.extract_sustain(events)
    corrected = midi_io.apply_sustain_correction(notes, sustain, args.threshold, midi.end_time)
    out = sys.stdout
    for n, c in zip(notes, corrected):
        out.write(json.dumps({"type": "note", "key": n.key, "onset": n.onset, "offset": n.offset,
                              "corrected_offset": c.offset, "velocity": n.velocity}) + "\n")
    for s in sustain:
        out.write(json.dumps({"type": "sustain", "time": s.time, "value": s.value}) + "\n")
    for w in caught:
        out.write(json.dumps({"type": "warning", "message": str(w.message)}) + "\n")
    return EXIT_OK


def cmd_targets(args):
    notes, sustain, _ = midi_io.load_groundtruth(Path(args.midi).read_bytes(), args.threshold)
    n_frames = args.frames if args.frames is not None else max(frames_needed(notes, args.fps), 1)
    targets = derive_targets(notes, sustain, args.fps, n_frames)
    _atomic_write(args.output, write_mtgt(targets))
    return EXIT_OK


def cmd_synth(args):
    cfg = load_config(args.config)
    if not cfg.out_dir:
        raise UsageError("config key out_dir is required for synth")
    out = Path(cfg.out_dir)
    for piece in range(cfg.synth_pieces):
        events, _ = synthetic.generate_performance(cfg.synth_config(piece))
        audio = synthetic.render_audio(events, cfg.sample_rate)
        _atomic_write(out / f"piece{piece:03d}.mid", midi_io.write_smf(synthetic.performance_midi(events)))
        write_wav(out / f"piece{piece:03d}.wav", audio, cfg.sample_rate)
    return EXIT_OK


def _train_data(cfg):
    if not cfg.train_dir:
        raise UsageError("config key train_dir is required")
    return load_directory(cfg.train_dir, cfg.feature_config(), cfg.sustain_threshold)


def cmd_lr_find(args):
    cfg = load_config(args.config)
    dataset = _train_data(cfg)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    batches = [dataset.batch(rng.integers(0, len(dataset), cfg.batch_size)) for _ in range(min(cfg.lr_find_steps, 64))]
    objective = make_objective(cfg.weights(), cfg.velocity_onset_mask)
    result = lr_range_test(lambda: build_model(cfg.model_spec()), batches, objective,
                           cfg.lr_find_start, cfg.lr_find_end, max_steps=cfg.lr_find_steps,
                           momentum=cfg.momentum, seed=cfg.seed)
    lines = ["lr,loss,smoothed"] + [
        f"{lr!r},{loss!r},{s!r}" for lr, loss, s in zip(result.lrs, result.losses, result.smoothed)]
    text = "\n".join(lines) + "\n"
    if cfg.curve:
        _atomic_write(cfg.curve, text)
    else:
        sys.stdout.write(text)
    print(json.dumps({"recommended_lr": result.recommended, "diverged": result.diverged,
                      "stop_step": result.stop_step}))
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config)
    if not cfg.checkpoint or not cfg.log:
        raise UsageError("config keys checkpoint and log are required for train")
    dataset = _train_data(cfg)
    valid = load_directory(cfg.valid_dir, cfg.feature_config(), cfg.sustain_threshold) if cfg.valid_dir else None
    weights = cfg.weights()

    def validation(model):
        return {"metrics": evaluate(model, valid, cfg.tau, weights).__dict__}

    log_path = Path(cfg.log)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    tmp_log = log_path.with_name(log_path.name + ".part")
    with open(tmp_log, "w") as f:
        f.write(json.dumps({"event": "config", "config": cfg.to_text()}) + "\n")
        result = train(cfg.train_config(), cfg.model_spec(), dataset, log_file=f,
                       validation=validation if valid is not None and cfg.validate_every else None)
        spec = result.model.spec
        meta = dict(architecture=spec.architecture,
                    stitch_mode=spec.stitch_mode if spec.architecture == "cross_stitch" else "",
                    alpha_init=spec.alpha_init if spec.architecture == "cross_stitch" else "",
                    weights=dict(weights.__dict__), lr=cfg.lr)
        if result.status == UNSTABLE:
            report = EvalReport.unstable_row(**meta)
        elif valid is not None:
            report = evaluate(result.model, valid, cfg.tau, weights, cfg.lr)
        else:
            report = None
        if report is not None:
            f.write(report.to_json() + "\n")
    tmp_log.replace(log_path)
    if result.status == UNSTABLE:
        return EXIT_UNSTABLE
    ckpt = Path(cfg.checkpoint)
    _atomic_write(ckpt, checkpoint.dumps({n: p.data for n, p in result.model.parameters().items()}))
    cfg.seed = result.seed
    _atomic_write(ckpt.with_suffix(".cfg"), cfg.to_text())
    return EXIT_OK


def cmd_eval(args):
    cfg_path = args.config or str(Path(args.ckpt).with_suffix(".cfg"))
    cfg = load_config(cfg_path)
    model = checkpoint.load_into(args.ckpt, build_model(cfg.model_spec()))
    data = load_directory(args.data, cfg.feature_config(), cfg.sustain_threshold)
    tau = cfg.tau if args.tau is None else args.tau
    report = evaluate(model, data, tau, cfg.weights(), cfg.lr)
    line = report.to_json() + "\n"
    if args.output:
        _atomic_write(args.output, line)
    sys.stdout.write(line)
    return EXIT_OK


def cmd_table(args):
    rows = []
    for path in args.logs:
        for line in Path(path).read_text().splitlines():
            if line.strip() and json.loads(line).get("event") == "report":
                rows.append(EvalReport.from_json(line))
    if not rows:
        raise ValueError("no report rows found")
    print(render_table(rows))
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="pianomtl", description="Multitask piano transcription toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("parse", help="dump notes and sustain events of a MIDI file as JSON lines")
    p.add_argument("midi")
    p.add_argument("--threshold", type=int, default=midi_io.SUSTAIN_THRESHOLD)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("targets", help="write framewise targets of a MIDI file (.mtgt)")
    p.add_argument("midi")
    p.add_argument("--fps", type=int, default=50)
    p.add_argument("--frames", type=int)
    p.add_argument("--threshold", type=int, default=midi_io.SUSTAIN_THRESHOLD)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_targets)

    for name, func, text in [("synth", cmd_synth, "render synthetic MIDI/WAV pairs"),
                             ("lr-find", cmd_lr_find, "learning rate range test"),
                             ("train", cmd_train, "train a model")]:
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a directory of MIDI/WAV pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--config")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("table", help="aggregate report rows of JSON-lines logs into a table")
    p.add_argument("logs", nargs="+")
    p.set_defaults(func=cmd_table)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"pianomtl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (midi_io.MidiError, checkpoint.CheckpointError, OSError, ValueError) as exc:
        print(f"pianomtl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
