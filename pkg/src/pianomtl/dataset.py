"""Frame-level datasets pairing spectrogram snippets with target rows."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import features, midi_io
from .targets import derive_targets, frames_needed

TASK_KEYS = ("on", "int", "off", "vel", "sus")


class FrameDataset:
    """Concatenation of pieces; index ``i`` is one frame of one piece."""

    def __init__(self, pieces=()):
        self.pieces = []
        self._offsets = [0]
        for frames, targets in pieces:
            self.add(frames, targets)

    def add(self, frames, targets):
        if frames.shape[0] != targets.n_frames:
            raise ValueError(f"{frames.shape[0]} spectrogram frames vs {targets.n_frames} target frames")
        self.pieces.append((features.snippet_windows(frames), targets))
        self._offsets.append(self._offsets[-1] + frames.shape[0])

    def __len__(self):
        return self._offsets[-1]

    def _locate(self, idx):
        idx = np.asarray(idx)
        piece = np.searchsorted(self._offsets, idx, side="right") - 1
        return piece, idx - np.asarray(self._offsets)[piece]

    def batch(self, idx):
        piece, local = self._locate(idx)
        x = np.empty((len(piece), features.CONTEXT, self.pieces[0][0].shape[2]), np.float32)
        target = {
            "on": np.empty((len(piece), 88), np.float32), "int": np.empty((len(piece), 88), np.float32),
            "off": np.empty((len(piece), 88), np.float32), "vel": np.empty((len(piece), 88), np.float32),
            "sus": np.empty((len(piece), 1), np.float32)}
        for p in np.unique(piece):
            sel = piece == p
            windows, tg = self.pieces[p]
            rows = local[sel]
            x[sel] = windows[rows]
            for k in TASK_KEYS:
                src = getattr(tg, k)[rows]
                target[k][sel] = src.reshape(len(rows), -1)
        return x, target

    def all_targets(self):
        return {k: np.concatenate([getattr(tg, k).reshape(tg.n_frames, -1) for _, tg in self.pieces])
                for k in TASK_KEYS}


def piece_from_audio(samples, notes, sustain, feature_config):
    """Spectrogram plus targets for one piece; the spectrogram is zero-padded
    (silence) when the groundtruth outlasts the audio."""
    frames = features.spectrogram(samples, feature_config).frames
    need = frames_needed(notes, feature_config.fps)
    if need > frames.shape[0]:
        frames = np.pad(frames, ((0, need - frames.shape[0]), (0, 0)))
    targets = derive_targets(notes, sustain, feature_config.fps, frames.shape[0])
    return frames, targets


def load_directory(path, feature_config, threshold=midi_io.SUSTAIN_THRESHOLD):
    """Load every ``<name>.mid``/``<name>.wav`` pair of a directory (sorted by name)."""
    path = Path(path)
    ds = FrameDataset()
    for mid in sorted(path.glob("*.mid")):
        wav = mid.with_suffix(".wav")
        if not wav.exists():
            raise FileNotFoundError(f"{wav} missing for {mid}")
        notes, sustain, _ = midi_io.load_groundtruth(mid.read_bytes(), threshold)
        samples, _ = features.read_wav(wav, feature_config.sample_rate)
        ds.add(*piece_from_audio(samples, notes, sustain, feature_config))
    return ds
