"""Time-quantized prediction targets derived from (corrected) notes and pedal."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .midi_io import LOWEST_KEY

N_KEYS = 88
MAGIC = b"MTGT"
# guards floor() against products like 0.57 * 100 = 56.99999999999999
_QUANT_EPS = 1e-9


class FrameOverflow(ValueError):
    pass


class EvenLength(ValueError):
    pass


@dataclass
class FrameTargets:
    on: np.ndarray
    int: np.ndarray
    off: np.ndarray
    vel: np.ndarray
    sus: np.ndarray
    fps: int

    @property
    def n_frames(self):
        return self.on.shape[0]

    def __eq__(self, other):
        if not isinstance(other, FrameTargets):
            return NotImplemented
        return self.fps == other.fps and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("on", "int", "off", "vel", "sus"))


def quantize(time, fps):
    return int(math.floor(time * fps + _QUANT_EPS))


def max_filter_time(m, length=3):
    """Running maximum along axis 0 with clipped edges."""
    if length < 1 or length % 2 == 0:
        raise EvenLength(f"filter length must be odd and >= 1, got {length}")
    m = np.asarray(m)
    h = (length - 1) // 2
    out = m.copy()
    for shift in range(1, h + 1):
        np.maximum(out[shift:], m[:-shift], out=out[shift:])
        np.maximum(out[:-shift], m[shift:], out=out[:-shift])
    return out


def derive_targets(notes, sustain, fps, n_frames):
    """Build the five framewise targets.

    Onsets, offsets and velocities are widened by a length-3 maximum filter
    in time; intermediate frames cover ``onset_frame <= t < offset_frame``
    (a note shorter than one frame still marks its onset frame); the pedal
    target is the zero-order-held raw controller value divided by 127.
    """
    on = np.zeros((n_frames, N_KEYS), np.float32)
    off = np.zeros_like(on)
    inter = np.zeros_like(on)
    vel = np.zeros_like(on)
    for n in notes:
        a, b, k = quantize(n.onset, fps), quantize(n.offset, fps), n.key - LOWEST_KEY
        if b >= n_frames:
            raise FrameOverflow(f"note {n.key} offset frame {b} >= {n_frames} frames")
        on[a, k] = 1.0
        off[b, k] = 1.0
        inter[a:max(b, a + 1), k] = 1.0
        vel[a, k] = max(vel[a, k], n.velocity / 127.0)

    sus = np.zeros(n_frames, np.float32)
    if sustain:
        times = np.array([s.time for s in sustain])
        values = np.array([s.value for s in sustain], np.float64)
        frame_times = np.arange(n_frames) / fps
        idx = np.searchsorted(times, frame_times, side="right") - 1
        held = np.where(idx >= 0, values[np.clip(idx, 0, None)], 0.0)
        sus = (held / 127.0).astype(np.float32)

    return FrameTargets(max_filter_time(on), inter, max_filter_time(off),
                        max_filter_time(vel), sus, fps)


def frames_needed(notes, fps):
    return max((quantize(n.offset, fps) for n in notes), default=-1) + 2


def write_mtgt(targets):
    t, k = targets.on.shape
    header = MAGIC + struct.pack("<III", t, k, targets.fps)
    blocks = [np.ascontiguousarray(a, dtype="<f4").tobytes()
              for a in (targets.on, targets.int, targets.off, targets.vel, targets.sus)]
    return header + b"".join(blocks)


def read_mtgt(data):
    if data[:4] != MAGIC:
        raise ValueError("not an MTGT file")
    t, k, fps = struct.unpack("<III", data[4:16])
    expected = 16 + 4 * (4 * t * k + t)
    if len(data) != expected:
        raise ValueError(f"MTGT size {len(data)} != expected {expected}")
    flat = np.frombuffer(data, dtype="<f4", offset=16).astype(np.float32)
    mats = [flat[i * t * k:(i + 1) * t * k].reshape(t, k) for i in range(4)]
    return FrameTargets(*mats, flat[4 * t * k:].copy(), fps)
