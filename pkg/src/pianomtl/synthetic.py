"""Seeded random piano-like performances with sustain pedal, rendered by
additive synthesis.  Used for desk-scale end-to-end runs and tests."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import midi_io
from .midi_io import DEFAULT_TEMPO, EventKind, MidiEvent, MidiFile, Note

TICKS_PER_QUARTER = 480
N_PARTIALS = 6
RELEASE_TAIL = 0.5
ATTACK = 0.005
RELEASE_TAU = 0.03
STRIKE_PARTIALS = 14
STRIKE_TAU = 0.02
STRIKE_GAIN = 1.0


@dataclass
class SynthConfig:
    seed: int = 0
    duration: float = 60.0
    polyphony_max: int = 4
    note_rate: float = 4.0
    sustain_prob: float = 0.3
    key_range: tuple = (21, 108)
    velocity_range: tuple = (30, 127)
    sample_rate: int = 22050

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if self.polyphony_max < 1:
            raise ValueError("polyphony_max must be >= 1")
        if not 0 <= self.sustain_prob <= 1:
            raise ValueError("sustain_prob must be in [0, 1]")
        lo, hi = self.key_range
        if not midi_io.LOWEST_KEY <= lo <= hi <= midi_io.HIGHEST_KEY:
            raise ValueError(f"key_range {self.key_range} outside the 88 keys")


def tick_to_seconds(tick):
    return tick * DEFAULT_TEMPO / (1e6 * TICKS_PER_QUARTER)


def seconds_to_tick(seconds):
    return int(round(seconds * 1e6 * TICKS_PER_QUARTER / DEFAULT_TEMPO))


def _event(kind, tick, channel=0, d1=0, d2=0, tempo=None):
    return MidiEvent(kind, 0, channel, d1, d2, tempo, b"", tick, tick_to_seconds(tick))


def _pedal_events(rng, end_tick, prob):
    """``[(tick, value)]`` pedal changes, released before ``end_tick``."""
    events = []
    t = 0.0
    end = tick_to_seconds(end_tick)
    while True:
        t += rng.uniform(0.2, 1.5)
        if t >= end:
            break
        if rng.random() < prob:
            down, hold = t, rng.uniform(0.5, 3.0)
            up = min(down + hold, end)
            if up - down < 0.1:
                break
            events.append((seconds_to_tick(down), int(rng.integers(65, 128))))
            if rng.random() < 0.5:
                events.append((seconds_to_tick((down + up) / 2), int(rng.integers(65, 128))))
            events.append((seconds_to_tick(up), int(rng.integers(0, 65))))
            t = up
        elif rng.random() < 0.3:
            # a touch that never reaches the threshold
            events.append((seconds_to_tick(t), int(rng.integers(1, 65))))
            t += rng.uniform(0.1, 0.4)
            events.append((seconds_to_tick(min(t, end)), 0))
    return events


def generate_performance(config):
    """Random performance as ``(events, groundtruth_notes)``.

    ``events`` form one track (absolute ticks, times in seconds, delta ticks
    filled in) including pedal changes; the groundtruth notes already have
    sustain-corrected offsets.
    """
    rng = np.random.Generator(np.random.Philox(config.seed))
    end_tick = seconds_to_tick(config.duration)
    lo, hi = config.key_range
    vlo, vhi = config.velocity_range

    raw = []   # (key, on_tick, off_tick, velocity)
    held = []  # (off_tick, key) of keys currently down
    t = 0.0
    while config.note_rate > 0:
        t += rng.exponential(1.0 / config.note_rate)
        dur = math.exp(rng.uniform(math.log(0.1), math.log(2.0)))
        key = int(rng.integers(lo, hi + 1))
        velocity = int(rng.integers(vlo, vhi + 1))
        if t + 0.1 > config.duration:
            break
        on = seconds_to_tick(t)
        off = min(seconds_to_tick(t + dur), end_tick)
        held = [(o, k) for o, k in held if o > on]
        if len(held) >= config.polyphony_max or any(k == key for _, k in held):
            continue
        held.append((off, key))
        raw.append((key, on, off, velocity))

    pedal = _pedal_events(rng, end_tick, config.sustain_prob)

    events = [_event(EventKind.TEMPO, 0, tempo=DEFAULT_TEMPO)]
    for key, on, off, velocity in raw:
        events.append(_event(EventKind.NOTE_ON, on, d1=key, d2=velocity))
        events.append(_event(EventKind.NOTE_OFF, off, d1=key, d2=64))
    for tick, value in pedal:
        events.append(_event(EventKind.CONTROL_CHANGE, tick, d1=midi_io.SUSTAIN_CONTROLLER, d2=value))
    events.append(_event(EventKind.END_OF_TRACK, end_tick))
    # note-offs first at equal ticks, end of track last
    order = {EventKind.TEMPO: 0, EventKind.NOTE_OFF: 1, EventKind.CONTROL_CHANGE: 2,
             EventKind.NOTE_ON: 3, EventKind.END_OF_TRACK: 4}
    events.sort(key=lambda ev: (ev.tick, order[ev.kind]))
    events = midi_io.track_from_ticks(events)

    return events, _groundtruth(raw, pedal, end_tick)


def _groundtruth(raw, pedal, end_tick):
    """Sustain-corrected notes computed directly from the generator's own
    key and pedal intervals (ticks)."""
    intervals = []
    down_since = None
    for tick, value in sorted(pedal, key=lambda p: p[0]):
        is_down = value > midi_io.SUSTAIN_THRESHOLD
        if is_down and down_since is None:
            down_since = tick
        elif not is_down and down_since is not None:
            intervals.append((down_since, tick))
            down_since = None
    if down_since is not None:
        intervals.append((down_since, end_tick))

    strikes = defaultdict(list)
    for key, on, _, _ in raw:
        strikes[key].append(on)

    notes = []
    for key, on, off, velocity in raw:
        end = off
        for a, b in intervals:
            if a <= off < b:
                end = b
        later = [o for o in strikes[key] if o > on]
        if end > off and later and min(later) < end:
            end = max(off, min(later))
        notes.append(Note(key, tick_to_seconds(on), tick_to_seconds(end), velocity))
    notes.sort(key=lambda n: (n.onset, n.key))
    return notes


def performance_midi(events):
    return MidiFile(ticks_per_quarter=TICKS_PER_QUARTER, format=0, tracks=[list(events)])


def key_frequency(key):
    return 440.0 * 2.0 ** ((key - 69) / 12.0)


def _decay_tau(freq):
    return float(np.clip(2.5 * math.sqrt(261.63 / freq), 0.4, 5.0))


def render_audio(events, sample_rate, normalize=True):
    """Additive-synthesis rendering of a performance.

    Each note is six harmonics with amplitudes ``1/k`` scaled by
    velocity/127, decaying slowly while the string is free and quickly after
    the (sustain-corrected) offset, plus a short burst of higher harmonics
    at the attack.  Output is peak-normalised to 0.9 unless
    ``normalize`` is false.
    """
    notes = midi_io.extract_notes(events)
    sustain = midi_io.extract_sustain(events)
    end_time = max((ev.time for ev in events), default=0.0)
    notes = midi_io.apply_sustain_correction(notes, sustain, end_time=end_time)
    n_total = math.ceil(end_time * sample_rate) + int(round(RELEASE_TAIL * sample_rate))
    out = np.zeros(max(n_total, 1))
    for n in notes:
        f0 = key_frequency(n.key)
        start = int(round(n.onset * sample_rate))
        held = n.offset - n.onset
        length = min(int(math.ceil((held + 6 * RELEASE_TAU) * sample_rate)), out.size - start)
        if length <= 0:
            continue
        t = np.arange(length) / sample_rate
        env = np.exp(-t / _decay_tau(f0))
        env *= np.minimum(t / ATTACK, 1.0)
        after = t > held
        env[after] *= np.exp(-(t[after] - held) / RELEASE_TAU)
        tone = np.zeros(length)
        for k in range(1, N_PARTIALS + 1):
            if k * f0 >= sample_rate / 2:
                break
            tone += np.sin(2 * np.pi * k * f0 * t) / k
        # hammer strike: upper harmonics that die out within a few frames
        strike = np.zeros(length)
        for k in range(N_PARTIALS + 1, N_PARTIALS + 1 + STRIKE_PARTIALS):
            if k * f0 >= sample_rate / 2:
                break
            strike += np.sin(2 * np.pi * k * f0 * t)
        strike *= STRIKE_GAIN * np.exp(-t / STRIKE_TAU) * np.minimum(t / ATTACK, 1.0)
        out[start:start + length] += (n.velocity / 127.0) * (env * tone + strike)
    peak = np.abs(out).max()
    if normalize and peak > 0:
        out *= 0.9 / peak
    return out
