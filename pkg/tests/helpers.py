"""Shared fixtures builders for the test-suite."""

from __future__ import annotations

import struct

import numpy as np

from pianomtl.midi_io import EventKind, MidiEvent, MidiFile, track_from_ticks


def random_track(rng, n_events=40, with_tempo=True):
    """A random but well-formed track: notes, CCs, tempo changes, opaque events."""
    events = []
    tick = 0
    for _ in range(n_events):
        tick += int(rng.integers(0, 500))
        r = rng.random()
        ch = int(rng.integers(0, 16))
        if r < 0.35:
            events.append(MidiEvent(EventKind.NOTE_ON, channel=ch, data1=int(rng.integers(21, 109)),
                                    data2=int(rng.integers(0, 128)), tick=tick))
        elif r < 0.6:
            events.append(MidiEvent(EventKind.NOTE_OFF, channel=ch, data1=int(rng.integers(21, 109)),
                                    data2=int(rng.integers(0, 128)), tick=tick))
        elif r < 0.75:
            events.append(MidiEvent(EventKind.CONTROL_CHANGE, channel=ch, data1=int(rng.integers(0, 120)),
                                    data2=int(rng.integers(0, 128)), tick=tick))
        elif r < 0.82 and with_tempo:
            events.append(MidiEvent(EventKind.TEMPO, tempo_us_per_quarter=int(rng.integers(1, 1 << 24)),
                                    tick=tick))
        elif r < 0.9:
            # program change (1 data byte)
            d1 = int(rng.integers(0, 128))
            events.append(MidiEvent(EventKind.OTHER, channel=ch, data1=d1, raw=bytes([0xC0 | ch, d1]),
                                    tick=tick))
        else:
            text = bytes(rng.integers(32, 127, int(rng.integers(0, 20))).astype(np.uint8))
            raw = bytes([0xFF, 0x01, len(text)]) + text
            events.append(MidiEvent(EventKind.OTHER, raw=raw, tick=tick))
    events.append(MidiEvent(EventKind.END_OF_TRACK, tick=tick + int(rng.integers(0, 100))))
    return track_from_ticks(events)


def random_midi(rng):
    fmt = int(rng.integers(0, 2))
    n_tracks = 1 if fmt == 0 else int(rng.integers(1, 4))
    return MidiFile(ticks_per_quarter=int(rng.integers(24, 961)), format=fmt,
                    tracks=[random_track(rng, int(rng.integers(0, 60))) for _ in range(n_tracks)])


def strip_time(ev):
    return (ev.kind, ev.delta_ticks, ev.channel, ev.data1, ev.data2, ev.tempo_us_per_quarter,
            ev.raw, ev.tick)


# ---------------------------------------------------------------------------
# hand-built groundtruth file and its golden targets
# ---------------------------------------------------------------------------

def golden_midi_bytes():
    """tpq 480 at 120 bpm (960 ticks/s).  Key 60 over 0.10-0.20 s at velocity
    127, key 64 over 1.0-2.0 s at velocity 100, pedal 100 at 0.5 s and 0 at 3.0 s.
    Written byte by byte, without the package writer."""
    def ev(delta, *payload):
        # deltas below 128 fit one byte; larger ones are written as two-byte VLQs
        if delta < 128:
            d = bytes([delta])
        else:
            d = bytes([0x80 | (delta >> 7), delta & 0x7F])
        return d + bytes(payload)

    body = b"".join([
        ev(0, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20),   # 500000 us per quarter
        ev(96, 0x90, 60, 127),                        # 0.1 s
        ev(96, 0x80, 60, 64),                         # 0.2 s
        ev(288, 0xB0, 64, 100),                       # 0.5 s
        ev(480, 0x90, 64, 100),                       # 1.0 s
        ev(960, 0x80, 64, 64),                        # 2.0 s
        ev(960, 0xB0, 64, 0),                         # 3.0 s
        ev(0, 0xFF, 0x2F, 0x00),
    ])
    return (b"MThd" + struct.pack(">IHHH", 6, 0, 1, 480)
            + b"MTrk" + struct.pack(">I", len(body)) + body)


GOLDEN_FRAMES = 152


def golden_arrays():
    """Expected targets of :func:`golden_midi_bytes` at 50 fps, written out by hand."""
    T = GOLDEN_FRAMES
    on = np.zeros((T, 88), np.float32)
    it = np.zeros((T, 88), np.float32)
    off = np.zeros((T, 88), np.float32)
    vel = np.zeros((T, 88), np.float32)
    sus = np.zeros((T, 1), np.float32)
    k60, k64 = 60 - 21, 64 - 21
    # key 60: onset frame 5 widened to 4..6; interval [5, 10); offset frame 10 -> 9..11
    on[4:7, k60] = 1
    it[5:10, k60] = 1
    off[9:12, k60] = 1
    vel[4:7, k60] = 1.0
    # key 64: onset frame 50 -> 49..51; offset extended by the pedal to 3.0 s (frame 150)
    on[49:52, k64] = 1
    it[50:150, k64] = 1
    off[149:152, k64] = 1
    vel[49:52, k64] = np.float32(100 / 127)
    sus[25:150, 0] = np.float32(100 / 127)
    return on, it, off, vel, sus


def golden_mtgt_bytes():
    on, it, off, vel, sus = golden_arrays()
    head = b"MTGT" + struct.pack("<III", GOLDEN_FRAMES, 88, 50)
    return head + b"".join(a.astype("<f4").tobytes() for a in (on, it, off, vel, sus))
