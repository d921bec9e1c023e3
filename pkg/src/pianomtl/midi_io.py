"""Standard MIDI File reading/writing and note/pedal extraction.

Only the subset needed for piano groundtruth is supported: formats 0 and 1,
metrical time division, tempo maps.  Everything else (other meta events,
sysex, aftertouch, program changes...) is carried through as opaque
``OtherIgnored`` events so that files survive a write/parse round trip.
"""

from __future__ import annotations

import bisect
import enum
import struct
import warnings
from collections import defaultdict, deque
from dataclasses import dataclass, field

DEFAULT_TEMPO = 500000
SUSTAIN_CONTROLLER = 64
SUSTAIN_THRESHOLD = 64
LOWEST_KEY = 21
HIGHEST_KEY = 108
MAX_VLQ = (1 << 28) - 1


class MidiError(ValueError):
    """Base class of all parser errors."""


class Truncated(MidiError):
    pass


class UnterminatedVlq(MidiError):
    pass


class BadHeader(MidiError):
    pass


class UnsupportedFormat(MidiError):
    pass


class MalformedEvent(MidiError):
    pass


class KeyOutOfRange(MidiError):
    def __init__(self, key, time):
        super().__init__(f"key {key} at {time:.6f}s outside {LOWEST_KEY}..{HIGHEST_KEY}")
        self.key = key
        self.time = time


class DanglingNoteOn(UserWarning):
    """A note-on without a matching note-off; the note is dropped."""


class EventKind(enum.Enum):
    NOTE_ON = "NoteOn"
    NOTE_OFF = "NoteOff"
    CONTROL_CHANGE = "ControlChange"
    TEMPO = "TempoMeta"
    END_OF_TRACK = "EndOfTrack"
    OTHER = "OtherIgnored"


@dataclass(frozen=True)
class MidiEvent:
    kind: EventKind
    delta_ticks: int = 0
    channel: int = 0
    data1: int = 0
    data2: int = 0
    tempo_us_per_quarter: int | None = None
    # full event bytes (status included) for OtherIgnored, so writers can re-emit it
    raw: bytes = b""
    tick: int = 0
    time: float = 0.0

    @property
    def is_note_on(self):
        return self.kind is EventKind.NOTE_ON and self.data2 > 0

    @property
    def is_note_off(self):
        return self.kind is EventKind.NOTE_OFF or (
            self.kind is EventKind.NOTE_ON and self.data2 == 0)


@dataclass(frozen=True)
class Note:
    key: int
    onset: float
    offset: float
    velocity: int


@dataclass(frozen=True)
class SustainEvent:
    time: float
    value: int


@dataclass
class MidiFile:
    ticks_per_quarter: int = 480
    format: int = 0
    tracks: list[list[MidiEvent]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def events(self):
        """All events of all tracks merged by absolute tick (stable)."""
        merged = [ev for track in self.tracks for ev in track]
        merged.sort(key=lambda ev: ev.tick)
        return merged

    @property
    def end_time(self):
        return max((ev.time for ev in self.events), default=0.0)


# ---------------------------------------------------------------------------
# variable length quantities
# ---------------------------------------------------------------------------

def read_vlq(data, pos):
    """Decode a variable-length quantity starting at ``pos``.

    Returns ``(value, next_pos)``.
    """
    value = 0
    for i in range(4):
        if pos + i >= len(data):
            raise Truncated(f"input ends inside VLQ at byte {pos + i}")
        byte = data[pos + i]
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos + i + 1
    raise UnterminatedVlq(f"VLQ at byte {pos} longer than 4 bytes")


def write_vlq(value):
    if not 0 <= value <= MAX_VLQ:
        raise ValueError(f"VLQ value out of range: {value}")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, data, pos=0, end=None):
        self.end = len(data) if end is None else end
        self.data = memoryview(data)[:self.end]
        self.pos = pos

    def need(self, n):
        if self.pos + n > self.end:
            raise Truncated(f"need {n} bytes at {self.pos}, chunk ends at {self.end}")

    def byte(self):
        self.need(1)
        b = self.data[self.pos]
        self.pos += 1
        return b

    def take(self, n):
        self.need(n)
        chunk = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return chunk

    def vlq(self):
        if self.pos >= self.end:
            raise Truncated(f"input ends inside VLQ at byte {self.pos}")
        value, pos = read_vlq(self.data, self.pos)
        self.pos = pos
        return value


_CHANNEL_DATA_LEN = {0x8: 2, 0x9: 2, 0xA: 2, 0xB: 2, 0xC: 1, 0xD: 1, 0xE: 2}


def _data_byte(reader):
    b = reader.byte()
    if b & 0x80:
        raise MalformedEvent(f"status byte 0x{b:02X} where data byte expected at {reader.pos - 1}")
    return b


def _parse_track(data, start, end):
    reader = _Reader(data, start, end)
    events = []
    tick = 0
    running = None
    while reader.pos < reader.end:
        delta = reader.vlq()
        tick += delta
        first = reader.byte()
        if first & 0x80:
            status = first
            pending = None
        else:
            if running is None:
                raise MalformedEvent(f"data byte 0x{first:02X} without running status at {reader.pos - 1}")
            status = running
            pending = first

        if status == 0xFF:
            running = None
            meta_type = reader.byte()
            length = reader.vlq()
            payload = reader.take(length)
            if meta_type == 0x51:
                if length != 3:
                    raise MalformedEvent(f"tempo meta event with length {length}")
                tempo = int.from_bytes(payload, "big")
                if tempo == 0:
                    raise MalformedEvent("tempo of zero microseconds per quarter")
                events.append(MidiEvent(EventKind.TEMPO, delta, tempo_us_per_quarter=tempo, tick=tick))
            elif meta_type == 0x2F:
                events.append(MidiEvent(EventKind.END_OF_TRACK, delta, tick=tick))
                break
            else:
                raw = bytes([0xFF, meta_type]) + write_vlq(length) + payload
                events.append(MidiEvent(EventKind.OTHER, delta, raw=raw, tick=tick))
        elif status in (0xF0, 0xF7):
            running = None
            length = reader.vlq()
            payload = reader.take(length)
            raw = bytes([status]) + write_vlq(length) + payload
            events.append(MidiEvent(EventKind.OTHER, delta, raw=raw, tick=tick))
        elif status >= 0xF0:
            raise MalformedEvent(f"system message 0x{status:02X} not allowed in a track")
        else:
            running = status
            hi, channel = status >> 4, status & 0x0F
            n = _CHANNEL_DATA_LEN[hi]
            d1 = pending if pending is not None else _data_byte(reader)
            d2 = _data_byte(reader) if n == 2 else 0
            if hi == 0x9:
                events.append(MidiEvent(EventKind.NOTE_ON, delta, channel, d1, d2, tick=tick))
            elif hi == 0x8:
                events.append(MidiEvent(EventKind.NOTE_OFF, delta, channel, d1, d2, tick=tick))
            elif hi == 0xB:
                events.append(MidiEvent(EventKind.CONTROL_CHANGE, delta, channel, d1, d2, tick=tick))
            else:
                raw = bytes([status, d1]) + (bytes([d2]) if n == 2 else b"")
                events.append(MidiEvent(EventKind.OTHER, delta, channel, d1, d2, raw=raw, tick=tick))
    return events


class TempoMap:
    """Piecewise-linear tick to seconds conversion."""

    def __init__(self, tempo_events, ticks_per_quarter):
        self.tpq = ticks_per_quarter
        changes = sorted(tempo_events, key=lambda x: x[0])
        self.ticks = [0]
        self.tempos = [DEFAULT_TEMPO]
        self.seconds = [0.0]
        for tick, tempo in changes:
            elapsed = self._span(tick - self.ticks[-1], self.tempos[-1])
            if tick == self.ticks[-1]:
                self.tempos[-1] = tempo
                continue
            self.seconds.append(self.seconds[-1] + elapsed)
            self.ticks.append(tick)
            self.tempos.append(tempo)

    def _span(self, ticks, tempo):
        return ticks * tempo / (1e6 * self.tpq)

    def seconds_at(self, tick):
        i = bisect.bisect_right(self.ticks, tick) - 1
        return self.seconds[i] + self._span(tick - self.ticks[i], self.tempos[i])


def parse_smf(data):
    """Parse a Standard MIDI File (formats 0/1, metrical division).

    Every event gets its absolute ``tick`` and ``time`` in seconds, computed
    from a tempo map gathered over all tracks.
    """
    data = bytes(data)
    if len(data) < 14 or data[:4] != b"MThd":
        raise BadHeader("missing MThd chunk")
    header_len = struct.unpack(">I", data[4:8])[0]
    if header_len < 6:
        raise BadHeader(f"header chunk length {header_len} < 6")
    if 8 + header_len > len(data):
        raise Truncated("header chunk runs past end of input")
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt == 2:
        raise UnsupportedFormat("format 2 files are not supported")
    if fmt > 2:
        raise BadHeader(f"unknown format {fmt}")
    if division & 0x8000:
        raise UnsupportedFormat("SMPTE time division is not supported")
    if division == 0:
        raise BadHeader("zero ticks per quarter")

    result = MidiFile(ticks_per_quarter=division, format=fmt)
    pos = 8 + header_len
    while len(result.tracks) < ntracks:
        if pos + 8 > len(data):
            raise Truncated(f"expected {ntracks} tracks, found {len(result.tracks)}")
        chunk_id = data[pos:pos + 4]
        length = struct.unpack(">I", data[pos + 4:pos + 8])[0]
        start, end = pos + 8, pos + 8 + length
        if end > len(data):
            raise Truncated(f"chunk {chunk_id!r} at {pos} runs past end of input")
        if chunk_id == b"MTrk":
            result.tracks.append(_parse_track(data, start, end))
        else:
            result.warnings.append(f"skipped unknown chunk {chunk_id!r} at {pos}")
        pos = end

    tempo_map = TempoMap(
        [(ev.tick, ev.tempo_us_per_quarter) for track in result.tracks for ev in track
         if ev.kind is EventKind.TEMPO],
        division)
    result.tracks = [
        [_with_time(ev, tempo_map.seconds_at(ev.tick)) for ev in track]
        for track in result.tracks]
    return result


def _with_time(ev, seconds):
    return MidiEvent(ev.kind, ev.delta_ticks, ev.channel, ev.data1, ev.data2,
                     ev.tempo_us_per_quarter, ev.raw, ev.tick, seconds)


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------

def _event_bytes(ev):
    if ev.kind is EventKind.NOTE_ON:
        return bytes([0x90 | ev.channel, ev.data1, ev.data2])
    if ev.kind is EventKind.NOTE_OFF:
        return bytes([0x80 | ev.channel, ev.data1, ev.data2])
    if ev.kind is EventKind.CONTROL_CHANGE:
        return bytes([0xB0 | ev.channel, ev.data1, ev.data2])
    if ev.kind is EventKind.TEMPO:
        return b"\xFF\x51\x03" + ev.tempo_us_per_quarter.to_bytes(3, "big")
    if ev.kind is EventKind.END_OF_TRACK:
        return b"\xFF\x2F\x00"
    if not ev.raw:
        raise ValueError("OtherIgnored event without raw bytes cannot be written")
    return ev.raw


def write_smf(midi):
    """Serialize a :class:`MidiFile`; explicit status on every event.

    Deltas are taken from ``delta_ticks``; an EndOfTrack is appended to
    tracks lacking one.
    """
    fmt = midi.format
    if fmt not in (0, 1):
        raise UnsupportedFormat(f"cannot write format {fmt}")
    if fmt == 0 and len(midi.tracks) != 1:
        raise ValueError("format 0 requires exactly one track")
    out = bytearray(b"MThd")
    out += struct.pack(">IHHH", 6, fmt, len(midi.tracks), midi.ticks_per_quarter)
    for track in midi.tracks:
        body = bytearray()
        for ev in track:
            body += write_vlq(ev.delta_ticks)
            body += _event_bytes(ev)
        if not track or track[-1].kind is not EventKind.END_OF_TRACK:
            body += b"\x00\xFF\x2F\x00"
        out += b"MTrk" + struct.pack(">I", len(body)) + body
    return bytes(out)


def track_from_ticks(events):
    """Recompute ``delta_ticks`` from absolute ``tick`` values.

    Events are stably sorted by tick first.
    """
    events = sorted(events, key=lambda ev: ev.tick)
    out, last = [], 0
    for ev in events:
        out.append(MidiEvent(ev.kind, ev.tick - last, ev.channel, ev.data1, ev.data2,
                             ev.tempo_us_per_quarter, ev.raw, ev.tick, ev.time))
        last = ev.tick
    return out


# ---------------------------------------------------------------------------
# notes and pedal
# ---------------------------------------------------------------------------

def extract_notes(events):
    """Pair note-on/note-off events into :class:`Note` tuples.

    Same-key overlaps pair first-in first-out.  Unmatched note-ons are dropped
    with a :class:`DanglingNoteOn` warning, as are zero-length notes.
    """
    open_notes = defaultdict(deque)
    notes = []
    for ev in sorted(events, key=lambda ev: ev.time):
        if ev.is_note_on:
            if not LOWEST_KEY <= ev.data1 <= HIGHEST_KEY:
                raise KeyOutOfRange(ev.data1, ev.time)
            open_notes[ev.channel, ev.data1].append(ev)
        elif ev.is_note_off:
            pending = open_notes.get((ev.channel, ev.data1))
            if not pending:
                continue
            on = pending.popleft()
            if ev.time <= on.time:
                warnings.warn(DanglingNoteOn(
                    f"zero-length note {on.data1} at {on.time:.6f}s dropped"))
                continue
            notes.append(Note(on.data1, on.time, ev.time, on.data2))
    for (_, key), pending in open_notes.items():
        for on in pending:
            warnings.warn(DanglingNoteOn(f"note-on {key} at {on.time:.6f}s never released"))
    notes.sort(key=lambda n: (n.onset, n.key))
    return notes


def extract_sustain(events):
    return sorted(
        (SustainEvent(ev.time, ev.data2) for ev in events
         if ev.kind is EventKind.CONTROL_CHANGE and ev.data1 == SUSTAIN_CONTROLLER),
        key=lambda s: s.time)


def pedal_is_down(sustain, time, threshold=SUSTAIN_THRESHOLD):
    """Binarized pedal state at ``time`` (events at exactly ``time`` count)."""
    i = bisect.bisect_right([s.time for s in sustain], time) - 1
    return i >= 0 and sustain[i].value > threshold


def apply_sustain_correction(notes, sustain, threshold=SUSTAIN_THRESHOLD, end_time=None):
    """Extend offsets of notes released while the pedal is down.

    The extended offset is the first pedal release after the key release,
    or ``end_time`` (default: latest time seen in notes/pedal) if the pedal
    stays down.  A re-strike of the same key cuts the extended note at the
    new onset, but never before its own key release.
    """
    if not sustain:
        return list(notes)
    times = [s.time for s in sustain]
    if end_time is None:
        end_time = max([n.offset for n in notes] + times)

    extended = []
    for n in notes:
        i = bisect.bisect_right(times, n.offset) - 1
        if i < 0 or sustain[i].value <= threshold:
            extended.append(n.offset)
            continue
        new_offset = end_time
        for s in sustain[i + 1:]:
            if s.value <= threshold:
                new_offset = s.time
                break
        extended.append(max(new_offset, n.offset))

    onsets_by_key = defaultdict(list)
    for n in notes:
        onsets_by_key[n.key].append(n.onset)
    for key in onsets_by_key:
        onsets_by_key[key].sort()

    out = []
    for n, offset in zip(notes, extended):
        if offset > n.offset:
            onsets = onsets_by_key[n.key]
            j = bisect.bisect_right(onsets, n.onset)
            if j < len(onsets) and onsets[j] < offset:
                offset = max(n.offset, onsets[j])
        out.append(Note(n.key, n.onset, offset, n.velocity))
    return out


def load_groundtruth(data, threshold=SUSTAIN_THRESHOLD):
    """Parse MIDI bytes into ``(corrected_notes, sustain, midi_file)``."""
    midi = parse_smf(data)
    events = midi.events
    notes = extract_notes(events)
    sustain = extract_sustain(events)
    corrected = apply_sustain_correction(notes, sustain, threshold, end_time=midi.end_time)
    return corrected, sustain, midi
