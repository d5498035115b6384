"""Standard MIDI File reading and writing.

Supports the subset that matters for performance features: formats 0
and 1, note-on/off, CC64 (sustain pedal), tempo and time-signature meta
events. Everything else is skipped. All event times are converted to
absolute seconds by piecewise tempo integration; the writer quantizes
to 480 ticks per quarter at a single tempo.

Parsing is total on this subset: malformed bytes raise ParseError with
the offending byte offset, never hang.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError

DEFAULT_TICKS_PER_QUARTER = 480
DEFAULT_TEMPO_US = 500_000  # microseconds per quarter note (120 BPM)
SUSTAIN_CC = 64
PEDAL_THRESHOLD = 64  # CC64 >= 64 counts as "pedal down"


@dataclass
class MidiNoteEvent:
    pitch: int
    velocity: int
    onset_s: float
    offset_s: float
    channel: int = 0

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValidationError(f"pitch {self.pitch} outside [0, 127]")
        if not 0 <= self.velocity <= 127:
            raise ValidationError(f"velocity {self.velocity} outside [0, 127]")
        if self.offset_s <= self.onset_s:
            raise ValidationError(f"offset {self.offset_s} <= onset {self.onset_s}")


@dataclass
class PedalEvent:
    time_s: float
    value: int


@dataclass
class TimeSigEvent:
    time_s: float
    numerator: int
    denominator: int


@dataclass
class PerformanceTrack:
    notes: list
    pedals: list
    ticks_per_quarter: int
    time_signatures: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    tempo_bpm: float = 120.0  # first tempo event, or the SMF default


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def need(self, n):
        if self.pos + n > len(self.data):
            raise ParseError(f"unexpected end of data, wanted {n} bytes", offset=self.pos)

    def bytes(self, n):
        self.need(n)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return self.bytes(1)[0]

    def u16(self):
        b = self.bytes(2)
        return (b[0] << 8) | b[1]

    def u32(self):
        b = self.bytes(4)
        return (b[0] << 24) | (b[1] << 16) | (b[2] << 8) | b[3]

    def vlq(self):
        value = 0
        for i in range(4):
            b = self.u8()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise ParseError("variable-length quantity longer than 4 bytes", offset=self.pos)


def _parse_track(reader, collect):
    """Walk one MTrk chunk, appending (tick, kind, *data) to `collect`."""
    if reader.bytes(4) != b"MTrk":
        raise ParseError("expected MTrk chunk", offset=reader.pos - 4)
    length = reader.u32()
    end = reader.pos + length
    reader.need(length)
    tick = 0
    status = None
    while reader.pos < end:
        tick += reader.vlq()
        byte = reader.u8()
        if byte == 0xFF:  # meta
            meta = reader.u8()
            mlen = reader.vlq()
            data = reader.bytes(mlen)
            if meta == 0x51 and mlen == 3:
                collect.append((tick, "tempo", (data[0] << 16) | (data[1] << 8) | data[2]))
            elif meta == 0x58 and mlen >= 2:
                collect.append((tick, "timesig", data[0], 1 << data[1]))
            elif meta == 0x2F:
                reader.pos = end
                break
            continue
        if byte in (0xF0, 0xF7):  # sysex
            slen = reader.vlq()
            reader.bytes(slen)
            status = None
            continue
        if byte & 0x80:
            status = byte
            first = None
        else:
            if status is None:
                raise ParseError(f"data byte {byte:#x} without running status", offset=reader.pos - 1)
            first = byte
        kind = status >> 4
        channel = status & 0x0F
        if kind in (0x8, 0x9, 0xA, 0xB, 0xE):
            d1 = first if first is not None else reader.u8()
            d2 = reader.u8()
            if d1 > 127 or d2 > 127:
                raise ParseError(f"data byte out of range in status {status:#x}", offset=reader.pos - 1)
            if kind == 0x9 and d2 > 0:
                collect.append((tick, "on", channel, d1, d2))
            elif kind == 0x8 or (kind == 0x9 and d2 == 0):
                collect.append((tick, "off", channel, d1))
            elif kind == 0xB and d1 == SUSTAIN_CC:
                collect.append((tick, "pedal", d2))
        elif kind in (0xC, 0xD):
            if first is None:
                reader.u8()
        else:
            raise ParseError(f"unsupported status byte {status:#x}", offset=reader.pos - 1)
    if reader.pos != end:
        raise ParseError("track events overran the declared chunk length", offset=reader.pos)
    return tick


def _tick_timeline(events, ticks_per_quarter):
    """Map ticks to seconds by integrating the tempo map."""
    tempo_changes = sorted((t for t in events if t[1] == "tempo"), key=lambda e: e[0])
    segments = [(0, DEFAULT_TEMPO_US)]
    for tick, _, us in tempo_changes:
        if segments and segments[-1][0] == tick:
            segments[-1] = (tick, us)
        else:
            segments.append((tick, us))

    def to_seconds(tick):
        seconds = 0.0
        for (t0, us), nxt in zip(segments, segments[1:] + [(None, None)]):
            t1 = nxt[0]
            if t1 is None or tick <= t1:
                return seconds + (tick - t0) * us / 1e6 / ticks_per_quarter
            seconds += (t1 - t0) * us / 1e6 / ticks_per_quarter
        raise AssertionError("unreachable")

    return to_seconds


def parse_smf(data: bytes) -> PerformanceTrack:
    """Parse a format 0/1 Standard MIDI File into seconds-based events."""
    reader = _Reader(bytes(data))
    if reader.bytes(4) != b"MThd":
        raise ParseError("missing MThd header", offset=0)
    hlen = reader.u32()
    if hlen < 6:
        raise ParseError(f"header length {hlen} < 6", offset=4)
    fmt = reader.u16()
    ntrks = reader.u16()
    division = reader.u16()
    reader.bytes(hlen - 6)
    if fmt not in (0, 1):
        raise ParseError(f"unsupported SMF format {fmt}", offset=8)
    if division & 0x8000:
        raise ParseError("SMPTE time division is not supported", offset=12)
    if division == 0:
        raise ParseError("zero ticks per quarter", offset=12)

    events = []
    end_tick = 0
    for _ in range(ntrks):
        end_tick = max(end_tick, _parse_track(reader, events))
    events.sort(key=lambda e: e[0])
    to_seconds = _tick_timeline(events, division)

    warnings = []
    active = {}
    notes = []
    pedals = []
    timesigs = []
    for ev in events:
        tick, kind = ev[0], ev[1]
        if kind == "on":
            _, _, channel, pitch, vel = ev
            key = (channel, pitch)
            if key in active:
                on_tick, on_vel = active.pop(key)
                notes.append(_close_note(channel, pitch, on_vel, on_tick, tick, to_seconds))
                warnings.append(f"overlapping note {pitch} on channel {channel}: closed at the later note-on")
            active[key] = (tick, vel)
        elif kind == "off":
            _, _, channel, pitch = ev
            key = (channel, pitch)
            if key in active:
                on_tick, on_vel = active.pop(key)
                notes.append(_close_note(channel, pitch, on_vel, on_tick, tick, to_seconds))
        elif kind == "pedal":
            pedals.append(PedalEvent(to_seconds(tick), ev[2]))
        elif kind == "timesig":
            timesigs.append(TimeSigEvent(to_seconds(tick), ev[2], ev[3]))
    for (channel, pitch), (on_tick, on_vel) in sorted(active.items()):
        close = max(end_tick, on_tick + 1)
        notes.append(_close_note(channel, pitch, on_vel, on_tick, close, to_seconds))
        warnings.append(f"note {pitch} on channel {channel} never released: closed at track end")

    notes.sort(key=lambda n: (n.onset_s, n.pitch))
    pedals.sort(key=lambda p: p.time_s)
    tempos = [e for e in events if e[1] == "tempo"]
    tempo_bpm = 60e6 / tempos[0][2] if tempos else 120.0
    return PerformanceTrack(notes, pedals, division, timesigs, warnings, tempo_bpm)


def _close_note(channel, pitch, velocity, on_tick, off_tick, to_seconds):
    onset = to_seconds(on_tick)
    offset = to_seconds(max(off_tick, on_tick + 1))
    return MidiNoteEvent(pitch, velocity, onset, offset, channel)


def resolve_sustain(track: PerformanceTrack, threshold: int = PEDAL_THRESHOLD):
    """Per-note (pressed, sustained) durations in seconds.

    A note released while the pedal is at or above `threshold` rings
    until the first pedal value below the threshold; the sustained
    duration is never shorter than the pressed one. The pedal state at a
    time t is the value of the last event at or before t.
    """
    times = np.array([p.time_s for p in track.pedals])
    values = np.array([p.value for p in track.pedals], dtype=np.int64)
    if len(times) and (np.diff(times) < 0).any():
        order = np.argsort(times, kind="stable")
        times, values = times[order], values[order]
    track_end = max([n.offset_s for n in track.notes], default=0.0)
    if len(times):
        track_end = max(track_end, times[-1])

    out = []
    for note in track.notes:
        pressed = note.offset_s - note.onset_s
        sustained = pressed
        idx = np.searchsorted(times, note.offset_s, side="right") - 1
        if idx >= 0 and values[idx] >= threshold:
            later = np.nonzero((times > note.offset_s) & (values < threshold))[0]
            release = times[later[0]] if len(later) else track_end
            sustained = max(pressed, release - note.onset_s)
        out.append((pressed, sustained))
    return out


def write_smf(notes, pedals=(), ticks_per_quarter=DEFAULT_TICKS_PER_QUARTER, tempo_bpm=120.0, time_signature=None):
    """Serialize notes and pedal events to a format-0 SMF byte string."""
    for n in notes:
        if not 0 <= n.pitch <= 127:
            raise ValidationError(f"pitch {n.pitch} outside [0, 127]")
        if not 0 <= n.velocity <= 127:
            raise ValidationError(f"velocity {n.velocity} outside [0, 127]")
        if n.offset_s <= n.onset_s:
            raise ValidationError("note offset must follow its onset")

    ticks_per_second = ticks_per_quarter * tempo_bpm / 60.0

    def tick(t):
        return max(0, int(round(t * ticks_per_second)))

    events = []  # (tick, order, message bytes)
    tempo_us = int(round(60e6 / tempo_bpm))
    events.append((0, 0, bytes([0xFF, 0x51, 0x03]) + tempo_us.to_bytes(3, "big")))
    if time_signature is not None:
        num, den = time_signature
        events.append((0, 0, bytes([0xFF, 0x58, 0x04, num, int(np.log2(den)), 24, 8])))
    for p in pedals:
        events.append((tick(p.time_s), 1, bytes([0xB0, SUSTAIN_CC, int(p.value)])))
    for n in notes:
        on = tick(n.onset_s)
        off = max(tick(n.offset_s), on + 1)
        channel = getattr(n, "channel", 0) & 0x0F
        events.append((on, 2, bytes([0x90 | channel, n.pitch, n.velocity])))
        events.append((off, 1, bytes([0x80 | channel, n.pitch, 0])))
    events.sort(key=lambda e: (e[0], e[1]))

    body = bytearray()
    last = 0
    for t, _, msg in events:
        body += _vlq(t - last)
        body += msg
        last = t
    body += _vlq(0) + bytes([0xFF, 0x2F, 0x00])

    header = b"MThd" + (6).to_bytes(4, "big") + (0).to_bytes(2, "big") + (1).to_bytes(2, "big")
    header += ticks_per_quarter.to_bytes(2, "big")
    return bytes(header + b"MTrk" + len(body).to_bytes(4, "big") + body)


def _vlq(value):
    if value < 0:
        raise ValidationError("negative delta time")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))
