"""Standard MIDI File parsing, serialization, and tick/second arithmetic.

Supports SMF format 0 and 1. Running status is accepted on input and never
emitted on output. Overlapping same-pitch notes are paired FIFO (first
note-on gets the first note-off); this is a convention, the file format
itself cannot distinguish the alternatives.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

DEFAULT_TEMPO_US = 500000  # microseconds per quarter note (120 bpm)
SUSTAIN_CONTROLLER = 64
MAX_VLQ = 0x0FFFFFFF


class SMFParseError(ValueError):
    """Malformed Standard MIDI File; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SMFWarning(UserWarning):
    pass


@dataclass(frozen=True, order=True)
class NoteEvent:
    """One note with absolute onset time and duration in MIDI ticks."""

    onset_ticks: int
    duration_ticks: int
    pitch: int
    velocity: int
    channel: int = 0

    def __post_init__(self):
        if self.duration_ticks < 1:
            raise ValueError(f"duration_ticks must be >= 1, got {self.duration_ticks}")
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch must be in 0..127, got {self.pitch}")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity must be in 1..127, got {self.velocity}")
        if not 0 <= self.channel <= 15:
            raise ValueError(f"channel must be in 0..15, got {self.channel}")

    @property
    def offset_ticks(self) -> int:
        return self.onset_ticks + self.duration_ticks


@dataclass(frozen=True)
class TempoEvent:
    tick: int
    microseconds_per_quarter: int

    def __post_init__(self):
        if self.microseconds_per_quarter <= 0:
            raise ValueError("microseconds_per_quarter must be > 0")


@dataclass(frozen=True)
class TimeSignatureEvent:
    tick: int
    numerator: int
    denominator_log2: int

    def __post_init__(self):
        if self.numerator < 1:
            raise ValueError("numerator must be >= 1")
        if not 0 <= self.denominator_log2 <= 6:
            raise ValueError("denominator_log2 must be in 0..6")

    @property
    def denominator(self) -> int:
        return 1 << self.denominator_log2


@dataclass(frozen=True)
class NoteSequence:
    """Normalized in-memory MIDI: ordered notes plus tempo/signature maps.

    Notes are canonically sorted by (onset_ticks, pitch); tempo and time
    signature events are sorted by tick with duplicates at the same tick
    collapsed to the last one given. Immutable after construction.
    """

    ppq: int
    notes: tuple[NoteEvent, ...] = ()
    tempi: tuple[TempoEvent, ...] = ()
    time_signatures: tuple[TimeSignatureEvent, ...] = ()
    sustain_events: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.ppq <= 0:
            raise ValueError(f"ppq must be > 0, got {self.ppq}")
        notes = tuple(sorted(self.notes, key=lambda n: (n.onset_ticks, n.pitch)))
        tempi = tuple(_dedupe_by_tick(sorted(self.tempi, key=lambda e: e.tick)))
        sigs = tuple(_dedupe_by_tick(sorted(self.time_signatures, key=lambda e: e.tick)))
        sustain = tuple(sorted(self.sustain_events))
        object.__setattr__(self, "notes", notes)
        object.__setattr__(self, "tempi", tempi)
        object.__setattr__(self, "time_signatures", sigs)
        object.__setattr__(self, "sustain_events", sustain)

    @property
    def end_tick(self) -> int:
        return max((n.offset_ticks for n in self.notes), default=0)

    def effective_time_signatures(self) -> tuple[TimeSignatureEvent, ...]:
        """Time signature map with the 4/4-at-tick-0 default applied."""
        sigs = self.time_signatures
        if not sigs or sigs[0].tick > 0:
            return (TimeSignatureEvent(0, 4, 2),) + sigs
        return sigs

    def effective_tempi(self) -> tuple[TempoEvent, ...]:
        tempi = self.tempi
        if not tempi or tempi[0].tick > 0:
            return (TempoEvent(0, DEFAULT_TEMPO_US),) + tempi
        return tempi


def _dedupe_by_tick(events):
    out = []
    for ev in events:
        if out and out[-1].tick == ev.tick:
            out[-1] = ev
        else:
            out.append(ev)
    return out


# ---------------------------------------------------------------------------
# Parsing

class _Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def read(self, n: int) -> bytes:
        if self.remaining() < n:
            raise SMFParseError(f"unexpected end of data (wanted {n} bytes)", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def read_u8(self) -> int:
        return self.read(1)[0]

    def read_u16(self) -> int:
        return struct.unpack(">H", self.read(2))[0]

    def read_u32(self) -> int:
        return struct.unpack(">I", self.read(4))[0]

    def read_vlq(self) -> int:
        value = 0
        for _ in range(4):
            b = self.read_u8()
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise SMFParseError("variable-length quantity longer than 4 bytes", self.pos)


def parse_smf(data: bytes) -> NoteSequence:
    """Parse SMF bytes (format 0 or 1) into a NoteSequence.

    Note-on/note-off pairs are matched FIFO per (channel, pitch); a note-on
    with velocity 0 counts as a note-off. Controller-64 messages land in
    sustain_events. Tracks are merged by absolute tick. A note-on left open
    at end of file is closed at the final tick with a warning.
    """
    r = _Reader(data)
    if r.remaining() < 14:
        raise SMFParseError("file too short for MThd header", 0)
    if r.read(4) != b"MThd":
        raise SMFParseError("missing MThd chunk", 0)
    header_len = r.read_u32()
    if header_len < 6:
        raise SMFParseError(f"MThd length {header_len} < 6", 4)
    fmt = r.read_u16()
    n_tracks = r.read_u16()
    division = r.read_u16()
    r.read(header_len - 6)
    if fmt not in (0, 1):
        raise SMFParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise SMFParseError("SMPTE time division is not supported", 12)
    if division == 0:
        raise SMFParseError("zero ticks per quarter note", 12)

    # (tick, track_idx, event_idx, kind, ...payload) rows; merge order is the
    # stable sort over the first three fields.
    rows = []
    final_tick = 0
    for track_idx in range(n_tracks):
        if r.remaining() < 8:
            raise SMFParseError(f"expected track {track_idx} chunk", r.pos)
        chunk_start = r.pos
        chunk_type = r.read(4)
        chunk_len = r.read_u32()
        if chunk_type != b"MTrk":
            raise SMFParseError(f"expected MTrk, got {chunk_type!r}", chunk_start)
        body = _Reader(data[r.pos:r.pos + chunk_len], 0)
        if body.remaining() < chunk_len:
            raise SMFParseError("track chunk extends past end of file", chunk_start)
        base = r.pos
        r.pos += chunk_len
        final_tick = max(final_tick, _parse_track(body, base, track_idx, rows))

    rows.sort(key=lambda row: (row[0], row[1], row[2]))

    notes: list[NoteEvent] = []
    tempi: list[TempoEvent] = []
    sigs: list[TimeSignatureEvent] = []
    sustain: list[tuple[int, int]] = []
    open_notes: dict[tuple[int, int], list[tuple[int, int]]] = {}

    for row in rows:
        tick, _, _, kind = row[:4]
        if kind == "on":
            _, _, _, _, channel, pitch, velocity = row
            open_notes.setdefault((channel, pitch), []).append((tick, velocity))
        elif kind == "off":
            _, _, _, _, channel, pitch = row
            queue = open_notes.get((channel, pitch))
            if queue:
                onset, velocity = queue.pop(0)
                notes.append(NoteEvent(onset, max(1, tick - onset), pitch, velocity, channel))
            # note-off without a matching note-on is silently dropped
        elif kind == "tempo":
            tempi.append(TempoEvent(tick, row[4]))
        elif kind == "timesig":
            sigs.append(TimeSignatureEvent(tick, row[4], row[5]))
        elif kind == "sustain":
            sustain.append((tick, row[4]))

    for (channel, pitch), queue in sorted(open_notes.items()):
        for onset, velocity in queue:
            warnings.warn(
                f"note-on (pitch {pitch}, channel {channel}, tick {onset}) left open; "
                f"closed at final tick {final_tick}",
                SMFWarning,
                stacklevel=2,
            )
            notes.append(NoteEvent(onset, max(1, final_tick - onset), pitch, velocity, channel))

    return NoteSequence(
        ppq=division,
        notes=tuple(notes),
        tempi=tuple(tempi),
        time_signatures=tuple(sigs),
        sustain_events=tuple(sustain),
    )


def _parse_track(body: _Reader, base_offset: int, track_idx: int, rows: list) -> int:
    tick = 0
    running_status = None
    event_idx = 0
    while body.remaining() > 0:
        tick += body.read_vlq()
        status = body.read_u8()
        if status < 0x80:
            if running_status is None:
                raise SMFParseError("data byte with no running status", base_offset + body.pos - 1)
            body.pos -= 1
            status = running_status

        if status == 0xFF:
            meta_type = body.read_u8()
            length = body.read_vlq()
            payload = body.read(length)
            running_status = None
            if meta_type == 0x51:
                if length != 3:
                    raise SMFParseError("tempo meta event must carry 3 bytes", base_offset + body.pos)
                rows.append((tick, track_idx, event_idx, "tempo", int.from_bytes(payload, "big")))
            elif meta_type == 0x58:
                if length < 2:
                    raise SMFParseError("time signature meta event too short", base_offset + body.pos)
                rows.append((tick, track_idx, event_idx, "timesig", payload[0], payload[1]))
            elif meta_type == 0x2F:
                break
        elif status in (0xF0, 0xF7):
            length = body.read_vlq()
            body.read(length)
            running_status = None
        elif status >= 0xF0:
            raise SMFParseError(f"unsupported system message 0x{status:02X}", base_offset + body.pos - 1)
        else:
            running_status = status
            kind = status & 0xF0
            channel = status & 0x0F
            if kind in (0x80, 0x90, 0xA0, 0xB0, 0xE0):
                d1 = body.read_u8()
                d2 = body.read_u8()
                if kind == 0x90 and d2 > 0:
                    rows.append((tick, track_idx, event_idx, "on", channel, d1, d2))
                elif kind == 0x80 or (kind == 0x90 and d2 == 0):
                    rows.append((tick, track_idx, event_idx, "off", channel, d1))
                elif kind == 0xB0 and d1 == SUSTAIN_CONTROLLER:
                    rows.append((tick, track_idx, event_idx, "sustain", d2))
            elif kind in (0xC0, 0xD0):
                body.read_u8()
            else:  # pragma: no cover - kinds above are exhaustive for status < 0xF0
                raise SMFParseError(f"unknown status byte 0x{status:02X}", base_offset + body.pos - 1)
        event_idx += 1
    return tick


# ---------------------------------------------------------------------------
# Writing

def _encode_vlq(value: int) -> bytes:
    if value < 0 or value > MAX_VLQ:
        raise ValueError(f"tick delta {value} outside 32-bit variable-length range")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def write_smf(seq: NoteSequence) -> bytes:
    """Serialize to a format-1 SMF: conductor track + one note track.

    parse_smf(write_smf(x)) reproduces x's notes, tempi, time signatures and
    sustain events exactly, provided same-pitch overlaps (if any) are
    FIFO-consistent (earlier onset releases first).
    """
    conductor = []
    for ev in seq.tempi:
        conductor.append((ev.tick, 0, b"\xff\x51\x03" + ev.microseconds_per_quarter.to_bytes(3, "big")))
    for ev in seq.time_signatures:
        conductor.append((ev.tick, 1, bytes([0xFF, 0x58, 0x04, ev.numerator, ev.denominator_log2, 24, 8])))

    channel_events = []
    for note in seq.notes:
        # offs sort before ons at the same tick so back-to-back same-pitch
        # notes re-parse with their original boundaries
        channel_events.append((note.offset_ticks, 0, bytes([0x80 | note.channel, note.pitch, 0])))
        channel_events.append((note.onset_ticks, 1, bytes([0x90 | note.channel, note.pitch, note.velocity])))
    for tick, value in seq.sustain_events:
        channel_events.append((tick, 2, bytes([0xB0, SUSTAIN_CONTROLLER, value])))

    header = struct.pack(">4sIHHH", b"MThd", 6, 1, 2, seq.ppq)
    return header + _encode_track(conductor) + _encode_track(channel_events)


def _encode_track(events: list[tuple[int, int, bytes]]) -> bytes:
    events = sorted(events, key=lambda e: (e[0], e[1]))
    body = bytearray()
    prev_tick = 0
    for tick, _, payload in events:
        body += _encode_vlq(tick - prev_tick)
        body += payload
        prev_tick = tick
    body += _encode_vlq(0) + b"\xff\x2f\x00"
    return struct.pack(">4sI", b"MTrk", len(body)) + bytes(body)


# ---------------------------------------------------------------------------
# Time arithmetic

def ticks_to_seconds(seq: NoteSequence, tick: int) -> float:
    """Piecewise-linear conversion of an absolute tick through the tempo map."""
    if tick < 0:
        raise ValueError("tick must be >= 0")
    tempi = seq.effective_tempi()
    seconds = 0.0
    for i, ev in enumerate(tempi):
        span_end = tempi[i + 1].tick if i + 1 < len(tempi) else tick
        span_end = min(span_end, tick)
        if span_end > ev.tick:
            seconds += (span_end - ev.tick) / seq.ppq * ev.microseconds_per_quarter / 1e6
        if span_end >= tick:
            break
    return seconds


def _round_half_up(x: float) -> int:
    return int(x + 0.5)


def resample_grid(seq: NoteSequence, target_ticks_per_beat: int = 96) -> NoteSequence:
    """Rescale all tick values onto a new beats grid (quarter note = beat).

    Onsets and durations are scaled by target/ppq with round-half-up;
    durations are clamped to >= 1. Tempo, time-signature, and sustain ticks
    are rescaled the same way so bar arithmetic stays consistent.
    """
    if target_ticks_per_beat <= 0:
        raise ValueError("target_ticks_per_beat must be > 0")
    scale = target_ticks_per_beat / seq.ppq
    notes = tuple(
        NoteEvent(
            onset_ticks=_round_half_up(n.onset_ticks * scale),
            duration_ticks=max(1, _round_half_up(n.duration_ticks * scale)),
            pitch=n.pitch,
            velocity=n.velocity,
            channel=n.channel,
        )
        for n in seq.notes
    )
    tempi = tuple(
        TempoEvent(_round_half_up(e.tick * scale), e.microseconds_per_quarter) for e in seq.tempi
    )
    sigs = tuple(
        TimeSignatureEvent(_round_half_up(e.tick * scale), e.numerator, e.denominator_log2)
        for e in seq.time_signatures
    )
    sustain = tuple((_round_half_up(t * scale), v) for t, v in seq.sustain_events)
    return NoteSequence(
        ppq=target_ticks_per_beat,
        notes=notes,
        tempi=tempi,
        time_signatures=sigs,
        sustain_events=sustain,
    )
