"""Six-feature note tokenization and 256-note segmentation.

Each note becomes a (pitch, velocity, duration, ioi, position, bar) tuple of
integer ids drawn from per-feature vocabularies. Every vocabulary reserves
four special ids (PAD=0, BOS=1, EOS=2, MASK=3) ahead of the value range:

    pitch     4 + (pitch - 21)            88 piano keys      -> size 92
    velocity  4 + floor(v / 2)            64 bins of width 2 -> size 68
    duration  4 + clamp(ticks, 1, 1152) - 1                  -> size 1156
    ioi       4 + clamp(delta, 0, 767)                       -> size 772
    position  4 + clamp(ticks into bar, 0, 383)              -> size 388
    bar       4 + clamp(bar index, 0, 2999)                  -> size 3004

The layout is derived: only the six totals are fixed, and four specials per
feature is the unique count that makes all of them self-consistent. Out of
range duration/IOI/position/bar values clamp rather than error so long
fermatas or very long pieces survive tokenization; out of range pitches are
an error (not a piano note).
"""

from __future__ import annotations

from dataclasses import dataclass

from .midi_io import NoteEvent, NoteSequence, TimeSignatureEvent

PAD, BOS, EOS, MASK = 0, 1, 2, 3
N_SPECIALS = 4

TICKS_PER_BEAT = 96
SEGMENT_LEN = 256

PITCH_MIN, PITCH_MAX = 21, 108
SCORE_VELOCITY = 60

FEATURE_NAMES = ("pitch", "velocity", "duration", "ioi", "position", "bar")


@dataclass(frozen=True)
class VocabSpec:
    """Per-feature vocabulary sizes, including the 4 specials each."""

    pitch: int = 92
    velocity: int = 68
    duration: int = 1156
    ioi: int = 772
    position: int = 388
    bar: int = 3004

    def __post_init__(self):
        expected = VocabSpec.__dataclass_fields__
        for name in FEATURE_NAMES:
            size = getattr(self, name)
            default = expected[name].default
            if size != default:
                raise ValueError(f"{name} vocabulary must have size {default}, got {size}")

    def size(self, feature: str) -> int:
        return getattr(self, feature)

    def n_values(self, feature: str) -> int:
        return getattr(self, feature) - N_SPECIALS

    def sizes(self) -> tuple[int, ...]:
        return tuple(getattr(self, name) for name in FEATURE_NAMES)


@dataclass(frozen=True)
class TokenTuple:
    pitch_tok: int
    velocity_tok: int
    duration_tok: int
    ioi_tok: int
    position_tok: int
    bar_tok: int

    def as_tuple(self) -> tuple[int, ...]:
        return (
            self.pitch_tok,
            self.velocity_tok,
            self.duration_tok,
            self.ioi_tok,
            self.position_tok,
            self.bar_tok,
        )


PAD_TUPLE = TokenTuple(PAD, PAD, PAD, PAD, PAD, PAD)


@dataclass(frozen=True)
class TokenSegment:
    """A fixed 256-slot window of token tuples, PAD-filled at the tail."""

    tuples: tuple[TokenTuple, ...]
    pad_mask: tuple[bool, ...]  # True where the slot is real (non-PAD)
    performer_id: int
    source_offset: int

    def __post_init__(self):
        if len(self.tuples) != SEGMENT_LEN or len(self.pad_mask) != SEGMENT_LEN:
            raise ValueError(f"segment must hold exactly {SEGMENT_LEN} slots")
        n_real = sum(self.pad_mask)
        if not all(self.pad_mask[:n_real]) or any(self.pad_mask[n_real:]):
            raise ValueError("non-pad positions must form a prefix")

    @property
    def n_real(self) -> int:
        return sum(self.pad_mask)


def bar_length_ticks(sig: TimeSignatureEvent, ticks_per_beat: int = TICKS_PER_BEAT) -> int:
    """Bar length in ticks; a beat is one quarter note regardless of meter."""
    return sig.numerator * ticks_per_beat * 4 // sig.denominator


def bar_and_position(seq: NoteSequence, onset: int) -> tuple[int, int]:
    """(bar index, ticks since bar start) under seq's time-signature map."""
    sigs = seq.effective_time_signatures()
    bars_before = 0
    for i, sig in enumerate(sigs):
        bar_len = bar_length_ticks(sig, seq.ppq)
        seg_start = sig.tick
        seg_end = sigs[i + 1].tick if i + 1 < len(sigs) else None
        if seg_end is not None and onset >= seg_end:
            # a partial bar before a signature change still counts as a bar
            bars_before += -(-(seg_end - seg_start) // bar_len)
            continue
        return bars_before + (onset - seg_start) // bar_len, (onset - seg_start) % bar_len
    raise AssertionError("unreachable: final segment is open-ended")


def _clamp(value: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, value))


def tokenize(seq: NoteSequence, is_score: bool, vocab: VocabSpec | None = None) -> list[TokenTuple]:
    """Tokenize a 96-ticks-per-beat NoteSequence in canonical note order.

    Score sequences get their velocity forced to the constant 60 so notation
    without dynamics tokenizes identically to exported score MIDI.
    """
    vocab = vocab or VocabSpec()
    if seq.ppq != TICKS_PER_BEAT:
        raise ValueError(
            f"sequence must be resampled to {TICKS_PER_BEAT} ticks per beat, got ppq={seq.ppq}"
        )
    out: list[TokenTuple] = []
    prev_onset: int | None = None
    for idx, note in enumerate(seq.notes):
        if not PITCH_MIN <= note.pitch <= PITCH_MAX:
            raise ValueError(
                f"note {idx}: pitch {note.pitch} outside piano range {PITCH_MIN}..{PITCH_MAX}"
            )
        velocity = SCORE_VELOCITY if is_score else note.velocity
        ioi = 0 if prev_onset is None else note.onset_ticks - prev_onset
        bar, position = bar_and_position(seq, note.onset_ticks)
        out.append(
            TokenTuple(
                pitch_tok=N_SPECIALS + (note.pitch - PITCH_MIN),
                velocity_tok=N_SPECIALS + velocity // 2,
                duration_tok=N_SPECIALS + _clamp(note.duration_ticks, 1, vocab.n_values("duration")) - 1,
                ioi_tok=N_SPECIALS + _clamp(ioi, 0, vocab.n_values("ioi") - 1),
                position_tok=N_SPECIALS + _clamp(position, 0, vocab.n_values("position") - 1),
                bar_tok=N_SPECIALS + _clamp(bar, 0, vocab.n_values("bar") - 1),
            )
        )
        prev_onset = note.onset_ticks
    return out


def detokenize(
    pitch_toks: list[int],
    velocity_toks: list[int],
    ioi_toks: list[int],
    duration_toks: list[int],
    time_signatures: tuple[TimeSignatureEvent, ...] = (),
) -> NoteSequence:
    """Rebuild a performance NoteSequence from score pitches and predicted
    velocity/IOI/duration ids.

    Onsets accumulate from IOIs starting at 0; velocities decode to bin
    centers (odd values 1..127).
    """
    lengths = {len(pitch_toks), len(velocity_toks), len(ioi_toks), len(duration_toks)}
    if len(lengths) != 1:
        raise ValueError("token lists must all share one length")
    for name, toks in (
        ("pitch", pitch_toks),
        ("velocity", velocity_toks),
        ("ioi", ioi_toks),
        ("duration", duration_toks),
    ):
        for pos, tok in enumerate(toks):
            if tok < N_SPECIALS:
                raise ValueError(f"special token {tok} in {name} stream at position {pos}")

    notes = []
    onset = 0
    for i in range(len(pitch_toks)):
        if i > 0:
            onset += ioi_toks[i] - N_SPECIALS
        velocity = _clamp((velocity_toks[i] - N_SPECIALS) * 2 + 1, 1, 127)
        notes.append(
            NoteEvent(
                onset_ticks=onset,
                duration_ticks=duration_toks[i] - N_SPECIALS + 1,
                pitch=pitch_toks[i] - N_SPECIALS + PITCH_MIN,
                velocity=velocity,
            )
        )
    return NoteSequence(ppq=TICKS_PER_BEAT, notes=tuple(notes), time_signatures=time_signatures)


def segment(tuples: list[TokenTuple], performer_id: int) -> list[TokenSegment]:
    """Cut a token stream into consecutive 256-note windows, PAD-filling the
    last one. source_offset records each window's first note index."""
    segments = []
    for start in range(0, len(tuples), SEGMENT_LEN):
        window = tuples[start:start + SEGMENT_LEN]
        n_real = len(window)
        window = window + [PAD_TUPLE] * (SEGMENT_LEN - n_real)
        mask = (True,) * n_real + (False,) * (SEGMENT_LEN - n_real)
        segments.append(
            TokenSegment(
                tuples=tuple(window),
                pad_mask=mask,
                performer_id=performer_id,
                source_offset=start,
            )
        )
    return segments


# ---------------------------------------------------------------------------
# Token dump format (one note per line, six tab-separated ids)

def dump_tokens(tuples: list[TokenTuple]) -> str:
    lines = ["\t".join(FEATURE_NAMES)]
    for t in tuples:
        lines.append("\t".join(str(v) for v in t.as_tuple()))
    return "\n".join(lines) + "\n"


def load_tokens(text: str) -> list[TokenTuple]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or tuple(lines[0].split("\t")) != FEATURE_NAMES:
        raise ValueError("token dump must start with the feature-name header")
    out = []
    for ln in lines[1:]:
        ids = [int(v) for v in ln.split("\t")]
        if len(ids) != 6:
            raise ValueError(f"expected 6 ids per line, got {len(ids)}")
        out.append(TokenTuple(*ids))
    return out
