"""Deterministic MIDI-to-audio rendering and time-frequency features.

Additive synthesis stands in for a neural synthesizer: 8 harmonics per note
with a 1/h^1.3 rolloff, pitch-dependent exponential decay, linear attack and
release ramps, and peak normalization. The analysis side provides piano
rolls, a 128-bin semitone-spaced (MIDI-scale) spectrogram, chromagrams, and
the 9.6 s segmentation / cross-correlation stitching used around it.
"""

from __future__ import annotations

import io
import json
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .midi_io import NoteSequence, ticks_to_seconds

DEFAULT_SAMPLE_RATE = 24000
N_HARMONICS = 8
HARMONIC_ROLLOFF = 1.3
DECAY_SECONDS_AT_C4 = 0.8
ATTACK_SECONDS = 0.005
RELEASE_SECONDS = 0.010
PEAK_LEVEL = 0.95
SEGMENT_SECONDS = 9.6

DEFAULT_FRAME_LEN = 2048
DEFAULT_HOP = 512


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    """T x 128 non-negative matrix, one bin per MIDI pitch."""

    frames: np.ndarray
    frame_rate: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != 128:
            raise ValueError(f"spectrogram must be T x 128, got {frames.shape}")
        object.__setattr__(self, "frames", frames)


@dataclass(frozen=True)
class Chromagram:
    """T x 12 pitch-class matrix, rows L1-normalized where voiced."""

    frames: np.ndarray
    frame_rate: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != 12:
            raise ValueError(f"chromagram must be T x 12, got {frames.shape}")
        object.__setattr__(self, "frames", frames)


def midi_pitch_hz(pitch: float) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12)


def _note_times(seq: NoteSequence) -> list[tuple[float, float, int, int]]:
    return [
        (
            ticks_to_seconds(seq, n.onset_ticks),
            ticks_to_seconds(seq, n.offset_ticks),
            n.pitch,
            n.velocity,
        )
        for n in seq.notes
    ]


def piano_roll(seq: NoteSequence, frame_rate: float) -> np.ndarray:
    """T x 128 matrix: velocity/127 wherever a note sounds (max over overlaps)."""
    if frame_rate <= 0:
        raise ValueError("frame_rate must be > 0")
    times = _note_times(seq)
    if not times:
        return np.zeros((0, 128))
    end = max(off for _, off, _, _ in times)
    n_frames = int(np.ceil(end * frame_rate))
    roll = np.zeros((n_frames, 128))
    for onset, offset, pitch, velocity in times:
        first = int(np.floor(onset * frame_rate))
        last = int(np.ceil(offset * frame_rate))
        value = velocity / 127.0
        roll[first:last, pitch] = np.maximum(roll[first:last, pitch], value)
    return roll


def render_audio(seq: NoteSequence, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Additive-synthesis rendering of a NoteSequence.

    Per note: harmonics 1..8 at amplitude (velocity/127) * h^-1.3, an
    exponential decay with time constant 0.8 * 2^((60-pitch)/24) seconds, a
    5 ms linear attack and a 10 ms release after note-off. Harmonics at or
    above Nyquist are dropped. The mix is peak-normalized to 0.95.
    """
    times = _note_times(seq)
    if not times:
        return Waveform(np.zeros(0), sample_rate)
    total = max(off for _, off, _, _ in times) + RELEASE_SECONDS
    out = np.zeros(int(np.ceil(total * sample_rate)) + 1)
    nyquist = sample_rate / 2
    for onset, offset, pitch, velocity in times:
        start = int(round(onset * sample_rate))
        held = max(offset - onset, 1.0 / sample_rate)
        n_samples = int(round((held + RELEASE_SECONDS) * sample_rate))
        t = np.arange(n_samples) / sample_rate
        f0 = midi_pitch_hz(pitch)
        tone = np.zeros(n_samples)
        amp = velocity / 127.0
        for h in range(1, N_HARMONICS + 1):
            if h * f0 >= nyquist:
                break
            tone += amp * h ** (-HARMONIC_ROLLOFF) * np.sin(2 * np.pi * h * f0 * t)
        tau = DECAY_SECONDS_AT_C4 * 2.0 ** ((60 - pitch) / 24)
        env = np.exp(-t / tau)
        env *= np.minimum(t / ATTACK_SECONDS, 1.0)
        env *= np.clip((held + RELEASE_SECONDS - t) / RELEASE_SECONDS, 0.0, 1.0)
        out[start:start + n_samples] += tone * env
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= PEAK_LEVEL / peak
    return Waveform(out, sample_rate)


# ---------------------------------------------------------------------------
# Analysis

def _stft_magnitude(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    if len(samples) < frame_len:
        samples = np.pad(samples, (0, frame_len - len(samples)))
    n_frames = 1 + (len(samples) - frame_len) // hop
    window = np.hanning(frame_len)
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.abs(np.fft.rfft(samples[idx] * window, axis=1))


def midi_filterbank(sample_rate: int, frame_len: int) -> np.ndarray:
    """[128, n_fft_bins] triangular filters, one per MIDI pitch.

    Each triangle peaks at its pitch's center frequency and reaches zero at
    the neighboring semitone centers, so any STFT bin feeds at most two
    adjacent filters. Filters centered at or above Nyquist stay all-zero.
    """
    n_bins = frame_len // 2 + 1
    freqs = np.fft.rfftfreq(frame_len, d=1.0 / sample_rate)
    bank = np.zeros((128, n_bins))
    nyquist = sample_rate / 2
    for m in range(128):
        center = midi_pitch_hz(m)
        if center >= nyquist:
            continue
        lo = midi_pitch_hz(m - 1)
        hi = midi_pitch_hz(m + 1)
        rising = (freqs - lo) / (center - lo)
        falling = (hi - freqs) / (hi - center)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, 1.0)
    return bank


def midi_spectrogram(
    w: Waveform, frame_len: int = DEFAULT_FRAME_LEN, hop: int = DEFAULT_HOP
) -> Spectrogram:
    """Magnitude STFT through the semitone filterbank, log(1+x) compressed."""
    if not frame_len >= hop > 0:
        raise ValueError("need frame_len >= hop > 0")
    if len(w.samples) == 0:
        return Spectrogram(np.zeros((0, 128)), w.sample_rate / hop)
    mag = _stft_magnitude(w.samples, frame_len, hop)
    bank = midi_filterbank(w.sample_rate, frame_len)
    return Spectrogram(np.log1p(mag @ bank.T), w.sample_rate / hop)


def chromagram(s: Spectrogram) -> Chromagram:
    """Fold the 128 pitch bins into 12 pitch classes and L1-normalize frames."""
    chroma = np.zeros((s.frames.shape[0], 12))
    for c in range(12):
        chroma[:, c] = s.frames[:, c::12].sum(axis=1)
    totals = chroma.sum(axis=1, keepdims=True)
    voiced = totals[:, 0] > 0
    chroma[voiced] /= totals[voiced]
    return Chromagram(chroma, s.frame_rate)


# ---------------------------------------------------------------------------
# Segmentation and stitching

def segment_audio(
    w: Waveform, seg_seconds: float = SEGMENT_SECONDS, overlap_seconds: float = 0.0
) -> list[Waveform]:
    """Cut into seg_seconds windows whose consecutive members share
    overlap_seconds of material; the last window may be shorter."""
    if not 0 <= overlap_seconds < seg_seconds:
        raise ValueError("need 0 <= overlap < segment length")
    n = len(w.samples)
    seg = int(round(seg_seconds * w.sample_rate))
    overlap = int(round(overlap_seconds * w.sample_rate))
    step = seg - overlap
    segments = []
    start = 0
    while start < n:
        if start > 0 and start + overlap >= n:
            break  # nothing new past the shared overlap
        segments.append(Waveform(w.samples[start:start + seg].copy(), w.sample_rate))
        start += step
    if not segments:
        segments.append(Waveform(w.samples.copy(), w.sample_rate))
    return segments


@dataclass(frozen=True)
class StitchResult:
    waveform: Waveform
    lag: int  # samples; negative means b starts earlier than nominal
    fallback: bool  # True when inputs were too short for correlation


def concat_crosscorr(
    a: Waveform,
    b: Waveform,
    max_lag_seconds: float = 0.05,
    fade_seconds: float = 0.02,
    overlap_seconds: float | None = None,
) -> StitchResult:
    """Join two segments at the cross-correlation-optimal point.

    The last overlap_seconds of `a` (default max_lag + fade) are taken to
    nominally coincide with the head of `b`. The lag in [-max_lag, +max_lag]
    maximizing normalized cross-correlation between those windows is
    selected (ties: smallest |lag|, negative first), then an equal-power
    crossfade of fade_seconds is applied at the join. Inputs shorter than
    the correlation window fall back to a plain faded butt-join.
    """
    if a.sample_rate != b.sample_rate:
        raise ValueError("sample rates must match")
    sr = a.sample_rate
    fade = int(round(fade_seconds * sr))
    if len(a.samples) < fade or len(b.samples) < fade:
        raise ValueError("both segments must be at least one fade long")
    max_lag = int(round(max_lag_seconds * sr))
    if overlap_seconds is None:
        overlap_seconds = max_lag_seconds + fade_seconds
    window = int(round(overlap_seconds * sr))
    window = max(window, fade)

    if len(a.samples) < window or len(b.samples) < window + max_lag:
        joined = _crossfade_join(a.samples, b.samples, fade)
        return StitchResult(Waveform(joined, sr), 0, True)

    tail = a.samples[-window:]
    best_lag = 0
    best_key = None
    for lag in range(-max_lag, max_lag + 1):
        t0 = max(0, -lag)
        t1 = min(window, len(b.samples) - lag)
        if t1 - t0 < fade:
            continue
        x = tail[t0:t1]
        y = b.samples[t0 + lag:t1 + lag]
        denom = np.sqrt(np.dot(x, x) * np.dot(y, y))
        score = float(np.dot(x, y) / denom) if denom > 0 else -1.0
        key = (-score, abs(lag), 0 if lag < 0 else 1)
        if best_key is None or key < best_key:
            best_key = key
            best_lag = lag

    join = window + best_lag  # b's sample that continues a's last one
    if join < fade or join > len(b.samples):
        joined = _crossfade_join(a.samples, b.samples, fade)
        return StitchResult(Waveform(joined, sr), best_lag, True)
    theta = (np.arange(fade) + 0.5) / fade * (np.pi / 2)
    faded = a.samples[-fade:] * np.cos(theta) + b.samples[join - fade:join] * np.sin(theta)
    joined = np.concatenate([a.samples[:-fade], faded, b.samples[join:]])
    return StitchResult(Waveform(joined, sr), best_lag, False)


def _crossfade_join(a: np.ndarray, b: np.ndarray, fade: int) -> np.ndarray:
    if fade == 0:
        return np.concatenate([a, b])
    theta = (np.arange(fade) + 0.5) / fade * (np.pi / 2)
    faded = a[-fade:] * np.cos(theta) + b[:fade] * np.sin(theta)
    return np.concatenate([a[:-fade], faded, b[fade:]])


def stitch_segments(
    segments: list[Waveform],
    max_lag_seconds: float = 0.05,
    fade_seconds: float = 0.02,
    overlap_seconds: float | None = None,
) -> Waveform:
    """Fold concat_crosscorr over a segment list in order."""
    if not segments:
        raise ValueError("no segments to stitch")
    out = segments[0]
    for nxt in segments[1:]:
        out = concat_crosscorr(out, nxt, max_lag_seconds, fade_seconds, overlap_seconds).waveform
    return out


# ---------------------------------------------------------------------------
# File I/O

def write_wav(w: Waveform) -> bytes:
    """16-bit PCM mono RIFF bytes."""
    pcm = np.clip(w.samples, -1.0, 1.0)
    ints = np.round(pcm * 32767.0).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(ints.tobytes())
    return buf.getvalue()


def read_wav(data: bytes) -> Waveform:
    with wave.open(io.BytesIO(data), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise ValueError("only 16-bit mono WAV is supported")
        raw = wf.readframes(wf.getnframes())
        rate = wf.getframerate()
    ints = np.frombuffer(raw, dtype="<i2")
    return Waveform(ints.astype(np.float64) / 32767.0, rate)


def save_matrix(frames: np.ndarray, frame_rate: float, kind: str, path_base: str) -> None:
    """Raw float32 matrix with a JSON sidecar describing shape and rate."""
    Path(path_base + ".f32").write_bytes(np.ascontiguousarray(frames, dtype="<f4").tobytes())
    Path(path_base + ".json").write_text(
        json.dumps({"kind": kind, "shape": list(frames.shape), "frame_rate": frame_rate})
    )


def load_matrix(path_base: str) -> tuple[np.ndarray, float, str]:
    """(frames, frame_rate, kind) from a save_matrix pair."""
    meta = json.loads(Path(path_base + ".json").read_text())
    raw = np.frombuffer(Path(path_base + ".f32").read_bytes(), dtype="<f4")
    frames = raw.reshape(tuple(meta["shape"])).astype(np.float64)
    return frames, float(meta["frame_rate"]), str(meta["kind"])
