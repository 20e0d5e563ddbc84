import numpy as np

from s2a.midi_io import NoteEvent, NoteSequence, TempoEvent
from s2a.synth import (
    Waveform,
    chromagram,
    concat_crosscorr,
    midi_filterbank,
    midi_pitch_hz,
    midi_spectrogram,
    piano_roll,
    read_wav,
    render_audio,
    segment_audio,
    stitch_segments,
    write_wav,
)


def one_note_seq(pitch=69, seconds=1.0, velocity=127):
    # ppq 96 at 500000 us/q -> 192 ticks per second
    ticks = int(round(seconds * 192))
    return NoteSequence(
        ppq=96,
        notes=(NoteEvent(0, ticks, pitch, velocity),),
        tempi=(TempoEvent(0, 500000),),
    )


class TestPianoRoll:
    def test_empty(self):
        roll = piano_roll(NoteSequence(ppq=96), frame_rate=100)
        assert roll.shape == (0, 128)

    def test_one_second_note(self):
        roll = piano_roll(one_note_seq(pitch=60, seconds=1.0), frame_rate=100)
        assert roll.shape == (100, 128)
        assert np.all(roll[:, 60] == 1.0)
        assert roll.sum() == 100.0

    def test_overlap_max_rule(self):
        seq = NoteSequence(
            ppq=96,
            notes=(NoteEvent(0, 192, 60, 64), NoteEvent(0, 192, 60, 127)),
            tempi=(TempoEvent(0, 500000),),
        )
        roll = piano_roll(seq, frame_rate=50)
        assert np.all(roll[:, 60] == 1.0)


class TestRenderAudio:
    def test_empty_sequence(self):
        w = render_audio(NoteSequence(ppq=96))
        assert len(w.samples) == 0

    def test_a4_spectral_peak(self):
        w = render_audio(one_note_seq(pitch=69))
        spectrum = np.abs(np.fft.rfft(w.samples))
        freqs = np.fft.rfftfreq(len(w.samples), 1 / w.sample_rate)
        bin_width = freqs[1] - freqs[0]
        assert abs(freqs[np.argmax(spectrum)] - 440.0) <= bin_width

    def test_velocity_linear_before_normalization(self):
        # normalization divides by the peak, so the shape must be identical
        w32 = render_audio(one_note_seq(velocity=32))
        w64 = render_audio(one_note_seq(velocity=64))
        assert np.allclose(w32.samples, w64.samples, atol=1e-12)
        # and the unnormalized relation is visible through the roll-off of a
        # two-note mix where only one note's velocity doubles
        seq_a = NoteSequence(
            ppq=96,
            notes=(NoteEvent(0, 192, 60, 32), NoteEvent(384, 192, 72, 100)),
            tempi=(TempoEvent(0, 500000),),
        )
        seq_b = NoteSequence(
            ppq=96,
            notes=(NoteEvent(0, 192, 60, 64), NoteEvent(384, 192, 72, 100)),
            tempi=(TempoEvent(0, 500000),),
        )
        a = render_audio(seq_a).samples
        b = render_audio(seq_b).samples
        # during the first note, b is twice a up to the differing global norm
        norm_a = np.max(np.abs(a))
        norm_b = np.max(np.abs(b))
        seg_a = a[2000:4000] / norm_a
        seg_b = b[2000:4000] / norm_b
        assert np.allclose(seg_b, 2 * seg_a, atol=1e-9)

    def test_never_clips(self):
        seq = NoteSequence(
            ppq=96,
            notes=tuple(NoteEvent(0, 192, 50 + i, 127) for i in range(20)),
            tempi=(TempoEvent(0, 500000),),
        )
        w = render_audio(seq)
        assert np.max(np.abs(w.samples)) <= 0.95 + 1e-12

    def test_deterministic(self):
        seq = one_note_seq()
        a = render_audio(seq)
        b = render_audio(seq)
        assert np.array_equal(a.samples, b.samples)


class TestSpectrogram:
    def test_silence(self):
        s = midi_spectrogram(Waveform(np.zeros(48000)))
        assert np.all(s.frames == 0)

    def test_pure_sine_argmax_69(self):
        sr = 24000
        t = np.arange(sr * 2) / sr
        w = Waveform(0.5 * np.sin(2 * np.pi * 440 * t), sr)
        s = midi_spectrogram(w)
        voiced = s.frames.sum(axis=1) > 0
        assert voiced.any()
        assert np.all(np.argmax(s.frames[voiced], axis=1) == 69)

    def test_amplitude_monotonicity(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(24000) * 0.1
        s1 = midi_spectrogram(Waveform(x))
        s2 = midi_spectrogram(Waveform(2 * x))
        assert np.all(s2.frames >= s1.frames - 1e-12)

    def test_filterbank_bins_touch_at_most_two_filters(self):
        bank = midi_filterbank(24000, 2048)
        touched = (bank > 0).sum(axis=0)
        assert touched.max() <= 2

    def test_filters_above_nyquist_are_zero(self):
        bank = midi_filterbank(8000, 2048)
        for m in range(128):
            if midi_pitch_hz(m) >= 4000:
                assert np.all(bank[m] == 0)


class TestChromagram:
    def test_all_zero(self):
        s = midi_spectrogram(Waveform(np.zeros(48000)))
        c = chromagram(s)
        assert np.all(c.frames == 0)

    def test_a4_pitch_class(self):
        w = render_audio(one_note_seq(pitch=69))
        c = chromagram(midi_spectrogram(w))
        voiced = c.frames.sum(axis=1) > 0
        assert np.all(np.argmax(c.frames[voiced], axis=1) == 9)

    def test_voiced_rows_sum_to_one(self):
        w = render_audio(one_note_seq(pitch=60))
        c = chromagram(midi_spectrogram(w))
        sums = c.frames.sum(axis=1)
        voiced = sums > 0
        assert np.allclose(sums[voiced], 1.0)


class TestSegmentAudio:
    def test_exactly_one_segment(self):
        w = Waveform(np.zeros(int(9.6 * 24000)))
        assert len(segment_audio(w)) == 1

    def test_two_segments_no_overlap(self):
        w = Waveform(np.zeros(int(19.2 * 24000)))
        segs = segment_audio(w)
        assert len(segs) == 2
        assert all(len(s.samples) == int(9.6 * 24000) for s in segs)

    def test_overlap_starts(self):
        sr = 24000
        w = Waveform(np.arange(20 * sr, dtype=float))
        segs = segment_audio(w, 9.6, 0.5)
        starts = [int(s.samples[0]) for s in segs]
        assert starts == [0, int(9.1 * sr), int(18.2 * sr)]


class TestConcatCrosscorr:
    def make_signal(self, seconds=3.0, sr=24000, seed=0):
        rng = np.random.default_rng(seed)
        t = np.arange(int(seconds * sr)) / sr
        x = 0.4 * np.sin(2 * np.pi * 220 * t) + 0.2 * np.sin(2 * np.pi * 331 * t)
        return Waveform(x + 0.05 * rng.standard_normal(len(t)), sr)

    def test_exact_tail_copy_gives_zero_lag(self):
        x = self.make_signal()
        sr = x.sample_rate
        n = len(x.samples)
        a = Waveform(x.samples[: n // 2], sr)
        b = Waveform(x.samples[n // 2 - int(0.07 * sr):], sr)
        result = concat_crosscorr(a, b, max_lag_seconds=0.05, fade_seconds=0.02)
        assert result.lag == 0
        assert not result.fallback

    def test_recovers_injected_shift(self):
        x = self.make_signal(seed=1)
        sr = x.sample_rate
        n = len(x.samples)
        overlap = int(0.07 * sr)
        for k in (120, 600, -300):
            # b's content starts k samples later than the nominal overlap
            b = Waveform(x.samples[n // 2 - overlap + k:], sr)
            a = Waveform(x.samples[: n // 2], sr)
            result = concat_crosscorr(a, b, max_lag_seconds=0.05, fade_seconds=0.02)
            assert result.lag == -k

    def test_short_inputs_fall_back(self):
        sr = 24000
        a = Waveform(np.ones(600), sr)
        b = Waveform(np.ones(600), sr)
        result = concat_crosscorr(a, b, max_lag_seconds=0.05, fade_seconds=0.02)
        assert result.fallback

    def test_stitched_matches_continuous_outside_fades(self):
        seq = NoteSequence(
            ppq=96,
            notes=tuple(
                NoteEvent(i * 96, 72, 48 + (i * 7) % 40, 40 + (i * 13) % 80)
                for i in range(64)
            ),
            tempi=(TempoEvent(0, 500000),),
        )
        continuous = render_audio(seq)
        assert continuous.duration_seconds > 19.2
        fade = 0.02
        overlap = 0.5
        segs = segment_audio(continuous, 9.6, overlap)
        stitched = stitch_segments(segs, max_lag_seconds=0.05, fade_seconds=fade,
                                   overlap_seconds=overlap)
        n = min(len(stitched.samples), len(continuous.samples))
        sr = continuous.sample_rate
        # at zero lag the k-th join's crossfade ends at S + (k-1)(S - V)
        seg_n = int(9.6 * sr)
        step = seg_n - int(overlap * sr)
        fade_n = int(fade * sr)
        mask = np.ones(n, dtype=bool)
        for k in range(1, len(segs)):
            join = seg_n + (k - 1) * step
            mask[max(0, join - fade_n - 2):min(n, join + 2)] = False
        diff = stitched.samples[:n][mask] - continuous.samples[:n][mask]
        rms = np.sqrt(np.mean(diff * diff))
        assert rms < 1e-3


def test_matrix_export_round_trip(tmp_path):
    from s2a.synth import load_matrix, save_matrix

    w = render_audio(one_note_seq(pitch=60, seconds=0.5))
    spec = midi_spectrogram(w)
    base = str(tmp_path / "spec")
    save_matrix(spec.frames, spec.frame_rate, "spectrogram", base)
    frames, rate, kind = load_matrix(base)
    assert kind == "spectrogram"
    assert rate == spec.frame_rate
    assert frames.shape == spec.frames.shape
    assert np.allclose(frames, spec.frames, atol=1e-6)


class TestWav:
    def test_round_trip(self):
        rng = np.random.default_rng(8)
        w = Waveform(np.clip(rng.standard_normal(1000) * 0.2, -1, 1), 24000)
        again = read_wav(write_wav(w))
        assert again.sample_rate == 24000
        assert np.max(np.abs(again.samples - w.samples)) < 1.0 / 32767

    def test_deterministic_bytes(self):
        w = render_audio(one_note_seq())
        assert write_wav(w) == write_wav(w)
