"""Objective evaluation of rendered performances.

Per-feature metrics over matched note pairs (token-id space): smoothed KL
divergence of value histograms, Pearson correlation, and a dynamic time
warping distance averaged over the warping path and normalized by the
feature's vocabulary size. Audio-side metrics are plain mean square errors
over chromagram and MIDI-spectrogram cells. Aggregation reports means with
normal-approximation 95% confidence intervals.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .align import AlignmentMap
from .midi_io import NoteSequence
from .synth import Chromagram, Spectrogram
from .tokenizer import N_SPECIALS, SEGMENT_LEN, VocabSpec, tokenize

KLD_EPSILON = 1e-6

PREDICTED_FEATURES = ("velocity", "ioi", "duration")


class ConstantSequenceError(ValueError):
    """Raised when correlation is undefined because a sequence is constant."""


@dataclass(frozen=True)
class FeatureSeq:
    """A velocity/ioi/duration value sequence in token-id space."""

    values: tuple[int, ...]
    feature: str
    vocab_size: int

    def __post_init__(self):
        if self.feature not in PREDICTED_FEATURES:
            raise ValueError(f"unknown feature {self.feature!r}")
        for v in self.values:
            if not N_SPECIALS <= v < self.vocab_size:
                raise ValueError(f"value {v} outside token range of {self.feature}")


@dataclass(frozen=True)
class Aggregate:
    mean: float
    ci95: float | None  # half-width; None when n < 2
    n: int
    n_missing: int = 0


ITEM_COLUMNS = (
    "item",
    "velocity_kld", "velocity_correlation", "velocity_dtwd",
    "ioi_kld", "ioi_correlation", "ioi_dtwd",
    "duration_kld", "duration_correlation", "duration_dtwd",
    "chroma_mse", "spectrogram_mse",
)


@dataclass
class MetricReport:
    """Per-item metric rows plus aggregates at two granularities."""

    item_rows: list[dict] = field(default_factory=list)
    performance_wise: dict[str, dict[str, Aggregate]] = field(default_factory=dict)
    segment_wise: dict[str, dict[str, Aggregate]] = field(default_factory=dict)
    chroma_mse: Aggregate | None = None
    spectrogram_mse: Aggregate | None = None

    def to_json(self) -> str:
        def enc(agg):
            if agg is None:
                return None
            return {"mean": agg.mean, "ci95": agg.ci95, "n": agg.n, "n_missing": agg.n_missing}

        return json.dumps(
            {
                "performance_wise": {
                    f: {m: enc(a) for m, a in row.items()}
                    for f, row in self.performance_wise.items()
                },
                "segment_wise": {
                    f: {m: enc(a) for m, a in row.items()}
                    for f, row in self.segment_wise.items()
                },
                "chroma_mse": enc(self.chroma_mse),
                "spectrogram_mse": enc(self.spectrogram_mse),
                "items": self.item_rows,
            },
            indent=2,
        )

    def to_csv(self) -> str:
        """One row per evaluated item; missing metrics are left blank."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(ITEM_COLUMNS)
        for row in self.item_rows:
            writer.writerow(
                [row.get("item", "")]
                + [
                    "" if row.get(col) is None else repr(row[col])
                    for col in ITEM_COLUMNS[1:]
                ]
            )
        return buf.getvalue()

    def summary_table(self) -> str:
        """Text summary shaped like the usual feature-by-metric table."""

        def cell(agg):
            if agg is None or agg.n == 0:
                return "-"
            if agg.ci95 is None:
                return f"{agg.mean:.3f}"
            return f"{agg.mean:.3f} +/- {agg.ci95:.3f}"

        lines = [
            f"{'Feature':<22}{'KLD (perf)':>16}{'Corr (perf)':>16}{'DTWD (perf)':>16}"
            f"{'KLD (seg)':>16}{'Corr (seg)':>16}{'DTWD (seg)':>16}"
        ]
        names = {"velocity": "Velocity", "ioi": "Inter-Onset Interval", "duration": "Duration"}
        for feat in PREDICTED_FEATURES:
            p = self.performance_wise.get(feat, {})
            s = self.segment_wise.get(feat, {})
            lines.append(
                f"{names[feat]:<22}"
                f"{cell(p.get('kld')):>16}{cell(p.get('correlation')):>16}{cell(p.get('dtwd')):>16}"
                f"{cell(s.get('kld')):>16}{cell(s.get('correlation')):>16}{cell(s.get('dtwd')):>16}"
            )
        if self.chroma_mse is not None or self.spectrogram_mse is not None:
            lines.append("")
            lines.append(f"{'Chroma MSE':<22}{cell(self.chroma_mse):>16}")
            lines.append(f"{'Spectrogram MSE':<22}{cell(self.spectrogram_mse):>16}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Core metrics

def _check_compatible(pred: FeatureSeq, target: FeatureSeq) -> None:
    if pred.feature != target.feature or pred.vocab_size != target.vocab_size:
        raise ValueError("sequences must share feature and vocabulary")


def kld(pred: FeatureSeq, target: FeatureSeq, reference: str = "target") -> float:
    """Smoothed KL divergence between value-token histograms.

    Default direction is KL(target || pred): how surprising the prediction's
    distribution is with the target as reference. Both histograms get 1e-6
    added to every bin and are renormalized, so disjoint supports stay
    finite.
    """
    _check_compatible(pred, target)
    if not pred.values or not target.values:
        raise ValueError("cannot compute KLD of an empty sequence")
    if reference not in ("target", "pred"):
        raise ValueError("reference must be 'target' or 'pred'")
    n_bins = pred.vocab_size - N_SPECIALS
    p = np.bincount([v - N_SPECIALS for v in pred.values], minlength=n_bins).astype(float)
    q = np.bincount([v - N_SPECIALS for v in target.values], minlength=n_bins).astype(float)
    p /= p.sum()
    q /= q.sum()
    p = (p + KLD_EPSILON) / (1.0 + n_bins * KLD_EPSILON)
    q = (q + KLD_EPSILON) / (1.0 + n_bins * KLD_EPSILON)
    if reference == "target":
        return float(np.sum(q * np.log(q / p)))
    return float(np.sum(p * np.log(p / q)))


def pearson(pred: FeatureSeq, target: FeatureSeq) -> float:
    """Sample Pearson correlation of the paired value sequences."""
    _check_compatible(pred, target)
    if len(pred.values) != len(target.values):
        raise ValueError("sequences must have equal length")
    if len(pred.values) < 2:
        raise ValueError("need at least 2 points for correlation")
    x = np.asarray(pred.values, dtype=float)
    y = np.asarray(target.values, dtype=float)
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(np.dot(dx, dx))
    sy = float(np.dot(dy, dy))
    if sx == 0.0 or sy == 0.0:
        raise ConstantSequenceError("undefined correlation for a constant sequence")
    return float(np.dot(dx, dy) / math.sqrt(sx * sy))


def dtwd(pred: FeatureSeq, target: FeatureSeq) -> float:
    """Vocabulary-normalized dynamic time warping distance.

    Classic DTW with |a-b| local cost and steps {(1,0),(0,1),(1,1)}. The
    optimal total cost is divided by the warping path length (ties between
    equal-cost paths resolve to the shortest) and then by the vocabulary
    size.
    """
    _check_compatible(pred, target)
    if not pred.values or not target.values:
        raise ValueError("cannot compute DTWD of an empty sequence")
    cost, length = dtw_path_cost([float(v) for v in pred.values],
                                 [float(v) for v in target.values])
    return cost / length / pred.vocab_size


def dtw_path_cost(x: list[float], y: list[float]) -> tuple[float, int]:
    """(total cost, path length) of the optimal warping path.

    Minimizes total |a-b| cost; among equal-cost paths, minimizes the number
    of aligned pairs, which makes the value unique.
    """
    n, m = len(x), len(y)
    INF = float("inf")
    cost = np.full((n + 1, m + 1), INF)
    length = np.zeros((n + 1, m + 1), dtype=int)
    cost[0, 0] = 0.0
    for i in range(1, n + 1):
        xi = x[i - 1]
        for j in range(1, m + 1):
            local = abs(xi - y[j - 1])
            best_c, best_l = cost[i - 1, j - 1], length[i - 1, j - 1]
            if (cost[i - 1, j], length[i - 1, j]) < (best_c, best_l):
                best_c, best_l = cost[i - 1, j], length[i - 1, j]
            if (cost[i, j - 1], length[i, j - 1]) < (best_c, best_l):
                best_c, best_l = cost[i, j - 1], length[i, j - 1]
            cost[i, j] = local + best_c
            length[i, j] = 1 + best_l
    return float(cost[n, m]), int(length[n, m])


def chroma_mse(a: Chromagram, b: Chromagram) -> float:
    return _matrix_mse(a.frames, b.frames, a.frame_rate, b.frame_rate, "chromagrams")


def spectrogram_mse(a: Spectrogram, b: Spectrogram) -> float:
    return _matrix_mse(a.frames, b.frames, a.frame_rate, b.frame_rate, "spectrograms")


def _matrix_mse(fa, fb, ra, rb, what: str) -> float:
    if ra != rb:
        raise ValueError(f"{what} must share a frame rate")
    n = min(len(fa), len(fb))
    if n == 0:
        raise ValueError(f"no overlapping frames between {what}")
    if len(fa) != len(fb):
        warnings.warn(f"{what} lengths differ ({len(fa)} vs {len(fb)}); truncating to {n}")
    diff = fa[:n] - fb[:n]
    return float(np.mean(diff * diff))


def aggregate(values: list[float]) -> Aggregate:
    """Mean and 1.96 * standard-error 95% CI half-width (n >= 2)."""
    n = len(values)
    if n == 0:
        raise ValueError("cannot aggregate zero values")
    mean = float(np.mean(values))
    if n < 2:
        return Aggregate(mean=mean, ci95=None, n=n)
    sd = float(np.std(values, ddof=1))
    return Aggregate(mean=mean, ci95=1.96 * sd / math.sqrt(n), n=n)


# ---------------------------------------------------------------------------
# Performance-level evaluation

def matched_feature_sequences(
    pred: NoteSequence, target: NoteSequence, alignment: AlignmentMap
) -> dict[str, tuple[FeatureSeq, FeatureSeq]]:
    """Per-feature (predicted, target) token sequences over matched pairs.

    Both sequences must already be on the 96-tick grid (resample_grid) so
    that alignment indices refer to the order being tokenized. IOIs are
    measured between consecutive matched notes on each side.
    """
    for name, seq in (("pred", pred), ("target", target)):
        if seq.ppq != 96:
            raise ValueError(f"{name} must be on the 96-tick grid; apply resample_grid first")
    vocab = VocabSpec()
    pred_idx = [i for i, _ in alignment.pairs]
    targ_idx = [j for _, j in alignment.pairs]
    pred_toks = _subset_tokens(pred, pred_idx)
    targ_toks = _subset_tokens(target, targ_idx)
    out = {}
    for feature in PREDICTED_FEATURES:
        attr = f"{feature}_tok"
        size = vocab.size(feature)
        out[feature] = (
            FeatureSeq(tuple(getattr(t, attr) for t in pred_toks), feature, size),
            FeatureSeq(tuple(getattr(t, attr) for t in targ_toks), feature, size),
        )
    return out


def _subset_tokens(seq: NoteSequence, indices: list[int]):
    sub = NoteSequence(
        ppq=seq.ppq,
        notes=tuple(seq.notes[i] for i in indices),
        tempi=seq.tempi,
        time_signatures=seq.time_signatures,
    )
    return tokenize(sub, is_score=False)


def evaluate_m2m(
    pairs: list[tuple[NoteSequence, NoteSequence, AlignmentMap]],
    labels: list[str] | None = None,
) -> MetricReport:
    """Feature metrics over (predicted, target, alignment) triples.

    Performance-wise values use each piece's full matched sequence;
    segment-wise values use consecutive 256-note windows of it (final
    partial window included). Constant sequences make correlation undefined
    and are counted as missing rather than zero.
    """
    perf_values = {f: {"kld": [], "correlation": [], "dtwd": []} for f in PREDICTED_FEATURES}
    seg_values = {f: {"kld": [], "correlation": [], "dtwd": []} for f in PREDICTED_FEATURES}
    perf_missing = {f: 0 for f in PREDICTED_FEATURES}
    seg_missing = {f: 0 for f in PREDICTED_FEATURES}
    labels = labels or [f"item_{i:04d}" for i in range(len(pairs))]
    item_rows = []

    for label, (pred, target, alignment) in zip(labels, pairs):
        row: dict = {"item": label}
        item_rows.append(row)
        if not alignment.pairs:
            continue
        features = matched_feature_sequences(pred, target, alignment)
        for feature, (p, q) in features.items():
            row[f"{feature}_kld"] = kld(p, q)
            row[f"{feature}_dtwd"] = dtwd(p, q)
            try:
                row[f"{feature}_correlation"] = pearson(p, q)
            except (ConstantSequenceError, ValueError):
                row[f"{feature}_correlation"] = None
            _accumulate(p, q, perf_values[feature], perf_missing, feature)
            for start in range(0, len(p.values), SEGMENT_LEN):
                pw = FeatureSeq(p.values[start:start + SEGMENT_LEN], feature, p.vocab_size)
                qw = FeatureSeq(q.values[start:start + SEGMENT_LEN], feature, q.vocab_size)
                _accumulate(pw, qw, seg_values[feature], seg_missing, feature)

    report = MetricReport(item_rows=item_rows)
    for feature in PREDICTED_FEATURES:
        report.performance_wise[feature] = _aggregate_row(
            perf_values[feature], perf_missing[feature]
        )
        report.segment_wise[feature] = _aggregate_row(seg_values[feature], seg_missing[feature])
    return report


def _accumulate(p: FeatureSeq, q: FeatureSeq, sink: dict, missing: dict, feature: str) -> None:
    sink["kld"].append(kld(p, q))
    sink["dtwd"].append(dtwd(p, q))
    try:
        sink["correlation"].append(pearson(p, q))
    except (ConstantSequenceError, ValueError):
        missing[feature] += 1


def _aggregate_row(values: dict, n_missing: int) -> dict[str, Aggregate]:
    row = {}
    for metric, vals in values.items():
        if not vals:
            row[metric] = Aggregate(mean=float("nan"), ci95=None, n=0,
                                    n_missing=n_missing if metric == "correlation" else 0)
            continue
        agg = aggregate(vals)
        if metric == "correlation":
            agg = Aggregate(agg.mean, agg.ci95, agg.n, n_missing)
        row[metric] = agg
    return row
