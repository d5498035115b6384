"""Objective evaluation of rendered performances.

Five expressive curves are extracted per performance: onset-level
dynamics (Vel), relative inter-onset intervals as a tempo proxy (IOI),
intra-onset micro-timing deviations (OD), and articulation without and
with pedal sustain (Art, ArtS). Two performances of the same score are
compared by Pearson correlation of each curve and by a Monte-Carlo KL
divergence between the curve value distributions. Sets of performances
are compared pairwise per score and averaged so every composition
contributes equally.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .codec import AlignedSequence
from .errors import ValidationError

CURVE_NAMES = ("vel", "ioi", "od", "art", "art_s")
METRIC_LABELS = {"vel": "Vel", "ioi": "IOI", "od": "OD", "art": "Art", "art_s": "ArtS"}


@dataclass
class ExpressiveCurves:
    vel: np.ndarray  # mean MIDI velocity per distinct score onset
    ioi: np.ndarray  # performed / nominal onset gap, per onset pair
    od: np.ndarray  # per-note deviation from the chord mean onset
    art: np.ndarray  # pressed duration / nominal score duration
    art_s: np.ndarray  # sustained duration / nominal score duration
    skipped_ioi: int = 0  # onset pairs dropped for a zero score gap


def _seconds_per_whole(bpm):
    # Direction-marking tempo is quarter-note BPM; 4 quarters per whole.
    return 240.0 / bpm


def extract_curves(seq: AlignedSequence) -> ExpressiveCurves:
    """Expressive feature curves.

    IOI divides the performed onset gap by the nominal score gap at the
    direction tempo marking, so it scales with a global tempo change.
    OD and Art normalize by the *local performed* tempo (the onset gap
    actually played), so they are invariant to uniform time scaling.
    A deadpan rendition at the marked tempo gives IOI = 1, OD = 0,
    Art = 1.
    """
    n = len(seq)
    if n == 0:
        raise ValidationError("cannot extract curves from an empty sequence")
    score_onset = seq.score_onset
    perf_onset = seq.perf_onsets()
    spw = _seconds_per_whole(seq.score_tempo_bpm)

    starts = np.unique(score_onset, return_index=True)[1]
    bounds = np.append(starts, n)
    m = len(starts)

    vel = np.empty(m)
    chord_mean = np.empty(m)
    for j in range(m):
        grp = slice(bounds[j], bounds[j + 1])
        vel[j] = seq.velocity[grp].mean()
        chord_mean[j] = perf_onset[grp].mean()

    score_gap = np.diff(score_onset[starts])  # whole notes, > 0 by sorting
    perf_gap = np.diff(chord_mean)

    ioi = []
    skipped = 0
    for j in range(1, m):
        nominal = score_gap[j - 1] * spw[starts[j]]
        if nominal <= 0:
            skipped += 1
            continue
        ioi.append(perf_gap[j - 1] / nominal)
    ioi = np.array(ioi)

    # Local performed seconds per whole note, from the gap to the next
    # onset (previous gap for the final onset). Falls back to the
    # nominal tempo when the performed gap is degenerate.
    local_spw = np.empty(m)
    for j in range(m):
        jj = j if j + 1 < m else j - 1
        if m > 1 and perf_gap[jj] > 1e-9 and score_gap[jj] > 0:
            local_spw[j] = perf_gap[jj] / score_gap[jj]
        else:
            local_spw[j] = spw[starts[j]]

    od = np.empty(n)
    for j in range(m):
        grp = slice(bounds[j], bounds[j + 1])
        jj = j if j + 1 < m else j - 1
        if m > 1 and perf_gap[jj] > 1e-9:
            gap_s = perf_gap[jj]
        else:
            gap_s = local_spw[j] * (score_gap[jj] if m > 1 else 1.0)
        od[grp] = (perf_onset[grp] - chord_mean[j]) / gap_s

    onset_of_note = np.empty(n, dtype=np.int64)
    for j in range(m):
        onset_of_note[bounds[j] : bounds[j + 1]] = j
    has_dur = seq.duration > 0
    nominal_local = seq.duration * local_spw[onset_of_note]
    art = seq.time_duration[has_dur] / nominal_local[has_dur]
    art_s = seq.time_duration_sustain[has_dur] / nominal_local[has_dur]

    return ExpressiveCurves(vel, ioi, od, art, art_s, skipped)


def pearson(a, b):
    """Sample correlation; returns None when undefined (zero variance)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"series lengths differ: {a.shape} vs {b.shape}")
    if a.size < 2:
        return None
    da = a - a.mean()
    db = b - b.mean()
    va = (da * da).sum()
    vb = (db * db).sum()
    if va == 0.0 or vb == 0.0:
        return None
    return float((da * db).sum() / np.sqrt(va * vb))


def _silverman_bandwidth(samples):
    n = len(samples)
    std = samples.std()
    q75, q25 = np.percentile(samples, [75, 25])
    iqr = q75 - q25
    spread = min(std, iqr / 1.34) if iqr > 0 else std
    scale = max(abs(samples).max(), 1.0)
    floor = 1e-3 * scale
    return max(0.9 * spread * n ** (-0.2), floor)


class _Kde1d:
    """Gaussian kernel density with Silverman's bandwidth."""

    def __init__(self, samples):
        self.samples = np.asarray(samples, dtype=np.float64)
        self.bw = _silverman_bandwidth(self.samples)

    def logpdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = np.empty(len(x))
        norm = np.log(len(self.samples) * self.bw * np.sqrt(2 * np.pi))
        for lo in range(0, len(x), 2048):  # chunked to bound memory
            chunk = x[lo : lo + 2048]
            z = (chunk[:, None] - self.samples[None, :]) / self.bw
            log_k = -0.5 * z * z
            m = log_k.max(axis=1, keepdims=True)
            out[lo : lo + 2048] = np.log(np.exp(log_k - m).sum(axis=1)) + m[:, 0] - norm
        return out

    def sample(self, n, rng):
        centers = self.samples[rng.integers(0, len(self.samples), size=n)]
        return centers + rng.normal(0.0, self.bw, size=n)


def kl_mc(samples_p, samples_q, n_mc=10_000, rng=None):
    """Monte-Carlo KL divergence between two sample sets.

    Fits a Gaussian KDE to each set and estimates E_p[log p - log q]
    with draws from the fitted p. Identical sample sets give exactly 0;
    small negative values are Monte-Carlo noise.
    """
    samples_p = np.asarray(samples_p, dtype=np.float64)
    samples_q = np.asarray(samples_q, dtype=np.float64)
    if samples_p.size < 10 or samples_q.size < 10:
        raise ValidationError("kl_mc needs at least 10 samples per side")
    if rng is None:
        rng = np.random.default_rng(0)
    p = _Kde1d(samples_p)
    q = _Kde1d(samples_q)
    x = p.sample(n_mc, rng)
    return float(np.mean(p.logpdf(x) - q.logpdf(x)))


# -- set-level protocol ------------------------------------------------------


@dataclass
class EvalReport:
    correlation: dict  # curve -> (mean, std) across scores
    kl: dict  # curve -> (mean, std) across scores
    pairs_per_score: dict = field(default_factory=dict)
    skipped_scores: list = field(default_factory=list)
    undefined_correlations: int = 0

    def table(self):
        lines = []
        header = f"{'Metric':<8}" + "".join(f"{METRIC_LABELS[c]:>16}" for c in CURVE_NAMES)
        lines.append(header)
        row = f"{'Corr':<8}"
        for c in CURVE_NAMES:
            mean, std = self.correlation[c]
            row += f"{_fmt(mean, std):>16}"
        lines.append(row)
        row = f"{'KL':<8}"
        for c in CURVE_NAMES:
            mean, std = self.kl[c]
            row += f"{_fmt(mean, std):>16}"
        lines.append(row)
        return "\n".join(lines)

    def to_json(self):
        return json.dumps(
            {
                "correlation": {c: list(self.correlation[c]) for c in CURVE_NAMES},
                "kl": {c: list(self.kl[c]) for c in CURVE_NAMES},
                "pairs_per_score": self.pairs_per_score,
                "skipped_scores": self.skipped_scores,
                "undefined_correlations": self.undefined_correlations,
            },
            indent=2,
        )


def _fmt(mean, std):
    if mean is None:
        return "n/a"
    return f"{mean:.3f}±{std:.3f}"


def _pair_metrics(ca, cb, n_mc, rng):
    corr = {}
    kl = {}
    for name in CURVE_NAMES:
        a = getattr(ca, name)
        b = getattr(cb, name)
        corr[name] = pearson(a, b) if a.shape == b.shape else None
        if a.size >= 10 and b.size >= 10:
            kl[name] = kl_mc(a, b, n_mc, rng)
        else:
            kl[name] = None
    return corr, kl


def evaluate_sets(set_a, set_b, n_mc=2000, seed=0):
    """Compare two performance collections score by score.

    set_a/set_b map a score id to a list of AlignedSequence. Metrics are
    computed over every cross pair, averaged within a score, then across
    scores, so each composition weighs equally regardless of how many
    performances it has. Scores present in only one set are skipped and
    reported.
    """
    report = EvalReport(correlation={}, kl={})
    per_score_corr = {c: [] for c in CURVE_NAMES}
    per_score_kl = {c: [] for c in CURVE_NAMES}
    root = np.random.SeedSequence(seed)

    for score_id in sorted(set(set_a) | set(set_b)):
        if score_id not in set_a or score_id not in set_b:
            report.skipped_scores.append(score_id)
            continue
        curves_a = [extract_curves(s) for s in set_a[score_id]]
        curves_b = [extract_curves(s) for s in set_b[score_id]]
        rng = np.random.default_rng(root.spawn(1)[0])
        sums = {c: [] for c in CURVE_NAMES}
        kls = {c: [] for c in CURVE_NAMES}
        pairs = 0
        for ca in curves_a:
            for cb in curves_b:
                corr, kl = _pair_metrics(ca, cb, n_mc, rng)
                pairs += 1
                for c in CURVE_NAMES:
                    if corr[c] is None:
                        report.undefined_correlations += 1
                    else:
                        sums[c].append(corr[c])
                    if kl[c] is not None:
                        kls[c].append(kl[c])
        report.pairs_per_score[score_id] = pairs
        for c in CURVE_NAMES:
            if sums[c]:
                per_score_corr[c].append(float(np.mean(sums[c])))
            if kls[c]:
                per_score_kl[c].append(float(np.mean(kls[c])))

    for c in CURVE_NAMES:
        report.correlation[c] = _mean_std(per_score_corr[c])
        report.kl[c] = _mean_std(per_score_kl[c])
    return report


def _mean_std(values):
    if not values:
        return (None, None)
    arr = np.asarray(values)
    return (float(arr.mean()), float(arr.std()))
