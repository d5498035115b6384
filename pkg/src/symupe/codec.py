"""Score/performance feature encoding and the quantized token codec.

A note is described by four score features (pitch, position in the bar,
shift from the previous score onset, notated duration; positions and
durations are fractions of a whole note on a 1/96-whole grid) and four
performance features (MIDI velocity, time shift in seconds from the
previous note in sort order, pressed duration, pedal-extended duration).
Sequences are sorted by score time, then by pitch inside a chord, so
performance time shifts may be negative.

The tokenizer quantizes each feature onto a fixed table of bins. Shift,
duration and timing features use adaptive bins: fine near zero, coarser
for large values. Vocabulary sizes are part of the published interface
and are asserted at construction.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DecodeError, ParseError, RangeError, ValidationError

PITCH_MIN = 21
PITCH_MAX = 108
WHOLE_UNITS = 96  # grid positions per whole note

SCORE_FEATURE_NAMES = ("pitch", "position", "position_shift", "duration")
PERF_FEATURE_NAMES = ("velocity", "time_shift", "time_duration", "time_duration_sustain")

ALIGN_MAGIC = "SYMUPE-ALIGN v1"
TOKENIZER_MAGIC = "SYMUPE-TOK v1"

_COLUMNS = (
    "pitch",
    "position",
    "position_shift",
    "duration",
    "bar_index",
    "is_downbeat",
    "beat_index",
    "velocity",
    "time_shift",
    "time_duration",
    "time_duration_sustain",
    "interpolated",
    "score_tempo_bpm",
    "score_velocity",
    "beat_tempo_bpm",
)


@dataclass
class TimeSig:
    """Time signature active from `bar_index` onward."""

    bar_index: int
    numerator: int
    denominator: int

    @property
    def bar_length(self):
        return self.numerator / self.denominator

    @property
    def beat_length(self):
        return 1.0 / self.denominator


@dataclass
class ScoreNote:
    pitch: int
    position: float
    position_shift: float
    duration: float
    bar_index: int
    is_downbeat: bool


@dataclass
class PerfNote:
    velocity: int
    time_shift: float
    time_duration: float
    time_duration_sustain: float
    interpolated: bool = False


@dataclass
class ScoreEvent:
    """A score note before pairwise feature extraction."""

    pitch: int
    bar_index: int
    position: float  # whole-note fraction inside the bar
    duration: float  # whole-note fraction


@dataclass
class PerfEvent:
    """A performed note in absolute seconds."""

    velocity: int
    onset_s: float
    offset_s: float
    sustain_offset_s: float | None = None

    def __post_init__(self):
        if self.sustain_offset_s is None:
            self.sustain_offset_s = self.offset_s


@dataclass
class NotePair:
    score: ScoreEvent
    perf: PerfEvent | None  # None marks a note the performer did not play


class AlignedSequence:
    """Parallel score/performance arrays for one matched sequence.

    All per-note fields are numpy arrays of equal length. `score_onset`
    is the global score position in whole notes (bar start + position),
    kept for mask/beat bookkeeping and the evaluation curves.
    """

    def __init__(
        self,
        pitch,
        position,
        position_shift,
        duration,
        bar_index,
        is_downbeat,
        beat_index,
        velocity,
        time_shift,
        time_duration,
        time_duration_sustain,
        interpolated,
        score_tempo_bpm,
        score_velocity,
        beat_tempo_bpm,
        time_signatures=None,
        validate=True,
    ):
        self.pitch = np.asarray(pitch, dtype=np.int64)
        self.position = np.asarray(position, dtype=np.float64)
        self.position_shift = np.asarray(position_shift, dtype=np.float64)
        self.duration = np.asarray(duration, dtype=np.float64)
        self.bar_index = np.asarray(bar_index, dtype=np.int64)
        self.is_downbeat = np.asarray(is_downbeat, dtype=bool)
        self.beat_index = np.asarray(beat_index, dtype=np.int64)
        self.velocity = np.asarray(velocity, dtype=np.int64)
        self.time_shift = np.asarray(time_shift, dtype=np.float64)
        self.time_duration = np.asarray(time_duration, dtype=np.float64)
        self.time_duration_sustain = np.asarray(time_duration_sustain, dtype=np.float64)
        self.interpolated = np.asarray(interpolated, dtype=bool)
        self.score_tempo_bpm = np.asarray(score_tempo_bpm, dtype=np.float64)
        self.score_velocity = np.asarray(score_velocity, dtype=np.int64)
        self.beat_tempo_bpm = np.asarray(beat_tempo_bpm, dtype=np.float64)
        self.time_signatures = list(time_signatures) if time_signatures else [TimeSig(0, 4, 4)]
        if validate:
            self.validate()

    def __len__(self):
        return len(self.pitch)

    def validate(self):
        n = len(self.pitch)
        for name in _COLUMNS:
            if len(getattr(self, name)) != n:
                raise ValidationError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        if n == 0:
            return
        if self.pitch.min() < PITCH_MIN or self.pitch.max() > PITCH_MAX:
            raise RangeError(f"pitch outside [{PITCH_MIN}, {PITCH_MAX}]")
        if self.velocity.min() < 0 or self.velocity.max() > 127:
            raise RangeError("velocity outside [0, 127]")
        if (self.time_duration < 0).any():
            raise ValidationError("negative time_duration")
        if (self.time_duration_sustain < self.time_duration - 1e-9).any():
            raise ValidationError("time_duration_sustain < time_duration")

    @property
    def score_onset(self):
        if len(self) == 0:
            return np.zeros(0)
        starts = bar_start_positions(self.time_signatures, int(self.bar_index.max()) + 1)
        return starts[self.bar_index] + self.position

    def perf_onsets(self):
        return np.cumsum(self.time_shift)

    def score_notes(self):
        return [
            ScoreNote(int(p), float(pos), float(ps), float(d), int(b), bool(db))
            for p, pos, ps, d, b, db in zip(
                self.pitch, self.position, self.position_shift, self.duration, self.bar_index, self.is_downbeat
            )
        ]

    def perf_notes(self):
        return [
            PerfNote(int(v), float(ts), float(td), float(tds), bool(i))
            for v, ts, td, tds, i in zip(
                self.velocity, self.time_shift, self.time_duration, self.time_duration_sustain, self.interpolated
            )
        ]

    def copy(self):
        return AlignedSequence(
            *(getattr(self, name).copy() for name in _COLUMNS),
            time_signatures=list(self.time_signatures),
            validate=False,
        )

    def subsequence(self, start, stop):
        """Slice out a note window; shifts of the first note reset to zero."""
        out = AlignedSequence(
            *(getattr(self, name)[start:stop].copy() for name in _COLUMNS),
            time_signatures=list(self.time_signatures),
            validate=False,
        )
        if len(out) > 0:
            out.position_shift[0] = 0.0
            out.time_shift[0] = 0.0
        return out

    # -- text serialization -------------------------------------------------

    def dumps(self):
        buf = io.StringIO()
        buf.write(ALIGN_MAGIC + "\n")
        sigs = ";".join(f"{s.bar_index}/{s.numerator}/{s.denominator}" for s in self.time_signatures)
        buf.write(f"# timesig {sigs}\n")
        buf.write("# columns " + " ".join(_COLUMNS) + "\n")
        for i in range(len(self)):
            row = []
            for name in _COLUMNS:
                v = getattr(self, name)[i]
                if isinstance(v, (np.bool_, bool)):
                    row.append("1" if v else "0")
                elif isinstance(v, (np.integer, int)):
                    row.append(str(int(v)))
                else:
                    row.append(repr(float(v)))
            buf.write(" ".join(row) + "\n")
        return buf.getvalue()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text):
        lines = text.splitlines()
        if not lines or lines[0].strip() != ALIGN_MAGIC:
            raise ParseError(f"missing {ALIGN_MAGIC} header")
        sigs = [TimeSig(0, 4, 4)]
        rows = []
        for line in lines[1:]:
            line = line.strip()
            if not line:
                continue
            if line.startswith("# timesig"):
                sigs = []
                for part in line.split(None, 2)[2].split(";"):
                    b, nu, de = part.split("/")
                    sigs.append(TimeSig(int(b), int(nu), int(de)))
                continue
            if line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != len(_COLUMNS):
                raise ParseError(f"expected {len(_COLUMNS)} columns, got {len(parts)}")
            rows.append(parts)
        cols = list(zip(*rows)) if rows else [[] for _ in _COLUMNS]
        kwargs = {}
        for name, values in zip(_COLUMNS, cols):
            if name in ("pitch", "bar_index", "beat_index", "velocity", "score_velocity"):
                kwargs[name] = [int(v) for v in values]
            elif name in ("is_downbeat", "interpolated"):
                kwargs[name] = [v == "1" for v in values]
            else:
                kwargs[name] = [float(v) for v in values]
        return cls(time_signatures=sigs, **kwargs)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.loads(fh.read())


def bar_start_positions(time_signatures, n_bars):
    """Global whole-note offset of each bar start, plus one trailing edge."""
    sigs = sorted(time_signatures, key=lambda s: s.bar_index)
    lengths = np.empty(max(n_bars, 1))
    active = sigs[0]
    idx = 0
    for bar in range(max(n_bars, 1)):
        while idx + 1 < len(sigs) and sigs[idx + 1].bar_index <= bar:
            idx += 1
        active = sigs[idx]
        lengths[bar] = active.bar_length
    starts = np.concatenate([[0.0], np.cumsum(lengths)])
    return starts[:-1] if n_bars > 0 else starts


def _active_sig(time_signatures, bar):
    active = time_signatures[0]
    for sig in sorted(time_signatures, key=lambda s: s.bar_index):
        if sig.bar_index <= bar:
            active = sig
    return active


def _beat_indices(bar_index, position, time_signatures):
    """Global beat number per note given the active time signature."""
    n_bars = int(max(bar_index)) + 1 if len(bar_index) else 1
    beats_before = np.zeros(n_bars, dtype=np.int64)
    total = 0
    for bar in range(n_bars):
        sig = _active_sig(time_signatures, bar)
        beats_before[bar] = total
        total += sig.numerator
    out = np.empty(len(bar_index), dtype=np.int64)
    for i, (bar, pos) in enumerate(zip(bar_index, position)):
        sig = _active_sig(time_signatures, int(bar))
        beat = int(np.floor(pos / sig.beat_length + 1e-9))
        beat = min(beat, sig.numerator - 1)
        out[i] = beats_before[int(bar)] + beat
    return out


def local_beat_tempo(score_onset, perf_onset, nominal_bpm):
    """Raw local tempo (quarter BPM) per note from onset-to-onset motion."""
    n = len(score_onset)
    out = np.full(n, float(np.atleast_1d(nominal_bpm)[0]))
    last_value = out[0] if n else 120.0
    i = 0
    prev_s = prev_t = None
    while i < n:
        j = i
        while j < n and score_onset[j] == score_onset[i]:
            j += 1
        if prev_s is not None:
            ds = score_onset[i] - prev_s
            dt = perf_onset[i] - prev_t
            if ds > 0 and dt > 1e-6:
                last_value = ds * 240.0 / dt
        out[i:j] = last_value
        prev_s, prev_t = score_onset[i], perf_onset[i]
        i = j
    return out


def encode_sequence(pairs, time_signatures=None, tempo_bpm=120.0, dynamic_level=64):
    """Build an AlignedSequence from matched score/performance note pairs.

    Pairs are sorted by score time and pitch; every pair must carry a
    performance note (run clean_alignment first if some are missing).
    `tempo_bpm` and `dynamic_level` hold the direction-marking tempo and
    dynamics used as score control values, scalar or per note.
    """
    pairs = [p if isinstance(p, NotePair) else NotePair(*p) for p in pairs]
    if any(p.perf is None for p in pairs):
        raise ValidationError("unmatched score notes present; run clean_alignment first")
    sigs = list(time_signatures) if time_signatures else [TimeSig(0, 4, 4)]
    interp_flags = [getattr(p, "_interp", False) for p in pairs]

    order = sorted(
        range(len(pairs)),
        key=lambda i: (pairs[i].score.bar_index, pairs[i].score.position, pairs[i].score.pitch),
    )
    pairs = [pairs[i] for i in order]
    interp_flags = [interp_flags[i] for i in order]
    n = len(pairs)

    pitch = np.array([p.score.pitch for p in pairs], dtype=np.int64)
    if n and (pitch.min() < PITCH_MIN or pitch.max() > PITCH_MAX):
        raise RangeError(f"pitch outside [{PITCH_MIN}, {PITCH_MAX}]")
    bar_index = np.array([p.score.bar_index for p in pairs], dtype=np.int64)
    position = np.array([p.score.position for p in pairs], dtype=np.float64)
    duration = np.array([p.score.duration for p in pairs], dtype=np.float64)

    starts = bar_start_positions(sigs, int(bar_index.max()) + 1 if n else 1)
    onset_score = starts[bar_index] + position if n else np.zeros(0)

    position_shift = np.zeros(n)
    for i in range(1, n):
        gap = onset_score[i] - onset_score[i - 1]
        position_shift[i] = gap if gap > 1e-9 else 0.0

    onset_perf = np.array([p.perf.onset_s for p in pairs], dtype=np.float64)
    time_shift = np.zeros(n)
    time_shift[1:] = np.diff(onset_perf)
    time_duration = np.array([p.perf.offset_s - p.perf.onset_s for p in pairs], dtype=np.float64)
    sustain = np.array([p.perf.sustain_offset_s - p.perf.onset_s for p in pairs], dtype=np.float64)
    sustain = np.maximum(sustain, time_duration)
    velocity = np.array([p.perf.velocity for p in pairs], dtype=np.int64)

    tempo = np.broadcast_to(np.asarray(tempo_bpm, dtype=np.float64), (n,)).copy()
    dyn = np.broadcast_to(np.asarray(dynamic_level, dtype=np.int64), (n,)).copy()
    beat_tempo = local_beat_tempo(onset_score, onset_perf, tempo) if n else np.zeros(0)

    return AlignedSequence(
        pitch=pitch,
        position=position,
        position_shift=position_shift,
        duration=duration,
        bar_index=bar_index,
        is_downbeat=position < 1e-9,
        beat_index=_beat_indices(bar_index, position, sigs),
        velocity=velocity,
        time_shift=time_shift,
        time_duration=time_duration,
        time_duration_sustain=sustain,
        interpolated=interp_flags,
        score_tempo_bpm=tempo,
        score_velocity=dyn,
        beat_tempo_bpm=beat_tempo,
        time_signatures=sigs,
    )


def normalize(seq: AlignedSequence):
    """Real-valued model features: score (n, 4) and performance (n, 4).

    Pitch and velocity map to [0, 1]; positions and durations stay in
    whole-note fractions; performance timing stays in seconds.
    """
    y = np.stack(
        [
            (seq.pitch - PITCH_MIN) / (PITCH_MAX - PITCH_MIN),
            seq.position,
            seq.position_shift,
            seq.duration,
        ],
        axis=1,
    )
    x = np.stack(
        [
            seq.velocity / 127.0,
            seq.time_shift,
            seq.time_duration,
            seq.time_duration_sustain,
        ],
        axis=1,
    )
    return y, x


def denormalize(y, x):
    """Invert normalize() back to integer pitches/velocities and seconds.

    Out-of-range pitch/velocity entries are clamped with a warning.
    Returns (score_fields, perf_fields) dicts of arrays.
    """
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    pitch_unit = y[:, 0]
    vel_unit = x[:, 0]
    if ((pitch_unit < -1e-9) | (pitch_unit > 1 + 1e-9)).any() or ((vel_unit < -1e-9) | (vel_unit > 1 + 1e-9)).any():
        warnings.warn("normalized pitch/velocity outside [0, 1]; clamping", stacklevel=2)
    pitch = np.clip(np.rint(pitch_unit * (PITCH_MAX - PITCH_MIN)) + PITCH_MIN, PITCH_MIN, PITCH_MAX).astype(np.int64)
    velocity = np.clip(np.rint(vel_unit * 127.0), 0, 127).astype(np.int64)
    dur = np.maximum(x[:, 2], 0.0)
    score_fields = {
        "pitch": pitch,
        "position": y[:, 1].copy(),
        "position_shift": y[:, 2].copy(),
        "duration": y[:, 3].copy(),
    }
    perf_fields = {
        "velocity": velocity,
        "time_shift": x[:, 1].copy(),
        "time_duration": dur,
        "time_duration_sustain": np.maximum(x[:, 3], dur),
    }
    return score_fields, perf_fields


# -- alignment cleanup ---------------------------------------------------------


@dataclass
class CleanupReport:
    interpolated: int = 0
    dropped: list = field(default_factory=list)  # (bar_index, pitch, reason)


def clean_alignment(pairs, time_signatures=None, tempo_bpm=120.0, dynamic_level=64):
    """Fill unperformed score notes from neighboring matched notes.

    Each missing note gets an onset interpolated at the local tempo
    between surrounding matched onsets, the mean velocity of matched
    notes in its bar, and its notated duration scaled by the local tempo.
    Notes in bars with no matched notes cannot be filled and are dropped
    with a report entry. Returns (sequence, report).
    """
    pairs = [p if isinstance(p, NotePair) else NotePair(*p) for p in pairs]
    sigs = list(time_signatures) if time_signatures else [TimeSig(0, 4, 4)]
    report = CleanupReport()

    order = sorted(
        range(len(pairs)),
        key=lambda i: (pairs[i].score.bar_index, pairs[i].score.position, pairs[i].score.pitch),
    )
    pairs = [pairs[i] for i in order]
    n = len(pairs)
    bar_index = np.array([p.score.bar_index for p in pairs], dtype=np.int64)
    starts = bar_start_positions(sigs, int(bar_index.max()) + 1 if n else 1)
    onset_score = np.array([starts[p.score.bar_index] + p.score.position for p in pairs])

    matched = [i for i, p in enumerate(pairs) if p.perf is not None]
    nominal_spw = 240.0 / float(np.atleast_1d(tempo_bpm)[0])  # seconds per whole note

    def local_spw(a, b):
        if a is not None and b is not None and onset_score[b] > onset_score[a]:
            return (pairs[b].perf.onset_s - pairs[a].perf.onset_s) / (onset_score[b] - onset_score[a])
        return nominal_spw

    bar_vel = {}
    for i in matched:
        bar_vel.setdefault(int(bar_index[i]), []).append(pairs[i].perf.velocity)

    out_pairs = []
    flags = []
    m_pos = 0  # index into `matched` of the first matched note at/after i
    for i, p in enumerate(pairs):
        while m_pos < len(matched) and matched[m_pos] < i:
            m_pos += 1
        if p.perf is not None:
            out_pairs.append(p)
            flags.append(False)
            continue
        bar = int(bar_index[i])
        if bar not in bar_vel:
            report.dropped.append((bar, p.score.pitch, "no matched notes in bar"))
            continue
        prev_m = matched[m_pos - 1] if m_pos > 0 else None
        next_m = matched[m_pos] if m_pos < len(matched) else None
        chord = None
        for m in (prev_m, next_m):
            if m is not None and onset_score[m] == onset_score[i]:
                chord = m
        if chord is not None:
            onset = pairs[chord].perf.onset_s
            spw = local_spw(prev_m, next_m)
        elif prev_m is not None and next_m is not None:
            spw = local_spw(prev_m, next_m)
            onset = pairs[prev_m].perf.onset_s + (onset_score[i] - onset_score[prev_m]) * spw
        elif prev_m is not None:
            prev2 = matched[m_pos - 2] if m_pos > 1 else None
            spw = local_spw(prev2, prev_m)
            onset = pairs[prev_m].perf.onset_s + (onset_score[i] - onset_score[prev_m]) * spw
        elif next_m is not None:
            next2 = matched[m_pos + 1] if m_pos + 1 < len(matched) else None
            spw = local_spw(next_m, next2)
            onset = pairs[next_m].perf.onset_s - (onset_score[next_m] - onset_score[i]) * spw
        else:
            report.dropped.append((bar, p.score.pitch, "no matched notes in sequence"))
            continue
        velocity = int(round(float(np.mean(bar_vel[bar]))))
        dur = max(p.score.duration * spw, 1e-3)
        out_pairs.append(NotePair(p.score, PerfEvent(velocity, onset, onset + dur)))
        flags.append(True)
        report.interpolated += 1

    for pair, flag in zip(out_pairs, flags):
        pair._interp = flag
    seq = encode_sequence(out_pairs, sigs, tempo_bpm=tempo_bpm, dynamic_level=dynamic_level)
    return seq, report


# -- tokenizer ------------------------------------------------------------------

PAD_ID = 0
BOUNDARY_ID = 1  # shared SOS/EOS
MASK_ID = 2
N_SPECIALS = 3
SPECIAL_NAMES = {PAD_ID: "PAD", BOUNDARY_ID: "SOS/EOS", MASK_ID: "MASK"}


@dataclass
class FeatureTable:
    """One feature's quantization grid.

    `values` are the representable points used to place bin edges; decode
    returns bin centers, so the roundtrip error is at most half the local
    bin width by construction. `scale` converts feature units to grid
    units before binning (whole-note fractions are binned in 96ths).
    """

    name: str
    kind: str  # int | uniform | adaptive96 | logbpm | adaptivesec
    minimum: float
    maximum: float
    token_count: int
    scale: float = 1.0
    values: np.ndarray = field(default=None, repr=False)
    edges: np.ndarray = field(default=None, repr=False)
    centers: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.values = _build_grid(self.kind, self.minimum, self.maximum, self.token_count - N_SPECIALS)
        if len(self.values) != self.token_count - N_SPECIALS:
            raise ValidationError(
                f"{self.name}: grid produced {len(self.values) + N_SPECIALS} tokens, expected {self.token_count}"
            )
        mids = (self.values[:-1] + self.values[1:]) / 2.0
        first = self.values[0] - (self.values[1] - self.values[0]) / 2.0
        last = self.values[-1] + (self.values[-1] - self.values[-2]) / 2.0
        self.edges = np.concatenate([[first], mids, [last]])
        self.centers = (self.edges[:-1] + self.edges[1:]) / 2.0

    @property
    def n_bins(self):
        return len(self.values)

    def tokenize(self, values, return_clamped=False):
        v = np.asarray(values, dtype=np.float64) * self.scale
        clamped = int(((v < self.values[0]) | (v > self.values[-1])).sum())
        v = np.clip(v, self.values[0], self.values[-1])
        ids = np.searchsorted(self.edges[1:-1], v, side="left") + N_SPECIALS
        if return_clamped:
            return ids, clamped
        return ids

    def detokenize(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ((ids < 0) | (ids >= self.token_count)).any():
            bad = ids[(ids < 0) | (ids >= self.token_count)][0]
            raise DecodeError(f"{self.name}: token id {bad} outside vocabulary of {self.token_count}")
        if (ids < N_SPECIALS).any():
            bad = int(ids[ids < N_SPECIALS][0])
            raise DecodeError(f"{self.name}: id {bad} is the special token {SPECIAL_NAMES[bad]}, not a value")
        return self.centers[ids - N_SPECIALS] / self.scale


def _build_grid(kind, minimum, maximum, n_values):
    if kind == "int":
        values = np.arange(int(minimum), int(maximum) + 1, dtype=np.float64)
    elif kind == "uniform":
        values = np.arange(int(minimum), int(maximum) + 1, dtype=np.float64)
    elif kind == "adaptive96":
        # Single-unit steps to one whole note, eighth-note steps to four
        # whole notes, whole-bar steps beyond.
        values = np.concatenate(
            [
                np.arange(0, 97),
                np.arange(108, 373, 12),
                np.arange(384, int(maximum) + 1, 96),
            ]
        ).astype(np.float64)
    elif kind == "logbpm":
        values = np.geomspace(minimum, maximum, n_values)
    elif kind == "adaptivesec":
        parts = []
        if minimum < 0:
            n_neg = int(round(-minimum / 0.01))
            parts.append(np.linspace(minimum, -0.01, n_neg))
        mid = np.linspace(1.0, 2.975, 80)
        coarse = np.linspace(3.0, maximum, int(round((maximum - 3.0) / 0.1)) + 1)
        n_first = n_values - sum(len(p) for p in parts) - len(mid) - len(coarse)
        if n_first <= 0:
            raise ValidationError(f"adaptivesec grid cannot fit {n_values} values")
        parts.append(np.linspace(0.0, 1.0, n_first, endpoint=False))
        parts.append(mid)
        parts.append(coarse)
        values = np.concatenate(parts)
    else:
        raise ValidationError(f"unknown grid kind {kind!r}")
    return values


# Published vocabulary: (kind, min, max, token count, unit scale).
DEFAULT_FEATURES = (
    ("Pitch", "int", PITCH_MIN, PITCH_MAX, 91, 1.0),
    ("Position", "uniform", 0, 192, 196, WHOLE_UNITS),
    ("PositionShift", "adaptive96", 0, 1536, 136, WHOLE_UNITS),
    ("Duration", "adaptive96", 0, 1536, 136, WHOLE_UNITS),
    ("Tempo", "logbpm", 15.0, 480.0, 164, 1.0),
    ("ScoreVelocity", "int", 0, 127, 131, 1.0),
    ("Velocity", "int", 0, 127, 131, 1.0),
    ("TimeShift", "adaptivesec", -0.5, 10.0, 365, 1.0),
    ("TimeDuration", "adaptivesec", 0.0, 10.0, 313, 1.0),
    ("TimeDurationSustain", "adaptivesec", 0.0, 10.0, 313, 1.0),
)


class Vocab:
    """The full token codec: one FeatureTable per feature plus specials."""

    def __init__(self, features=DEFAULT_FEATURES):
        self.tables = {}
        for name, kind, lo, hi, count, scale in features:
            self.tables[name] = FeatureTable(name, kind, lo, hi, count, scale)

    def __getitem__(self, name):
        return self.tables[name]

    def tokenize(self, values, feature, return_clamped=False):
        return self.tables[feature].tokenize(values, return_clamped)

    def detokenize(self, ids, feature):
        return self.tables[feature].detokenize(ids)

    def sizes(self):
        return {name: t.token_count for name, t in self.tables.items()}

    def dump_edges(self, directory):
        """One file per feature, one bin edge per line (in grid units)."""
        import os

        os.makedirs(directory, exist_ok=True)
        for name, t in self.tables.items():
            with open(os.path.join(directory, f"{name}.edges"), "w") as fh:
                for e in t.edges:
                    fh.write(repr(float(e)) + "\n")

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(TOKENIZER_MAGIC + "\n")
            fh.write("# feature resolution min max tokens scale\n")
            for t in self.tables.values():
                fh.write(f"{t.name} {t.kind} {t.minimum:g} {t.maximum:g} {t.token_count} {t.scale:g}\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines or lines[0] != TOKENIZER_MAGIC:
            raise ParseError(f"missing {TOKENIZER_MAGIC} header")
        features = []
        for line in lines[1:]:
            if line.startswith("#"):
                continue
            name, kind, lo, hi, count, scale = line.split()
            features.append((name, kind, float(lo), float(hi), int(count), float(scale)))
        return cls(features)


def default_tokenizer():
    return Vocab()


def tokenize_sequence(seq: AlignedSequence, vocab: Vocab):
    """Token ids per feature for a full sequence, as a dict of arrays."""
    return {
        "Pitch": vocab.tokenize(seq.pitch, "Pitch"),
        "Position": vocab.tokenize(seq.position, "Position"),
        "PositionShift": vocab.tokenize(seq.position_shift, "PositionShift"),
        "Duration": vocab.tokenize(seq.duration, "Duration"),
        "Velocity": vocab.tokenize(seq.velocity, "Velocity"),
        "TimeShift": vocab.tokenize(seq.time_shift, "TimeShift"),
        "TimeDuration": vocab.tokenize(seq.time_duration, "TimeDuration"),
        "TimeDurationSustain": vocab.tokenize(seq.time_duration_sustain, "TimeDurationSustain"),
    }
