"""Control inputs: score direction tokens, local tempo tokens, text embeddings.

Three channels condition the renderer: per-note tempo/velocity tokens
from score direction markings, per-onset local performance tempo
tokens, and a per-bar text embedding (emotion-probability-weighted rows
of a precomputed embedding table). The text encoder itself is external;
this module owns the mixing math, channel dropout, and the file formats
for embeddings and inference prompts.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .codec import AlignedSequence, Vocab, _active_sig
from .errors import ParseError, ValidationError

EMB_MAGIC = "SYMUPE-EMB v1"
TEXT_EMB_DIM = 768
CFG_DROP_PROB = 0.2

EMOTION_LABELS = (
    "anger", "anxious", "calm", "capricious", "comical", "decisive",
    "depressed", "dreamy", "elegant", "enthusiastic", "fierce", "gentle",
    "happy", "harsh", "heavy", "impetuous", "important", "kind",
    "longing", "marching", "melancholic", "melodious", "mysterious",
    "nostalgia", "passionately", "rapidly", "reflective", "religious",
    "sad", "sincere", "sleepy", "solemn", "triumphantly",
)

TEXT_TEMPLATES = (
    "{}",
    "{} emotion",
    "{} music",
    "{} music performance",
    "{} music emotion",
    "Musical mood: {}",
    "Play music in a {} mood",
    "Perform music in a {} mood",
    "Play {} music",
    "Perform {} music",
    "Music described as {}",
    "Described as {}",
    "Music classified as {}",
    "Classified as {}",
    "Music performance with a {} emotion",
    "Music performed {}",
)


def format_templates(label):
    """All template sentences for one emotion label."""
    return [t.format(label) for t in TEXT_TEMPLATES]


class EmotionTable:
    """Label-indexed embedding matrix, one template-averaged row per label."""

    def __init__(self, labels, matrix):
        self.labels = list(labels)
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.labels):
            raise ValidationError(f"matrix shape {self.matrix.shape} does not match {len(self.labels)} labels")
        if not np.isfinite(self.matrix).all():
            raise ValidationError("embedding matrix contains non-finite values")
        self._index = {label: i for i, label in enumerate(self.labels)}

    @property
    def dim(self):
        return self.matrix.shape[1]

    def row(self, label):
        if label not in self._index:
            raise ValidationError(f"unknown emotion label {label!r}")
        return self.matrix[self._index[label]]

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(EMB_MAGIC + "\n")
            for label, row in zip(self.labels, self.matrix):
                fh.write(label + "\t" + " ".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0].strip() != EMB_MAGIC:
            raise ParseError(f"missing {EMB_MAGIC} header")
        labels, rows = [], []
        for line in lines[1:]:
            if not line.strip():
                continue
            label, _, rest = line.partition("\t")
            labels.append(label)
            rows.append([float(v) for v in rest.split()])
        return cls(labels, np.array(rows))


def pseudo_table(labels=EMOTION_LABELS, dim=TEXT_EMB_DIM, seed=7):
    """Deterministic stand-in embeddings for tests and offline demos.

    Rows are unit-scale Gaussian vectors; they carry no semantics beyond
    being distinct per label.
    """
    rng = np.random.default_rng(seed)
    return EmotionTable(labels, rng.normal(0.0, 1.0, size=(len(labels), dim)) / np.sqrt(dim))


def emotion_weighted_embedding(probs, table: EmotionTable):
    """Probability-weighted sum of emotion embedding rows."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.shape[0] != len(table.labels):
        raise ValidationError(f"expected {len(table.labels)} probabilities, got shape {probs.shape}")
    if (probs < 0).any():
        raise ValidationError("emotion probabilities must be non-negative")
    if abs(probs.sum() - 1.0) > 1e-6:
        raise ValidationError(f"emotion probabilities sum to {probs.sum():.8f}, expected 1")
    return probs @ table.matrix


@dataclass
class ControlInputs:
    """Per-note control channels plus their whole-sequence drop flags.

    Arrays are (n,) for a single sequence or (B, n) once batched;
    text_emb gains a trailing embedding axis. Rows of text_emb are
    constant within a bar.
    """

    score_tempo: np.ndarray
    score_velocity: np.ndarray
    perf_tempo: np.ndarray
    text_emb: np.ndarray
    drop_score: bool | np.ndarray = False
    drop_perf_tempo: bool | np.ndarray = False
    drop_text: bool | np.ndarray = False

    def slice(self, start, stop):
        return replace(
            self,
            score_tempo=self.score_tempo[..., start:stop],
            score_velocity=self.score_velocity[..., start:stop],
            perf_tempo=self.perf_tempo[..., start:stop],
            text_emb=self.text_emb[..., start:stop, :],
            )

    def batched(self):
        """View with a leading batch axis of 1."""
        return ControlInputs(
            score_tempo=np.asarray(self.score_tempo)[None],
            score_velocity=np.asarray(self.score_velocity)[None],
            perf_tempo=np.asarray(self.perf_tempo)[None],
            text_emb=np.asarray(self.text_emb)[None],
            drop_score=np.asarray([self.drop_score]),
            drop_perf_tempo=np.asarray([self.drop_perf_tempo]),
            drop_text=np.asarray([self.drop_text]),
        )


def stack_controls(controls):
    """Stack equal-length per-sequence controls into one batched object."""
    return ControlInputs(
        score_tempo=np.stack([c.score_tempo for c in controls]),
        score_velocity=np.stack([c.score_velocity for c in controls]),
        perf_tempo=np.stack([c.perf_tempo for c in controls]),
        text_emb=np.stack([c.text_emb for c in controls]),
        drop_score=np.array([bool(c.drop_score) for c in controls]),
        drop_perf_tempo=np.array([bool(c.drop_perf_tempo) for c in controls]),
        drop_text=np.array([bool(c.drop_text) for c in controls]),
    )


def cfg_dropout(inputs: ControlInputs, rng, p_drop=CFG_DROP_PROB):
    """Independently drop each control channel with probability p_drop.

    Dropping flips the whole-sequence flag; embedding values are never
    touched. Works on single or batched controls.
    """
    shape = np.asarray(inputs.drop_score).shape

    def draw(old):
        hit = rng.random(shape) < p_drop if shape else rng.random() < p_drop
        return np.asarray(old, dtype=bool) | hit

    return replace(
        inputs,
        drop_score=draw(inputs.drop_score),
        drop_perf_tempo=draw(inputs.drop_perf_tempo),
        drop_text=draw(inputs.drop_text),
    )


def assemble_control(inputs: ControlInputs, params):
    """Embed, null-substitute, concatenate and project the channels.

    `params` is the model's control block (owns the embedding tables and
    the output projection). Input arrays must be batched.
    """
    tempo = np.asarray(inputs.score_tempo)
    if tempo.ndim != 2:
        raise ValidationError("assemble_control expects batched controls; call .batched() first")
    b, n = tempo.shape
    return params.assemble(inputs, b, n)


def beat_tempo_tokens(seq: AlignedSequence, vocab: Vocab, nominal_bpm=None):
    """Per-note local-tempo tokens (beats per minute, smoothed over a beat).

    The raw tempo between consecutive score onsets is the score gap in
    beats divided by the performed gap in seconds; values are averaged
    over onsets within half a beat of each onset and tokenized with the
    Tempo table. A single-onset sequence falls back to the score's
    nominal tempo.
    """
    n = len(seq)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if nominal_bpm is None:
        nominal_bpm = seq.score_tempo_bpm
    nominal_bpm = np.broadcast_to(np.asarray(nominal_bpm, dtype=np.float64), (n,))

    score_onset = seq.score_onset
    perf_onset = seq.perf_onsets()
    starts = np.unique(score_onset, return_index=True)[1]
    onsets_s = score_onset[starts]
    onsets_t = perf_onset[starts]
    beat_len = np.array([_active_sig(seq.time_signatures, int(seq.bar_index[i])).beat_length for i in starts])

    m = len(starts)
    raw = np.empty(m)
    for j in range(m):
        if j == 0:
            raw[j] = nominal_bpm[starts[j]]
            continue
        ds = (onsets_s[j] - onsets_s[j - 1]) / beat_len[j]
        dt = onsets_t[j] - onsets_t[j - 1]
        raw[j] = ds / dt * 60.0 if dt > 1e-6 else raw[j - 1]
    if m > 1:
        raw[0] = raw[1]  # no left gap at the first onset

    smoothed = np.empty(m)
    for j in range(m):
        half = beat_len[j] / 2.0
        win = np.abs(onsets_s - onsets_s[j]) <= half + 1e-9
        smoothed[j] = raw[win].mean()

    per_note = np.empty(n)
    bounds = np.append(starts, n)
    for j in range(m):
        per_note[bounds[j] : bounds[j + 1]] = smoothed[j]
    return vocab.tokenize(per_note, "Tempo")


def score_control_tokens(seq: AlignedSequence, vocab: Vocab):
    """(tempo token, velocity token) per note from direction markings."""
    return vocab.tokenize(seq.score_tempo_bpm, "Tempo"), vocab.tokenize(seq.score_velocity, "ScoreVelocity")


def build_controls(seq: AlignedSequence, vocab: Vocab, text_emb=None, tempo_scale=1.0, text_dim=TEXT_EMB_DIM):
    """Full ControlInputs for one sequence.

    `text_emb` is (n, dim) or None (filled with zeros and flagged as
    dropped). `tempo_scale` multiplies the performance tempo targets,
    letting inference ask for faster/slower renditions.
    """
    n = len(seq)
    st, sv = score_control_tokens(seq, vocab)
    raw_bpm = vocab.detokenize(beat_tempo_tokens(seq, vocab), "Tempo")
    pt = vocab.tokenize(raw_bpm * tempo_scale, "Tempo")
    drop_text = text_emb is None
    if text_emb is None:
        text_emb = np.zeros((n, text_dim))
    return ControlInputs(
        score_tempo=st,
        score_velocity=sv,
        perf_tempo=pt,
        text_emb=np.asarray(text_emb, dtype=np.float64),
        drop_text=drop_text,
    )


# -- prompt files ----------------------------------------------------------------


def parse_prompt_file(path, table: EmotionTable):
    """`bar_start bar_end label_or_inline_vector` lines to (ranges, rows)."""
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 3:
                raise ParseError(f"prompt line {lineno}: expected 'bar_start bar_end label_or_vector'")
            start, end = int(parts[0]), int(parts[1])
            rest = parts[2:]
            if len(rest) == 1 and not _is_number(rest[0]):
                row = table.row(rest[0])
            else:
                row = np.array([float(v) for v in rest])
                if row.shape[0] != table.dim:
                    raise ParseError(f"prompt line {lineno}: inline vector has {row.shape[0]} values, expected {table.dim}")
            entries.append((start, end, row))
    return entries


def _is_number(token):
    try:
        float(token)
        return True
    except ValueError:
        return False


def prompt_text_embeddings(seq: AlignedSequence, entries, table: EmotionTable):
    """Per-note text embedding rows from bar-range prompt entries.

    Bars not covered by any entry receive the neutral mean of the table.
    Rows are constant within a bar.
    """
    neutral = table.matrix.mean(axis=0)
    out = np.tile(neutral, (len(seq), 1))
    bars = seq.bar_index
    for start, end, row in entries:
        out[(bars >= start) & (bars <= end)] = row
    return out
