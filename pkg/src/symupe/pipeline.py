"""Data augmentation, synthetic data generation, and the training loop.

The synthetic generator exists so the whole pipeline can be exercised
and overfit at desk scale: scores are diatonic lines with chords over a
bar grid, and performances follow score-determined velocity arcs and
tempo curves plus per-performance global factors and per-note jitter.
Two performances of the same synthetic piece correlate in their
dynamics and tempo curves without being identical, which is what the
objective metrics need to be meaningful.
"""

from __future__ import annotations

import dataclasses
import json
import os
import platform
import time
from dataclasses import dataclass

import numpy as np

from . import codec, conditioning, flowcore, maskgen
from .codec import AlignedSequence, NotePair, PerfEvent, ScoreEvent, TimeSig
from .errors import ValidationError
from .tensornet import AdamW, LrSchedule, ModelConfig, PianoFlow, checkpoint, train_step


@dataclass
class AugmentSpec:
    """One sampled augmentation; ranges follow the training recipe."""

    pitch_shift: int = 0  # semitones, [-6, 6]
    velocity_shift: int = 0  # MIDI bins, [-6, 6]
    tempo_factor: float = 1.0  # [0.95, 1.05]
    apply_prob: float = 0.5

    @classmethod
    def sample(cls, rng):
        return cls(
            pitch_shift=int(rng.integers(-6, 7)),
            velocity_shift=int(rng.integers(-6, 7)),
            tempo_factor=float(rng.uniform(0.95, 1.05)),
        )


def augment(seq: AlignedSequence, spec: AugmentSpec, rng) -> AlignedSequence:
    """Apply a pitch/velocity/tempo augmentation with probability apply_prob.

    The pitch shift is clamped to the largest magnitude that keeps every
    note on the piano; velocities re-clamp to [0, 127]; the tempo factor
    scales all timing features uniformly (and the local tempo estimate
    inversely). Sequence length and chord structure are untouched.
    """
    if rng.random() >= spec.apply_prob:
        return seq.copy()
    out = seq.copy()
    if len(out) == 0:
        return out
    shift = int(np.clip(spec.pitch_shift, codec.PITCH_MIN - out.pitch.min(), codec.PITCH_MAX - out.pitch.max()))
    out.pitch = out.pitch + shift
    out.velocity = np.clip(out.velocity + spec.velocity_shift, 0, 127)
    f = spec.tempo_factor
    out.time_shift = out.time_shift * f
    out.time_duration = out.time_duration * f
    out.time_duration_sustain = out.time_duration_sustain * f
    out.beat_tempo_bpm = out.beat_tempo_bpm / f
    return out


# -- synthetic data ---------------------------------------------------------------

C_MAJOR = np.array([0, 2, 4, 5, 7, 9, 11])


@dataclass
class SynthStyle:
    bars_min: int = 8
    bars_max: int = 16
    tempo_min: float = 80.0
    tempo_max: float = 140.0
    base_velocity: float = 64.0
    base_velocity_sd: float = 4.0  # per-performance dynamic offset
    bar_arc_amp: float = 15.0  # within-bar velocity arc, MIDI units
    pitch_follow: float = 6.0  # velocity per octave above the piece mean
    velocity_noise: float = 7.0
    tempo_curve_amp: float = 0.10  # within-bar tempo modulation
    onset_tempo_noise: float = 0.035
    global_tempo_sd: float = 0.04
    onset_jitter_s: float = 0.004
    chord_spread_s: float = 0.006
    articulation_base: float = 0.85
    articulation_noise: float = 0.05
    pedal_bar_prob: float = 0.35


@dataclass
class SynthScore:
    events: list  # ScoreEvent, sorted
    time_signatures: list
    tempo_bpm: float
    dynamic_level: int


def synth_score(rng, style: SynthStyle = SynthStyle()) -> SynthScore:
    """A random diatonic piece: an eighth/quarter melody plus chords."""
    n_bars = int(rng.integers(style.bars_min, style.bars_max + 1))
    tempo = float(rng.uniform(style.tempo_min, style.tempo_max))
    base = int(rng.integers(57, 70))  # melody register root
    degree = int(rng.integers(0, 7))
    events = []
    for bar in range(n_bars):
        pos = 0.0
        while pos < 1.0 - 1e-9:
            dur = 0.125 if rng.random() < 0.6 else 0.25
            dur = min(dur, 1.0 - pos)
            degree += int(rng.integers(-2, 3))
            degree = int(np.clip(degree, -3, 9))
            pitch = base + 12 * (degree // 7) + C_MAJOR[degree % 7]
            pitch = int(np.clip(pitch, codec.PITCH_MIN, codec.PITCH_MAX))
            events.append(ScoreEvent(pitch, bar, round(pos * 96) / 96, dur))
            pos += dur
        for beat in (0.0, 0.5):  # chords on beats 1 and 3
            root = base - 24 + C_MAJOR[int(rng.integers(0, 7))]
            for interval in (0, 7):
                pitch = int(np.clip(root + interval, codec.PITCH_MIN, codec.PITCH_MAX))
                events.append(ScoreEvent(pitch, bar, beat, 0.25))
    return SynthScore(
        events=events,
        time_signatures=[TimeSig(0, 4, 4)],
        tempo_bpm=tempo,
        dynamic_level=int(np.clip(style.base_velocity, 0, 127)),
    )


def synth_performance(score: SynthScore, rng, style: SynthStyle = SynthStyle()) -> AlignedSequence:
    """One expressive rendition of a synthetic score.

    Velocity follows a within-bar arc plus pitch; timing follows a
    within-bar tempo curve with a final ritardando. Both shapes are
    functions of the score alone (amplitudes and noise vary per
    rendition), so they are learnable and different renditions stay
    correlated without being identical.
    """
    events = sorted(score.events, key=lambda e: (e.bar_index, e.position, e.pitch))
    spw = 240.0 / score.tempo_bpm  # nominal seconds per whole note
    g = float(np.exp(rng.normal(0.0, style.global_tempo_sd)))
    vel_base = style.base_velocity + float(rng.normal(0.0, style.base_velocity_sd))
    arc_amp = style.bar_arc_amp * float(rng.uniform(0.75, 1.25))
    tempo_amp = style.tempo_curve_amp * float(rng.uniform(0.8, 1.2))
    art_base = style.articulation_base * float(rng.uniform(0.92, 1.08))
    mean_pitch = float(np.mean([e.pitch for e in events]))
    n_bars = max(e.bar_index for e in events) + 1

    def tempo_mult(bar, pos):
        m = 1.0 + tempo_amp * np.sin(2 * np.pi * pos)
        if bar == n_bars - 1:  # final ritardando
            m *= 1.0 + 0.6 * pos
        return m

    pedal_bars = {b for b in range(n_bars) if rng.random() < style.pedal_bar_prob}

    # Integrate the tempo curve over distinct onsets.
    onsets = sorted({(e.bar_index, e.position) for e in events})
    onset_time = {}
    t = 0.0
    prev = None
    for bar, pos in onsets:
        if prev is not None:
            gap = (bar + pos) - (prev[0] + prev[1])
            t += gap * spw * g * tempo_mult(*prev) * float(np.exp(rng.normal(0.0, style.onset_tempo_noise)))
        onset_time[(bar, pos)] = t
        prev = (bar, pos)

    pairs = []
    chord_rank = {}
    for e in events:
        key = (e.bar_index, e.position)
        rank = chord_rank.get(key, 0)
        chord_rank[key] = rank + 1
        onset = onset_time[key]
        onset += rank * style.chord_spread_s * float(rng.uniform(0.3, 1.0))
        onset += float(rng.normal(0.0, style.onset_jitter_s))
        onset = max(onset, 0.0)

        vel = vel_base
        vel += arc_amp * np.sin(2 * np.pi * e.position)
        vel += style.pitch_follow * (e.pitch - mean_pitch) / 12.0
        vel += 6.0 if e.position == 0.0 else 0.0
        vel += float(rng.normal(0.0, style.velocity_noise))
        vel = int(np.clip(round(vel), 1, 127))

        dur = e.duration * spw * g * max(art_base + float(rng.normal(0.0, style.articulation_noise)), 0.2)
        sustain_offset = None
        if e.bar_index in pedal_bars:
            bar_end = onset_time.get((e.bar_index + 1, 0.0))
            if bar_end is not None and bar_end > onset + dur:
                sustain_offset = bar_end
        pairs.append(NotePair(ScoreEvent(e.pitch, e.bar_index, e.position, e.duration), PerfEvent(vel, onset, onset + dur, sustain_offset)))

    return codec.encode_sequence(
        pairs,
        score.time_signatures,
        tempo_bpm=score.tempo_bpm,
        dynamic_level=score.dynamic_level,
    )


def synth_dataset(n_pieces, rng, style: SynthStyle = SynthStyle(), perfs_per_piece=1):
    """Aligned sequences for n_pieces synthetic pieces.

    Returns a list of (piece_name, AlignedSequence); pieces with several
    performances share the piece name.
    """
    out = []
    for i in range(n_pieces):
        score = synth_score(rng, style)
        for j in range(perfs_per_piece):
            out.append((f"piece{i:04d}", synth_performance(score, rng, style)))
    return out


# -- training -------------------------------------------------------------------


@dataclass
class RunConfig:
    seed: int = 0
    # model
    layers: int = 2
    dim: int = 64
    heads: int = 4
    ff_hidden: int = 192
    feat_emb_dim: int = 16
    time_emb_dim: int = 16
    text_emb_dim: int = 768
    use_control: bool = False
    # data
    data_dir: str = ""
    synth_pieces: int = 50
    max_seq_len: int = 64
    chunk_overlap: int = 32
    augment_prob: float = 0.5
    # optimization
    batch_size: int = 16
    total_steps: int = 2000
    warmup_steps: int = 1000
    lr_initial: float = 2e-4
    lr_final: float = 1e-4
    weight_decay: float = 1e-2
    sigma_min: float = flowcore.DEFAULT_SIGMA_MIN
    mask_ratio_min: float = 0.1
    mask_ratio_max: float = 0.9
    cfg_drop: float = 0.2
    # bookkeeping
    out_dir: str = "run"
    save_every: int = 1000
    log_every: int = 50

    def model_config(self):
        return ModelConfig(
            layers=self.layers,
            dim=self.dim,
            heads=self.heads,
            ff_dims=(self.dim, self.ff_hidden),
            feat_emb_dim=self.feat_emb_dim,
            time_emb_dim=self.time_emb_dim,
            text_emb_dim=self.text_emb_dim,
            use_control=self.use_control,
            max_seq_len=self.max_seq_len,
        )

    def to_file(self, path):
        with open(path, "w") as fh:
            for f in dataclasses.fields(self):
                fh.write(f"{f.name} = {getattr(self, f.name)}\n")

    @classmethod
    def from_file(cls, path):
        values = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, raw = line.partition("=")
                values[key.strip()] = raw.strip()
        return cls.from_overrides(values)

    @classmethod
    def from_overrides(cls, values, base=None):
        kwargs = dataclasses.asdict(base) if base else {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in fields:
                raise ValidationError(f"unknown config key {key!r}")
            ftype = fields[key].type
            if ftype in ("int", int):
                kwargs[key] = int(raw)
            elif ftype in ("float", float):
                kwargs[key] = float(raw)
            elif ftype in ("bool", bool):
                kwargs[key] = raw if isinstance(raw, bool) else raw.lower() in ("1", "true", "yes")
            else:
                kwargs[key] = raw
        cfg = cls(**kwargs)
        if cfg.data_dir and not os.path.isdir(cfg.data_dir):
            raise ValidationError(f"data_dir {cfg.data_dir!r} does not exist")
        return cfg


def load_dataset(config: RunConfig, rng):
    """Sequences from align files, or synthetic ones when no data_dir."""
    if config.data_dir:
        seqs = []
        for name in sorted(os.listdir(config.data_dir)):
            if name.endswith(".align"):
                seqs.append(AlignedSequence.load(os.path.join(config.data_dir, name)))
        if not seqs:
            raise ValidationError(f"no .align files in {config.data_dir!r}")
        return seqs
    return [seq for _, seq in synth_dataset(config.synth_pieces, rng)]


def chunk_sequences(seqs, max_len, overlap):
    """Fixed-length training windows; pieces shorter than max_len are skipped."""
    chunks = []
    skipped = 0
    step = max(1, max_len - overlap)
    for seq in seqs:
        n = len(seq)
        if n < max_len:
            skipped += 1
            continue
        starts = list(range(0, n - max_len + 1, step))
        if starts[-1] != n - max_len:
            starts.append(n - max_len)
        for s in starts:
            chunks.append(seq.subsequence(s, s + max_len))
    return chunks, skipped


@dataclass
class TrainResult:
    model: PianoFlow
    losses: list
    checkpoint_path: str
    aborted: bool = False


def train(config: RunConfig) -> TrainResult:
    """Run the multi-mask flow-matching training loop.

    Writes the resolved config, tokenizer bin edges, a loss log and an
    environment fingerprint into the run directory; checkpoints
    periodically and at the end. A non-finite loss aborts, keeping the
    last good checkpoint.
    """
    os.makedirs(config.out_dir, exist_ok=True)
    config.to_file(os.path.join(config.out_dir, "config.txt"))
    vocab = codec.default_tokenizer()
    vocab.dump_edges(os.path.join(config.out_dir, "bin_edges"))
    vocab.save(os.path.join(config.out_dir, "tokenizer.txt"))
    with open(os.path.join(config.out_dir, "environment.json"), "w") as fh:
        json.dump(
            {
                "python": platform.python_version(),
                "numpy": np.__version__,
                "platform": platform.platform(),
                "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
            },
            fh,
            indent=2,
        )

    root = np.random.SeedSequence(config.seed)
    data_rng, loop_rng = (np.random.default_rng(s) for s in root.spawn(2))
    seqs = load_dataset(config, data_rng)
    chunks, skipped = chunk_sequences(seqs, config.max_seq_len, config.chunk_overlap)
    if not chunks:
        raise ValidationError(f"no training chunks (max_seq_len {config.max_seq_len}, {skipped} sequences too short)")

    model = PianoFlow(config.model_config(), seed=config.seed)
    schedule = LrSchedule(config.lr_initial, config.lr_final, config.warmup_steps, config.total_steps)
    optimizer = AdamW(model.named_params(), schedule, weight_decay=config.weight_decay)
    ckpt_path = os.path.join(config.out_dir, "model.ckpt")
    loss_path = os.path.join(config.out_dir, "loss.log")
    losses = []
    aborted = False

    with open(loss_path, "w") as log:
        log.write(f"# chunks={len(chunks)} skipped_short={skipped}\n")
        for step in range(1, config.total_steps + 1):
            batch = _make_batch(chunks, config, loop_rng)
            loss = train_step(model, batch, optimizer, loop_rng, config.sigma_min)
            losses.append(loss)
            if not np.isfinite(loss):
                log.write(f"{step} nan-abort\n")
                aborted = True
                break
            if step % config.log_every == 0 or step == 1:
                log.write(f"{step} {loss:.6f}\n")
            if step % config.save_every == 0:
                checkpoint.save(model, ckpt_path)
    if not aborted:
        checkpoint.save(model, ckpt_path)
    return TrainResult(model, losses, ckpt_path, aborted)


def _make_batch(chunks, config: RunConfig, rng):
    plan = maskgen.batch_mask_plan(config.batch_size, rng)
    idx = rng.integers(0, len(chunks), size=config.batch_size)
    ys, x1s, masks, interps = [], [], [], []
    controls = [] if config.use_control else None
    vocab = _batch_vocab(config)
    for strategy, ci in zip(plan, idx):
        seq = chunks[ci]
        if config.augment_prob > 0:
            spec = AugmentSpec.sample(rng)
            spec.apply_prob = config.augment_prob
            seq = augment(seq, spec, rng)
        ratio = float(rng.uniform(config.mask_ratio_min, config.mask_ratio_max))
        mask = maskgen.sample_mask(strategy, seq, ratio, rng).mask
        y, x1 = codec.normalize(seq)
        ys.append(y)
        x1s.append(x1)
        masks.append(mask)
        interps.append(np.asarray(seq.interpolated, dtype=bool))
        if controls is not None:
            ctrl = conditioning.build_controls(seq, vocab, text_dim=config.text_emb_dim)
            controls.append(conditioning.cfg_dropout(ctrl, rng, config.cfg_drop))
    batch = {
        "y": np.stack(ys),
        "x1": np.stack(x1s),
        "mask": np.stack(masks),
        "interpolated": np.stack(interps),
    }
    if controls is not None:
        batch["control"] = conditioning.stack_controls(controls)
    return batch


_VOCAB_CACHE = {}


def _batch_vocab(config):
    if "v" not in _VOCAB_CACHE:
        _VOCAB_CACHE["v"] = codec.default_tokenizer()
    return _VOCAB_CACHE["v"]
