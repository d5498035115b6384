"""ODE sampling: adaptive step schedule, windowed rendering, inpainting.

The learned field is integrated with explicit Euler from t=0 to t=1
over a geometric step schedule (each step gamma times the previous, so
steps shrink toward the data end of the path). Only masked positions
are integrated; known positions are pinned to their context values, so
inpainting never perturbs what it was given.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import codec, flowcore
from .errors import DomainError, SolverDiverged, ValidationError
from .midi_io import MidiNoteEvent, PedalEvent

DEFAULT_STEPS = 10
DEFAULT_GAMMA = 0.75
DEFAULT_WINDOW = 256
DEFAULT_NEW_K = 128


@dataclass
class StepSchedule:
    k: int
    gamma: float
    boundaries: np.ndarray  # k+1 times, 0 = t_0 < ... < t_k = 1
    deltas: np.ndarray  # k step sizes, deltas[i+1] = gamma * deltas[i]


def make_step_schedule(k, gamma=DEFAULT_GAMMA) -> StepSchedule:
    """Geometric step schedule over [0, 1].

    gamma = 1 gives uniform steps; gamma < 1 puts the large steps at the
    noise end (t near 0) and shrinks them toward t = 1.
    """
    if k < 1:
        raise DomainError(f"step count {k} < 1")
    if not 0.0 < gamma <= 1.0:
        raise DomainError(f"gamma {gamma} outside (0, 1]")
    if gamma == 1.0:
        deltas = np.full(k, 1.0 / k)
        boundaries = np.arange(k + 1) / k
    else:
        d0 = (1.0 - gamma) / (1.0 - gamma**k)
        deltas = d0 * gamma ** np.arange(k)
        boundaries = np.concatenate([[0.0], d0 * (1.0 - gamma ** np.arange(1, k + 1)) / (1.0 - gamma)])
        boundaries[-1] = 1.0
    return StepSchedule(k, gamma, boundaries, deltas)


def _field_fn(model):
    if hasattr(model, "field"):
        return model.field
    return model


def ode_solve(model, x0, x_ctx, y, mask, schedule, control=None, alpha=1.0, interpolated=None):
    """Integrate the field from noise to data on the masked positions.

    model: a PianoFlow or any callable
        f(x_t, x_ctx, y, t, mask, interpolated, control) -> (B, n, 4).
    x0: (B, n, 4) noise; x_ctx: (B, n, 4) context features (zeros at
    masked rows); mask: (B, n) boolean. When alpha != 1 and control is
    given, each step combines a conditional and an unconditional pass.
    Unmasked entries of the result equal x_ctx bit for bit.
    """
    field = _field_fn(model)
    x0 = np.asarray(x0, dtype=np.float64)
    x_ctx = np.asarray(x_ctx, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    m3 = mask[..., None]
    x = np.where(m3, x0, x_ctx)
    guided = alpha != 1.0 and control is not None
    for i, (t_i, dt) in enumerate(zip(schedule.boundaries[:-1], schedule.deltas)):
        v = field(x, x_ctx, y, t_i, mask, interpolated, control)
        if guided:
            v_uncond = field(x, x_ctx, y, t_i, mask, interpolated, None)
            v = flowcore.guided_field(v, v_uncond, alpha)
        if not np.isfinite(v).all():
            raise SolverDiverged("field produced a non-finite value", step=i)
        x = np.where(m3, x + dt * v, x_ctx)
    return x


def _solve_window(model, seq_y, x_known, mask, rng, schedule, control, alpha, interpolated):
    """One batched (B=1) solve over a note window; returns (n, 4)."""
    n = seq_y.shape[0]
    x_ctx = np.where(mask[:, None], 0.0, x_known)
    x0 = rng.standard_normal((n, 4))
    ctrl = control.batched() if control is not None else None
    interp = interpolated[None] if interpolated is not None else None
    out = ode_solve(
        model,
        x0[None],
        x_ctx[None],
        seq_y[None],
        mask[None],
        schedule,
        control=ctrl,
        alpha=alpha,
        interpolated=interp,
    )
    return out[0]


def render_windowed(
    model,
    score: codec.AlignedSequence,
    window_n=DEFAULT_WINDOW,
    new_k=DEFAULT_NEW_K,
    conditioning=None,
    k=DEFAULT_STEPS,
    gamma=DEFAULT_GAMMA,
    alpha=1.0,
    seed=0,
) -> codec.AlignedSequence:
    """Render a full performance for a score with overlapping windows.

    The first window is generated from scratch; every later window keeps
    window_n - new_k already generated notes as context and predicts its
    last new_k notes, so each note is generated exactly once. A score
    shorter than the window is rendered in a single pass.
    """
    if not 1 <= new_k <= window_n:
        raise ValidationError(f"new_k {new_k} outside [1, window_n={window_n}]")
    n = len(score)
    if n == 0:
        return score.copy()
    schedule = make_step_schedule(k, gamma)
    rng = np.random.default_rng(seed)
    y, _ = codec.normalize(score)
    interp_all = np.asarray(score.interpolated, dtype=bool)

    x_gen = np.zeros((n, 4))
    first_end = min(window_n, n)
    mask = np.ones(first_end, dtype=bool)
    ctrl = conditioning.slice(0, first_end) if conditioning is not None else None
    x_gen[:first_end] = _solve_window(
        model, y[:first_end], x_gen[:first_end], mask, rng, schedule, ctrl, alpha, interp_all[:first_end]
    )
    generated = first_end
    while generated < n:
        ctx_start = max(0, generated - (window_n - new_k))
        end = min(n, ctx_start + window_n)
        win = slice(ctx_start, end)
        mask = np.zeros(end - ctx_start, dtype=bool)
        mask[generated - ctx_start :] = True
        ctrl = conditioning.slice(ctx_start, end) if conditioning is not None else None
        out = _solve_window(model, y[win], x_gen[win], mask, rng, schedule, ctrl, alpha, interp_all[win])
        x_gen[generated:end] = out[generated - ctx_start :]
        generated = end

    return _apply_perf_features(score, x_gen)


def inpaint(model, seq: codec.AlignedSequence, mask_spec, conditioning=None, alpha=1.0, k=DEFAULT_STEPS, gamma=DEFAULT_GAMMA, seed=0):
    """Regenerate the masked notes of a performance, keeping the rest.

    Unmasked performance features are preserved bit-exactly; masked ones
    are sampled conditioned on them (and on any control inputs).
    """
    mask = np.asarray(getattr(mask_spec, "mask", mask_spec), dtype=bool)
    n = len(seq)
    if mask.shape != (n,):
        raise ValidationError(f"mask length {mask.shape} does not match sequence length {n}")
    if not mask.any():
        return seq.copy()
    schedule = make_step_schedule(k, gamma)
    rng = np.random.default_rng(seed)
    y, x = codec.normalize(seq)
    out = _solve_window(model, y, x, mask, rng, schedule, conditioning, alpha, np.asarray(seq.interpolated, dtype=bool))
    return _apply_perf_features(seq, out, keep=~mask)


def _apply_perf_features(seq: codec.AlignedSequence, x, keep=None):
    """New sequence with generated performance features installed.

    Entries selected by `keep` retain the original field values exactly.
    Generated velocities outside the unit range are clamped silently;
    stray model output there is expected, not an input error.
    """
    x = np.asarray(x, dtype=np.float64).copy()
    x[:, 0] = np.clip(x[:, 0], 0.0, 1.0)
    _, perf = codec.denormalize(np.zeros((len(seq), 4)), x)
    out = seq.copy()
    velocity = perf["velocity"]
    time_shift = perf["time_shift"]
    dur = perf["time_duration"]
    sus = perf["time_duration_sustain"]
    if keep is not None:
        velocity = np.where(keep, seq.velocity, velocity)
        time_shift = np.where(keep, seq.time_shift, time_shift)
        dur = np.where(keep, seq.time_duration, dur)
        sus = np.where(keep, seq.time_duration_sustain, sus)
    out.velocity = velocity.astype(np.int64)
    out.time_shift = time_shift
    out.time_duration = dur
    out.time_duration_sustain = np.maximum(sus, dur)
    out.beat_tempo_bpm = codec.local_beat_tempo(out.score_onset, out.perf_onsets(), out.score_tempo_bpm)
    return out


def decode_to_midi(seq: codec.AlignedSequence):
    """Turn a performed sequence into MIDI note and pedal events.

    Onsets are the cumulative sum of time shifts (shifted up if the
    micro-timing dips below zero); pedal-extended tails become merged
    CC64 down/up spans. Zero velocities are clamped to 1 so every note
    sounds.
    """
    n = len(seq)
    if n == 0:
        return [], []
    onsets = np.cumsum(seq.time_shift)
    if onsets.min() < 0:
        onsets = onsets - onsets.min()
    durations = np.maximum(seq.time_duration, 1e-3)
    velocity = np.clip(seq.velocity, 1, 127)
    notes = [
        MidiNoteEvent(int(p), int(v), float(t), float(t + d))
        for p, v, t, d in zip(seq.pitch, velocity, onsets, durations)
    ]

    spans = []
    for i in range(n):
        extra = seq.time_duration_sustain[i] - durations[i]
        if extra > 1e-3:
            start = onsets[i] + durations[i]
            spans.append((start, onsets[i] + seq.time_duration_sustain[i]))
    pedals = []
    for start, end in sorted(spans):
        if pedals and start <= pedals[-1][1] + 1e-3:
            pedals[-1][1] = max(pedals[-1][1], end)
        else:
            pedals.append([start, end])
    pedal_events = []
    for start, end in pedals:
        pedal_events.append(PedalEvent(float(start), 127))
        pedal_events.append(PedalEvent(float(end), 0))
    return notes, pedal_events
