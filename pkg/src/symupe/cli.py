"""Command-line surface tying the toolkit together.

Subcommands: encode, tokenize, synth-data, train, render, inpaint,
eval, grad-check, schedule. Exit codes: 0 on success, 1 on a domain
error (bad data, diverged solver, ...), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import codec, conditioning, evalsuite, maskgen, midi_io, pipeline, sampler
from .errors import SymupeError, ValidationError
from .tensornet import ModelConfig, PianoFlow, checkpoint, grad_check
from .tensornet import tensor as tensor_ops


def _score_events_from_midi(track):
    """Symbolic events for a metronomic score MIDI (constant tempo)."""
    sigs = [codec.TimeSig(0, 4, 4)]
    tempo = track.tempo_bpm
    notes = sorted(track.notes, key=lambda n: (n.onset_s, n.pitch))
    if not notes:
        raise ValidationError("score MIDI contains no notes")
    spw = 240.0 / tempo
    bar_starts = None
    if track.time_signatures:
        # Bars realized in seconds at the nominal tempo.
        sig_events = sorted(track.time_signatures, key=lambda s: s.time_s)
        sigs = []
        bar = 0
        t = 0.0
        bar_starts = []
        i = 0
        while t <= notes[-1].onset_s + 1e-9:
            while i < len(sig_events) and sig_events[i].time_s <= t + 1e-9:
                sigs.append(codec.TimeSig(bar, sig_events[i].numerator, sig_events[i].denominator))
                i += 1
            active = sigs[-1] if sigs else codec.TimeSig(0, 4, 4)
            if not sigs:
                sigs = [active]
            bar_starts.append(t)
            t += active.bar_length * spw
            bar += 1
    events = []
    for n in notes:
        if bar_starts is not None:
            bar = int(np.searchsorted(bar_starts, n.onset_s + 1e-9) - 1)
            within = n.onset_s - bar_starts[bar]
        else:
            bar = int(n.onset_s // spw)
            within = n.onset_s - bar * spw
        pos = round(within / spw * codec.WHOLE_UNITS) / codec.WHOLE_UNITS
        dur = max(round((n.offset_s - n.onset_s) / spw * codec.WHOLE_UNITS), 1) / codec.WHOLE_UNITS
        events.append(codec.ScoreEvent(n.pitch, bar, pos, dur))
    return events, sigs, tempo


def _scaffold_sequence(events, sigs, tempo, dynamic=64):
    """Deadpan AlignedSequence used as the rendering canvas."""
    starts = codec.bar_start_positions(sigs, max(e.bar_index for e in events) + 1)
    spw = 240.0 / tempo
    pairs = []
    for e in events:
        onset = (starts[e.bar_index] + e.position) * spw
        dur = max(e.duration * spw, 0.05)
        pairs.append(codec.NotePair(e, codec.PerfEvent(int(dynamic), onset, onset + dur)))
    return codec.encode_sequence(pairs, sigs, tempo_bpm=tempo, dynamic_level=dynamic)


def _load_model(path):
    if not path:
        raise ValidationError("--ckpt is required for this command")
    return checkpoint.load(path)


# -- subcommand handlers ---------------------------------------------------------


def _cmd_encode(args):
    score_track = midi_io.parse_smf(open(args.score, "rb").read())
    perf_track = midi_io.parse_smf(open(args.perf, "rb").read())
    events, sigs, _ = _score_events_from_midi(score_track)
    tempo = args.tempo
    perf_notes = sorted(perf_track.notes, key=lambda n: (n.onset_s, n.pitch))
    if len(perf_notes) != len(events):
        raise ValidationError(
            f"score has {len(events)} notes but performance has {len(perf_notes)}; "
            "this encoder expects note-to-note matched files"
        )
    sustain = midi_io.resolve_sustain(perf_track)
    order = sorted(range(len(events)), key=lambda i: (events[i].bar_index, events[i].position, events[i].pitch))
    pairs = []
    for rank, i in enumerate(order):
        e = events[i]
        p = perf_notes[rank]
        if e.pitch != p.pitch:
            raise ValidationError(f"note {rank}: score pitch {e.pitch} != performance pitch {p.pitch}")
        pressed, sustained = sustain[perf_track.notes.index(p)]
        pairs.append(codec.NotePair(e, codec.PerfEvent(p.velocity, p.onset_s, p.onset_s + pressed, p.onset_s + sustained)))
    dynamic = int(np.median([n.velocity for n in score_track.notes]))
    seq = codec.encode_sequence(pairs, sigs, tempo_bpm=tempo, dynamic_level=dynamic)
    seq.save(args.output)
    print(f"wrote {args.output} ({len(seq)} notes)")
    return 0


def _cmd_tokenize(args):
    vocab = codec.Vocab.load(args.tokenizer) if args.tokenizer else codec.default_tokenizer()
    if args.input.endswith(".align"):
        seq = codec.AlignedSequence.load(args.input)
        tokens = codec.tokenize_sequence(seq, vocab)
    else:
        track = midi_io.parse_smf(open(args.input, "rb").read())
        notes = sorted(track.notes, key=lambda n: (n.onset_s, n.pitch))
        sustain = midi_io.resolve_sustain(track)
        by_note = {id(n): s for n, s in zip(track.notes, sustain)}
        onsets = np.array([n.onset_s for n in notes])
        shifts = np.diff(onsets, prepend=onsets[0] if len(onsets) else 0.0)
        tokens = {
            "Pitch": vocab.tokenize([n.pitch for n in notes], "Pitch"),
            "Velocity": vocab.tokenize([n.velocity for n in notes], "Velocity"),
            "TimeShift": vocab.tokenize(shifts, "TimeShift"),
            "TimeDuration": vocab.tokenize([by_note[id(n)][0] for n in notes], "TimeDuration"),
            "TimeDurationSustain": vocab.tokenize([by_note[id(n)][1] for n in notes], "TimeDurationSustain"),
        }
    names = list(tokens)
    lines = ["# " + " ".join(names)]
    for row in zip(*(tokens[k] for k in names)):
        lines.append(" ".join(str(int(v)) for v in row))
    text = "\n".join(lines) + "\n"
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
        print(f"wrote {args.output} ({len(lines) - 1} notes)")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_synth_data(args):
    rng = np.random.default_rng(args.seed)
    os.makedirs(args.output, exist_ok=True)
    count = 0
    for piece, seq in pipeline.synth_dataset(args.pieces, rng, perfs_per_piece=args.perfs):
        idx = count % args.perfs
        path = os.path.join(args.output, f"{piece}__perf{idx}.align")
        seq.save(path)
        count += 1
    print(f"wrote {count} sequences to {args.output}")
    return 0


def _cmd_train(args):
    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        if not value:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    base = pipeline.RunConfig.from_file(args.config) if args.config else pipeline.RunConfig()
    config = pipeline.RunConfig.from_overrides(overrides, base=base)
    if args.output:
        config.out_dir = args.output
    result = pipeline.train(config)
    status = "aborted (non-finite loss)" if result.aborted else "done"
    print(f"{status}: {len(result.losses)} steps, final loss {result.losses[-1]:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 1 if result.aborted else 0


def _build_conditioning(args, seq, model):
    if not model.config.use_control:
        if args.prompt_file:
            print("warning: model has no control inputs; ignoring --prompt-file", file=sys.stderr)
        return None
    vocab = codec.default_tokenizer()
    text_emb = None
    if args.prompt_file:
        if not args.emb_file:
            raise ValidationError("--prompt-file requires --emb-file with the text embedding table")
        table = conditioning.EmotionTable.load(args.emb_file)
        entries = conditioning.parse_prompt_file(args.prompt_file, table)
        text_emb = conditioning.prompt_text_embeddings(seq, entries, table)
    return conditioning.build_controls(
        seq, vocab, text_emb=text_emb, tempo_scale=args.tempo_scale, text_dim=model.config.text_emb_dim
    )


def _cmd_render(args):
    model = _load_model(args.ckpt)
    track = midi_io.parse_smf(open(args.score, "rb").read())
    events, sigs, tempo = _score_events_from_midi(track)
    seq = _scaffold_sequence(events, sigs, args.tempo or tempo)
    ctrl = _build_conditioning(args, seq, model)
    t0 = time.time()
    out = sampler.render_windowed(
        model,
        seq,
        window_n=args.window,
        new_k=args.new_k,
        conditioning=ctrl,
        k=args.k,
        gamma=args.gamma,
        alpha=args.alpha,
        seed=args.seed,
    )
    elapsed = time.time() - t0
    notes, pedals = sampler.decode_to_midi(out)
    with open(args.output, "wb") as fh:
        fh.write(midi_io.write_smf(notes, pedals, tempo_bpm=args.tempo or tempo))
    if args.align_out:
        out.save(args.align_out)
    nps = len(out) / elapsed if elapsed > 0 else float("inf")
    print(f"rendered {len(out)} notes in {elapsed:.2f}s ({nps:.0f} notes/s) -> {args.output}")
    return 0


def _parse_mask_spec(spec, seq, rng):
    kind, _, value = spec.partition(":")
    kind = kind.strip().lower()
    n = len(seq)
    if kind == "full":
        return maskgen.sample_mask(maskgen.Strategy.FULL, seq, 1.0, rng)
    if kind in ("random", "beats", "bars", "segment", "end"):
        ratio = float(value)
        return maskgen.sample_mask(maskgen.Strategy(kind), seq, ratio, rng)
    if kind == "pitch_below":
        mask = np.asarray(seq.pitch) < int(value)
    elif kind == "pitch_above":
        mask = np.asarray(seq.pitch) > int(value)
    elif kind == "keep_ends":
        keep = int(value)
        mask = np.ones(n, dtype=bool)
        mask[:keep] = False
        mask[n - keep :] = False
    else:
        raise ValidationError(f"unknown mask spec {spec!r}")
    return maskgen.MaskSpec(mask, maskgen.Strategy.RANDOM_NOTES, float(mask.mean()))


def _cmd_inpaint(args):
    model = _load_model(args.ckpt)
    seq = codec.AlignedSequence.load(args.input)
    rng = np.random.default_rng(args.seed)
    spec = _parse_mask_spec(args.mask_spec, seq, rng)
    ctrl = _build_conditioning(args, seq, model)
    out = sampler.inpaint(model, seq, spec, conditioning=ctrl, alpha=args.alpha, k=args.k, gamma=args.gamma, seed=args.seed)
    base, ext = os.path.splitext(args.output)
    out.save(base + ".align" if ext != ".align" else args.output)
    notes, pedals = sampler.decode_to_midi(out)
    with open(base + ".mid", "wb") as fh:
        fh.write(midi_io.write_smf(notes, pedals, tempo_bpm=float(seq.score_tempo_bpm[0])))
    print(f"inpainted {int(spec.mask.sum())}/{len(seq)} notes -> {base}.align, {base}.mid")
    return 0


def _load_eval_dir(path):
    groups = {}
    for name in sorted(os.listdir(path)):
        if not name.endswith(".align"):
            continue
        score_id = name.split("__")[0]
        groups.setdefault(score_id, []).append(codec.AlignedSequence.load(os.path.join(path, name)))
    if not groups:
        raise ValidationError(f"no .align files in {path!r}")
    return groups


def _cmd_eval(args):
    set_a = _load_eval_dir(args.dir_a)
    set_b = _load_eval_dir(args.dir_b)
    report = evalsuite.evaluate_sets(set_a, set_b, n_mc=args.n_mc, seed=args.seed)
    print(report.table())
    if report.skipped_scores:
        print(f"skipped scores (present in one set only): {', '.join(report.skipped_scores)}")
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(report.to_json())
        print(f"wrote {args.output}")
    return 0


def _cmd_grad_check(args):
    cfg = ModelConfig(
        layers=2,
        dim=8,
        heads=2,
        ff_dims=(8, 16),
        feat_emb_dim=4,
        time_emb_dim=8,
        text_emb_dim=8,
        tempo_vocab=6,
        velocity_vocab=6,
        use_control=True,
        dtype="fp64",
    )
    model = PianoFlow(cfg, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    model.head.weight.data = rng.normal(0.0, 0.3, size=model.head.weight.shape)
    b, n = 1, 3
    x_t = rng.normal(size=(b, n, 4))
    x_ctx = rng.normal(size=(b, n, 4))
    y = rng.normal(size=(b, n, 4))
    mask = np.array([[True, False, True]])
    control = conditioning.ControlInputs(
        score_tempo=rng.integers(0, 6, size=(n,)),
        score_velocity=rng.integers(0, 6, size=(n,)),
        perf_tempo=rng.integers(0, 6, size=(n,)),
        text_emb=rng.normal(size=(n, 8)),
    ).batched()
    weights = rng.normal(size=(b, n, 4))
    params = list(model.named_params().values())

    def fn():
        v = model.forward(x_t, x_ctx, y, 0.37, mask, control=control)
        return tensor_ops.tsum(tensor_ops.mul(v, weights))

    err = grad_check(fn, params, eps=args.eps)
    print(f"max relative gradient error over {sum(p.size for p in params)} parameters: {err:.3e}")
    return 0 if err < 1e-5 else 1


def _cmd_schedule(args):
    sched = sampler.make_step_schedule(args.k, args.gamma)
    for t in sched.boundaries:
        print(f"{t:.12f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="symupe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="matched score+performance MIDI pair -> align file")
    p.add_argument("score")
    p.add_argument("perf")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--tempo", type=float, default=120.0, help="score tempo marking (BPM)")
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("tokenize", help="MIDI or align file -> token id table")
    p.add_argument("input")
    p.add_argument("-o", "--output")
    p.add_argument("--tokenizer", help="tokenizer config file (default: built-in)")
    p.set_defaults(func=_cmd_tokenize)

    p = sub.add_parser("synth-data", help="generate synthetic aligned sequences")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("-n", "--pieces", type=int, default=50)
    p.add_argument("--perfs", type=int, default=1, help="performances per piece")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("-o", "--output", help="run directory (overrides config)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", help="score MIDI -> performance MIDI")
    p.add_argument("score")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--k", type=int, default=sampler.DEFAULT_STEPS)
    p.add_argument("--gamma", type=float, default=sampler.DEFAULT_GAMMA)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=sampler.DEFAULT_WINDOW)
    p.add_argument("--new-k", type=int, default=sampler.DEFAULT_NEW_K)
    p.add_argument("--tempo", type=float, help="override the score tempo marking")
    p.add_argument("--tempo-scale", type=float, default=1.0)
    p.add_argument("--prompt-file")
    p.add_argument("--emb-file")
    p.add_argument("--align-out")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("inpaint", help="regenerate masked notes of a performance")
    p.add_argument("input", help="align file")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mask-spec", required=True, help="random:R | beats:R | bars:R | segment:R | end:R | full | pitch_below:P | pitch_above:P | keep_ends:N")
    p.add_argument("--k", type=int, default=sampler.DEFAULT_STEPS)
    p.add_argument("--gamma", type=float, default=sampler.DEFAULT_GAMMA)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tempo-scale", type=float, default=1.0)
    p.add_argument("--prompt-file")
    p.add_argument("--emb-file")
    p.set_defaults(func=_cmd_inpaint)

    p = sub.add_parser("eval", help="compare two directories of align files")
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    p.add_argument("-o", "--output", help="machine-readable JSON report")
    p.add_argument("--n-mc", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of the model gradients")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("schedule", help="print the ODE step boundaries")
    p.add_argument("--k", type=int, default=sampler.DEFAULT_STEPS)
    p.add_argument("--gamma", type=float, default=sampler.DEFAULT_GAMMA)
    p.set_defaults(func=_cmd_schedule)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SymupeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
