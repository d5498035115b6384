import numpy as np
import pytest

from symupe import codec
from symupe.codec import NotePair, PerfEvent, ScoreEvent, TimeSig
from symupe.errors import DecodeError, ParseError, RangeError, ValidationError

from conftest import simple_sequence

TABLE_SIZES = {
    "Pitch": 91,
    "Position": 196,
    "PositionShift": 136,
    "Duration": 136,
    "Tempo": 164,
    "ScoreVelocity": 131,
    "Velocity": 131,
    "TimeShift": 365,
    "TimeDuration": 313,
    "TimeDurationSustain": 313,
}


# -- encode_sequence ---------------------------------------------------------


def test_chord_second_note_zero_position_shift():
    pairs = [
        NotePair(ScoreEvent(60, 0, 0.0, 0.25), PerfEvent(70, 0.0, 0.4)),
        NotePair(ScoreEvent(64, 0, 0.0, 0.25), PerfEvent(72, 0.005, 0.41)),
        NotePair(ScoreEvent(67, 0, 0.25, 0.25), PerfEvent(68, 0.5, 0.9)),
    ]
    seq = codec.encode_sequence(pairs)
    assert seq.position_shift[0] == 0.0
    assert seq.position_shift[1] == 0.0  # chord member
    assert seq.position_shift[2] == pytest.approx(0.25)


def test_metronomic_time_shifts():
    seq = simple_sequence(n_bars=2, tempo=120.0)
    # quarter notes at 120 BPM: 0.5 s apart
    assert np.allclose(seq.time_shift[1:], 0.5)
    assert seq.time_shift[0] == 0.0


def test_negative_time_shift_for_reversed_chord_microtiming():
    # Lower pitch struck 10 ms after the higher one; sorting is
    # pitch-ascending inside the chord, so the second row steps back.
    pairs = [
        NotePair(ScoreEvent(72, 0, 0.0, 0.25), PerfEvent(70, 0.0, 0.4)),
        NotePair(ScoreEvent(60, 0, 0.0, 0.25), PerfEvent(70, 0.01, 0.4)),
    ]
    seq = codec.encode_sequence(pairs)
    assert list(seq.pitch) == [60, 72]
    assert seq.time_shift[1] == pytest.approx(-0.01)


def test_pitch_out_of_range_rejected():
    pairs = [NotePair(ScoreEvent(10, 0, 0.0, 0.25), PerfEvent(70, 0.0, 0.4))]
    with pytest.raises(RangeError):
        codec.encode_sequence(pairs)


def test_position_shift_count_invariant(synth_seq):
    distinct = len(np.unique(synth_seq.score_onset))
    assert (synth_seq.position_shift > 0).sum() == distinct - 1


def test_unmatched_pairs_rejected():
    pairs = [NotePair(ScoreEvent(60, 0, 0.0, 0.25), None)]
    with pytest.raises(ValidationError):
        codec.encode_sequence(pairs)


# -- normalize / denormalize ---------------------------------------------------


def test_normalize_endpoints():
    pairs = [
        NotePair(ScoreEvent(21, 0, 0.0, 0.25), PerfEvent(127, 0.0, 0.4)),
        NotePair(ScoreEvent(108, 0, 0.25, 0.25), PerfEvent(64, 0.5, 0.9)),
    ]
    seq = codec.encode_sequence(pairs)
    y, x = codec.normalize(seq)
    assert y[0, 0] == 0.0 and y[1, 0] == 1.0
    assert x[0, 0] == 1.0
    assert x[1, 0] == pytest.approx(64 / 127)  # ~0.50394


def test_denormalize_endpoints():
    score, perf = codec.denormalize(np.array([[0.0, 0, 0, 0.25]]), np.array([[1.0, 0, 0.3, 0.3]]))
    assert score["pitch"][0] == 21
    assert perf["velocity"][0] == 127


def test_normalize_roundtrip_all_pitches_and_velocities():
    pitches = np.arange(21, 109)
    n = len(pitches)
    pairs = [
        NotePair(ScoreEvent(int(p), i, 0.0, 0.25), PerfEvent(int(21 + (i % 107)), i * 1.0, i * 1.0 + 0.4))
        for i, p in enumerate(pitches)
    ]
    seq = codec.encode_sequence(pairs)
    y, x = codec.normalize(seq)
    score, perf = codec.denormalize(y, x)
    assert (score["pitch"] == seq.pitch).all()
    assert (perf["velocity"] == seq.velocity).all()
    assert np.array_equal(perf["time_shift"], seq.time_shift)


def test_denormalize_clamps_with_warning():
    with pytest.warns(UserWarning):
        score, perf = codec.denormalize(np.array([[1.5, 0, 0, 0]]), np.array([[-0.2, 0, 0.1, 0.1]]))
    assert score["pitch"][0] == 108
    assert perf["velocity"][0] == 0


# -- tokenizer -----------------------------------------------------------------


def test_vocabulary_sizes_match_published_table():
    assert codec.default_tokenizer().sizes() == TABLE_SIZES


def test_timeshift_min_is_first_value_bin():
    v = codec.default_tokenizer()
    ids = v.tokenize([-0.5], "TimeShift")
    assert ids[0] == codec.N_SPECIALS
    assert v.detokenize(ids, "TimeShift")[0] == pytest.approx(-0.5, abs=0.005)


def test_pitch_vocab_is_88_values_plus_3_specials():
    t = codec.default_tokenizer()["Pitch"]
    assert t.n_bins == 88 and t.token_count == 91
    ids = t.tokenize(np.arange(21, 109))
    assert ids[0] == 3 and ids[-1] == 90
    assert np.array_equal(t.detokenize(ids), np.arange(21, 109))


def test_roundtrip_error_within_half_local_bin():
    # Oracle: the emitted bin-edge table defines the bins; the decoded
    # value must sit within half the containing bin's width.
    rng = np.random.default_rng(0)
    vocab = codec.default_tokenizer()
    for name, table in vocab.tables.items():
        lo, hi = table.values[0] / table.scale, table.values[-1] / table.scale
        vals = rng.uniform(lo, hi, 5000)
        dec = table.detokenize(table.tokenize(vals))
        grid_v = vals * table.scale
        j = np.searchsorted(table.edges[1:-1], grid_v, side="left")
        half = (table.edges[j + 1] - table.edges[j]) / 2.0
        assert (np.abs(grid_v - dec * table.scale) <= half + 1e-9).all(), name


def test_tokenize_idempotent_through_roundtrip():
    rng = np.random.default_rng(1)
    vocab = codec.default_tokenizer()
    for name, table in vocab.tables.items():
        lo, hi = table.values[0] / table.scale, table.values[-1] / table.scale
        vals = rng.uniform(lo, hi, 2000)
        ids = table.tokenize(vals)
        assert np.array_equal(table.tokenize(table.detokenize(ids)), ids), name


def test_edges_strictly_increasing_and_widths_monotone():
    vocab = codec.default_tokenizer()
    for name, table in vocab.tables.items():
        assert (np.diff(table.edges) > 0).all(), name
    # Adaptive features: widths non-decreasing with magnitude (per side
    # for the signed TimeShift grid).
    for name in ("PositionShift", "Duration", "Tempo", "TimeDuration", "TimeDurationSustain"):
        widths = np.diff(vocab[name].edges)
        assert (np.diff(widths) >= -1e-12).all(), name
    ts = vocab["TimeShift"]
    widths = np.diff(ts.edges)
    assert (np.diff(widths[ts.values > 0]) >= -1e-12).all()  # positive side
    assert np.allclose(widths[ts.values < 0], 0.01)  # 10 ms bins below zero


def test_out_of_range_clamped_and_flagged():
    t = codec.default_tokenizer()["TimeShift"]
    ids, clamped = t.tokenize([11.0, -1.0, 0.5], return_clamped=True)
    assert clamped == 2
    assert t.detokenize(ids)[0] == pytest.approx(10.0, abs=0.05)


def test_unknown_and_special_ids_raise():
    t = codec.default_tokenizer()["Pitch"]
    with pytest.raises(DecodeError):
        t.detokenize([t.token_count])
    with pytest.raises(DecodeError):
        t.detokenize([codec.MASK_ID])


def test_tokenizer_config_file_roundtrip(tmp_path):
    vocab = codec.default_tokenizer()
    path = tmp_path / "tok.txt"
    vocab.save(path)
    again = codec.Vocab.load(path)
    assert again.sizes() == TABLE_SIZES
    for name in vocab.tables:
        assert np.array_equal(vocab[name].edges, again[name].edges)


def test_bin_edge_dump(tmp_path):
    vocab = codec.default_tokenizer()
    vocab.dump_edges(tmp_path / "edges")
    for name, table in vocab.tables.items():
        lines = (tmp_path / "edges" / f"{name}.edges").read_text().splitlines()
        assert np.allclose([float(v) for v in lines], table.edges)


# -- clean_alignment -----------------------------------------------------------


def test_clean_alignment_no_missing_is_identity(synth_seq):
    pairs = []
    onsets = synth_seq.perf_onsets()
    for i in range(len(synth_seq)):
        pairs.append(
            NotePair(
                ScoreEvent(int(synth_seq.pitch[i]), int(synth_seq.bar_index[i]), float(synth_seq.position[i]), float(synth_seq.duration[i])),
                PerfEvent(int(synth_seq.velocity[i]), float(onsets[i]), float(onsets[i] + synth_seq.time_duration[i])),
            )
        )
    seq, report = codec.clean_alignment(pairs, synth_seq.time_signatures, tempo_bpm=float(synth_seq.score_tempo_bpm[0]))
    assert report.interpolated == 0 and not report.dropped
    assert not seq.interpolated.any()
    assert np.allclose(seq.time_shift, synth_seq.time_shift)


def test_clean_alignment_midpoint_interpolation():
    # Matched onsets 1.0 s apart; the missing note lies score-midway, so
    # its onset interpolates to the midpoint: time shift 0.5 s.
    pairs = [
        NotePair(ScoreEvent(60, 0, 0.0, 0.25), PerfEvent(80, 0.0, 0.4)),
        NotePair(ScoreEvent(64, 0, 0.25, 0.25), None),
        NotePair(ScoreEvent(67, 0, 0.5, 0.25), PerfEvent(60, 1.0, 1.4)),
    ]
    seq, report = codec.clean_alignment(pairs)
    assert report.interpolated == 1
    assert list(seq.interpolated) == [False, True, False]
    assert seq.time_shift[1] == pytest.approx(0.5)
    assert seq.velocity[1] == 70  # mean of the bar's matched velocities


def test_clean_alignment_missing_chord_member_inherits_onset():
    pairs = [
        NotePair(ScoreEvent(60, 0, 0.0, 0.25), PerfEvent(80, 0.2, 0.6)),
        NotePair(ScoreEvent(64, 0, 0.0, 0.25), None),
        NotePair(ScoreEvent(67, 0, 0.5, 0.25), PerfEvent(60, 1.2, 1.6)),
    ]
    seq, report = codec.clean_alignment(pairs)
    assert seq.time_shift[1] == pytest.approx(0.0)  # shares the chord onset


def test_clean_alignment_unfillable_bar_dropped_with_report():
    pairs = [
        NotePair(ScoreEvent(60, 0, 0.0, 0.25), PerfEvent(80, 0.0, 0.4)),
        NotePair(ScoreEvent(64, 5, 0.0, 0.25), None),  # bar 5 has no matches
    ]
    seq, report = codec.clean_alignment(pairs)
    assert len(seq) == 1
    assert report.dropped == [(5, 64, "no matched notes in bar")]


def test_clean_alignment_duration_scaled_by_local_tempo():
    # Performance runs 2x slower than notated; the filled quarter note
    # should last 2x its nominal time.
    pairs = [
        NotePair(ScoreEvent(60, 0, 0.0, 0.25), PerfEvent(80, 0.0, 0.5)),
        NotePair(ScoreEvent(64, 0, 0.25, 0.25), None),
        NotePair(ScoreEvent(67, 0, 0.5, 0.25), PerfEvent(60, 2.0, 2.5)),
    ]
    seq, _ = codec.clean_alignment(pairs, tempo_bpm=120.0)
    # local seconds-per-whole = 2.0/0.5 = 4.0; quarter = 1.0 s
    assert seq.time_duration[1] == pytest.approx(1.0)


# -- sequence container ---------------------------------------------------------


def test_align_file_roundtrip(tmp_path, synth_seq):
    path = tmp_path / "x.align"
    synth_seq.save(path)
    again = codec.AlignedSequence.load(path)
    for name in ("pitch", "position", "time_shift", "time_duration", "time_duration_sustain", "beat_tempo_bpm"):
        assert np.array_equal(getattr(synth_seq, name), getattr(again, name)), name
    assert [(s.bar_index, s.numerator, s.denominator) for s in again.time_signatures] == [
        (s.bar_index, s.numerator, s.denominator) for s in synth_seq.time_signatures
    ]


def test_align_header_required():
    with pytest.raises(ParseError):
        codec.AlignedSequence.loads("not a header\n")


def test_sustain_invariant_validated():
    seq = simple_sequence()
    seq.time_duration_sustain = seq.time_duration - 0.1
    with pytest.raises(ValidationError):
        seq.validate()


def test_subsequence_resets_leading_shifts(synth_seq):
    sub = synth_seq.subsequence(10, 30)
    assert len(sub) == 20
    assert sub.time_shift[0] == 0.0 and sub.position_shift[0] == 0.0


def test_beat_indices_follow_time_signature():
    pairs = [
        NotePair(ScoreEvent(60, 0, 0.0, 0.25), PerfEvent(80, 0.0, 0.4)),
        NotePair(ScoreEvent(62, 0, 0.25, 0.25), PerfEvent(80, 0.5, 0.9)),
        NotePair(ScoreEvent(64, 1, 0.0, 0.25), PerfEvent(80, 2.0, 2.4)),
    ]
    seq = codec.encode_sequence(pairs, [TimeSig(0, 4, 4)])
    assert list(seq.beat_index) == [0, 1, 4]
    assert list(seq.is_downbeat) == [True, False, True]
