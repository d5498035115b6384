import numpy as np
import pytest

from symupe import codec, pipeline
from symupe.tensornet import ModelConfig, PianoFlow


def tiny_config(use_control=False, dtype="fp64"):
    return ModelConfig(
        layers=2,
        dim=16,
        heads=4,
        ff_dims=(16, 32),
        feat_emb_dim=4,
        time_emb_dim=8,
        text_emb_dim=8,
        tempo_vocab=8,
        velocity_vocab=8,
        use_control=use_control,
        dtype=dtype,
    )


def tiny_model(use_control=False, dtype="fp64", seed=0, random_head=True):
    model = PianoFlow(tiny_config(use_control, dtype), seed=seed)
    if random_head:
        rng = np.random.default_rng(seed + 1)
        model.head.weight.data = rng.normal(0.0, 0.3, size=model.head.weight.shape).astype(model.head.weight.dtype)
    return model


def simple_sequence(n_bars=4, notes_per_bar=4, tempo=120.0, seed=0):
    """Metronomic quarter-note sequence, one note per beat."""
    rng = np.random.default_rng(seed)
    pairs = []
    spw = 240.0 / tempo
    t = 0.0
    for bar in range(n_bars):
        for beat in range(notes_per_bar):
            pitch = int(rng.integers(40, 90))
            pairs.append(
                codec.NotePair(
                    codec.ScoreEvent(pitch, bar, beat * 0.25, 0.25),
                    codec.PerfEvent(int(rng.integers(40, 90)), t, t + 0.25 * spw),
                )
            )
            t += 0.25 * spw
    return codec.encode_sequence(pairs, tempo_bpm=tempo)


@pytest.fixture
def synth_seq():
    rng = np.random.default_rng(42)
    score = pipeline.synth_score(rng)
    return pipeline.synth_performance(score, rng)
