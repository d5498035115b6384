"""Binary temporal masks for multi-mask training and inpainting.

Six strategies: random notes, whole beats, whole bars, one contiguous
segment, the end of the sequence, and the full sequence (unconditional
rendering). Structural strategies mask whole units and overshoot the
requested ratio rather than splitting a unit. All sampling is driven by
an explicit numpy Generator, so masks are bit-reproducible from a seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import EmptySequence

RATIO_MIN = 0.1
RATIO_MAX = 0.9


class Strategy(Enum):
    RANDOM_NOTES = "random"
    BEATS = "beats"
    BARS = "bars"
    SEGMENT = "segment"
    END_OF_SEQUENCE = "end"
    FULL = "full"


# The five sampled strategies; FULL fills the other half of each batch.
PARTIAL_STRATEGIES = (
    Strategy.RANDOM_NOTES,
    Strategy.BEATS,
    Strategy.BARS,
    Strategy.SEGMENT,
    Strategy.END_OF_SEQUENCE,
)


@dataclass
class MaskSpec:
    mask: np.ndarray  # bool, True = masked / to be predicted
    strategy: Strategy
    ratio: float

    def dumps(self):
        """Debug form: one 0/1 character per note."""
        return "".join("1" if m else "0" for m in self.mask)


def sample_ratio(rng) -> float:
    """Masked-note ratio, uniform on [0.1, 0.9]."""
    return float(rng.uniform(RATIO_MIN, RATIO_MAX))


def _unit_mask(units, ratio, rng, n):
    """Mask whole units until coverage reaches the ratio, never all notes."""
    unique = np.unique(units)
    order = rng.permutation(len(unique))
    mask = np.zeros(n, dtype=bool)
    covered = 0
    for idx in order:
        add = units == unique[idx]
        if covered + add.sum() >= n:  # keep at least one note unmasked
            continue
        mask |= add
        covered = int(mask.sum())
        if covered >= ratio * n:
            break
    return mask


def sample_mask(strategy, seq, ratio, rng) -> MaskSpec:
    """Draw one mask over the notes of `seq` for the given strategy.

    `seq` is an AlignedSequence (bar_index/beat_index drive the
    structural strategies). For every strategy except FULL at least one
    note stays unmasked whenever n >= 2.
    """
    n = len(seq)
    if n == 0:
        raise EmptySequence("cannot mask an empty sequence")
    strategy = Strategy(strategy)

    if strategy is Strategy.FULL:
        return MaskSpec(np.ones(n, dtype=bool), strategy, 1.0)

    k = int(round(ratio * n))
    k = max(1, min(k, n - 1)) if n >= 2 else min(k, n)

    if strategy is Strategy.RANDOM_NOTES:
        mask = np.zeros(n, dtype=bool)
        mask[rng.choice(n, size=k, replace=False)] = True
    elif strategy is Strategy.SEGMENT:
        start = int(rng.integers(0, n - k + 1))
        mask = np.zeros(n, dtype=bool)
        mask[start : start + k] = True
    elif strategy is Strategy.END_OF_SEQUENCE:
        mask = np.zeros(n, dtype=bool)
        mask[n - k :] = True
    elif strategy is Strategy.BEATS:
        mask = _unit_mask(np.asarray(seq.beat_index), ratio, rng, n)
    elif strategy is Strategy.BARS:
        mask = _unit_mask(np.asarray(seq.bar_index), ratio, rng, n)
    else:
        raise ValueError(f"unknown strategy {strategy}")
    return MaskSpec(mask, strategy, ratio)


def batch_mask_plan(batch_size, rng):
    """Strategy per batch element: half FULL, half drawn from the others."""
    n_full = batch_size // 2
    plan = [Strategy.FULL] * n_full
    for _ in range(batch_size - n_full):
        plan.append(PARTIAL_STRATEGIES[int(rng.integers(0, len(PARTIAL_STRATEGIES)))])
    return plan
