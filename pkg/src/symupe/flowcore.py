"""Optimal-transport conditional flow matching math.

The probability path between a noise draw x0 ~ N(0, I) and a data point
x1 is the straight line

    x_t = (1 - (1 - sigma_min) * t) * x0 + t * x1

whose generating vector field is constant in t:

    u = x1 - (1 - sigma_min) * x0

Training regresses the model field onto u on masked positions only.
All functions are pure numpy and thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

DEFAULT_SIGMA_MIN = 1e-4


@dataclass
class FlowSample:
    """One (noise, data, time) triple on the interpolation path."""

    x0: np.ndarray
    x1: np.ndarray
    t: float
    sigma_min: float = DEFAULT_SIGMA_MIN

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        if self.x0.shape != self.x1.shape:
            raise ShapeError(f"x0 {self.x0.shape} and x1 {self.x1.shape} differ")
        if self.sigma_min <= 0:
            raise DomainError("sigma_min must be positive")


def ot_interpolate(sample: FlowSample) -> np.ndarray:
    """Point on the linear path at time t."""
    if not 0.0 <= sample.t <= 1.0:
        raise DomainError(f"t={sample.t} outside [0, 1]")
    return (1.0 - (1.0 - sample.sigma_min) * sample.t) * sample.x0 + sample.t * sample.x1


def ot_target_field(sample: FlowSample) -> np.ndarray:
    """Target velocity along the path; independent of t."""
    return sample.x1 - (1.0 - sample.sigma_min) * sample.x0


def masked_cfm_loss(v_pred, u_target, mask):
    """Mean squared error over masked note-feature entries.

    Returns (loss, degenerate) where degenerate flags an all-false mask
    (loss is then 0 regardless of the prediction). The mean is taken over
    masked entries so the magnitude does not depend on the mask ratio.
    """
    v_pred = np.asarray(v_pred, dtype=np.float64)
    u_target = np.asarray(u_target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if v_pred.shape != u_target.shape:
        raise ShapeError(f"prediction {v_pred.shape} and target {u_target.shape} differ")
    if mask.shape != v_pred.shape[:-1]:
        raise ShapeError(f"mask {mask.shape} does not match notes {v_pred.shape[:-1]}")
    count = int(mask.sum()) * v_pred.shape[-1]
    if count == 0:
        return 0.0, True
    err = (v_pred - u_target) ** 2
    return float(err[mask].sum() / count), False


def guided_field(v_cond, v_uncond, alpha):
    """Classifier-free guidance: alpha * conditional + (1 - alpha) * unconditional.

    Computed as v_uncond + alpha * (v_cond - v_uncond) and special-cased
    at alpha in {0, 1} so the endpoint identities (and equal inputs) are
    exact to the bit.
    """
    v_cond = np.asarray(v_cond, dtype=np.float64)
    v_uncond = np.asarray(v_uncond, dtype=np.float64)
    if v_cond.shape != v_uncond.shape:
        raise ShapeError(f"fields {v_cond.shape} and {v_uncond.shape} differ")
    if alpha == 1.0:
        return v_cond.copy()
    if alpha == 0.0:
        return v_uncond.copy()
    return v_uncond + alpha * (v_cond - v_uncond)


def make_training_target(x1, mask, rng, sigma_min=DEFAULT_SIGMA_MIN):
    """Draw one training example: (x_t, x_ctx, u, t).

    t ~ U[0, 1] and x0 ~ N(0, I). x_ctx carries the clean features at
    unmasked positions and zeros at masked ones; the model replaces the
    zeroed entries with its MASK embedding.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x1.shape[:-1]:
        raise ShapeError(f"mask {mask.shape} does not match data {x1.shape}")
    t = float(rng.uniform(0.0, 1.0))
    x0 = rng.standard_normal(x1.shape)
    sample = FlowSample(x0=x0, x1=x1, t=t, sigma_min=sigma_min)
    x_t = ot_interpolate(sample)
    u = ot_target_field(sample)
    x_ctx = np.where(mask[..., None], 0.0, x1)
    return x_t, x_ctx, u, t
