"""Adam with decoupled weight decay and the warmup/cosine learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import flowcore
from . import tensor as T
from .tensor import Tensor


@dataclass
class LrSchedule:
    """Linear warmup to the initial rate, then cosine decay to the final rate."""

    initial: float = 2e-4
    final: float = 1e-4
    warmup_steps: int = 1000
    total_steps: int = 300_000

    def at(self, step):
        # `step` counts optimizer updates starting at 1.
        if step <= self.warmup_steps:
            return self.initial * step / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        return self.final + (self.initial - self.final) * 0.5 * (1.0 + np.cos(np.pi * progress))


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a named parameter map."""

    params: dict
    schedule: LrSchedule = field(default_factory=LrSchedule)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step_count: int = 0

    def __post_init__(self):
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.step_count += 1
        lr = self.schedule.at(self.step_count)
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)
        return lr

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def masked_loss_tensor(v_pred: Tensor, u_target, mask):
    """Masked CFM objective on the autodiff graph.

    Mean of squared errors over masked note-feature entries; matches
    flowcore.masked_cfm_loss bit-for-bit on the same inputs.
    """
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum()) * v_pred.shape[-1]
    if count == 0:
        return None
    w = mask[..., None].astype(v_pred.dtype)
    err = T.square(v_pred - Tensor(np.asarray(u_target, dtype=v_pred.dtype)))
    return T.tsum(T.mul(err, w)) / count


def train_step(model, batch, optimizer, rng, sigma_min=flowcore.DEFAULT_SIGMA_MIN):
    """One optimization step of the masked flow-matching objective.

    `batch` is a dict with arrays y, x1 of shape (B, n, 4), mask (B, n),
    optional interpolated (B, n) and control inputs. Flow time and noise
    are drawn per sequence. Returns the scalar loss.
    """
    y = np.asarray(batch["y"], dtype=np.float64)
    x1 = np.asarray(batch["x1"], dtype=np.float64)
    mask = np.asarray(batch["mask"], dtype=bool)
    b = x1.shape[0]

    x_t = np.empty_like(x1)
    x_ctx = np.empty_like(x1)
    u = np.empty_like(x1)
    t = np.empty(b)
    for i in range(b):
        x_t[i], x_ctx[i], u[i], t[i] = flowcore.make_training_target(x1[i], mask[i], rng, sigma_min)
    # The model sees clean values at unmasked positions, mirroring how the
    # sampler holds known notes fixed during integration.
    x_t_in = np.where(mask[..., None], x_t, x1)

    optimizer.zero_grad()
    v = model.forward(x_t_in, x_ctx, y, t, mask, batch.get("interpolated"), batch.get("control"))
    loss = masked_loss_tensor(v, u, mask)
    if loss is None:
        return 0.0
    loss.backward()
    if not np.isfinite(loss.item()):
        return loss.item()
    optimizer.step()
    return loss.item()
