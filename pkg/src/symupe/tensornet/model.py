"""The vector-field transformer that predicts performance-feature velocity.

Inputs per note: the noisy performance features, the known-context
performance features (masked entries replaced by a learned MASK vector),
and the score features. Each real-valued feature is lifted with a
sinusoidal embedding and a linear projection; sequence boundaries are
learned SOS/EOS tokens; notes filled in by alignment cleanup carry a
learned binary flag embedding. The flow-time embedding modulates every
adaptive layer norm. Optional control (score tempo/dynamics tokens, local
performance tempo tokens, per-bar text embeddings) is projected and added
to the hidden states before the middle layer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from . import tensor as T
from .layers import AdaLayerNorm, Block, Embedding, Layer, Linear, sinusoidal_embed
from .tensor import Tensor

N_SCORE_FEATURES = 4
N_PERF_FEATURES = 4


@dataclass
class ModelConfig:
    layers: int = 8
    dim: int = 512
    heads: int = 8
    ff_dims: tuple = (512, 1536)
    feat_emb_dim: int = 64
    time_emb_dim: int = 64
    cond_layer_index: int = 0  # 1-based; 0 means layers/2 + 1
    text_emb_dim: int = 768
    use_control: bool = False
    tempo_vocab: int = 164
    velocity_vocab: int = 131
    max_seq_len: int = 256
    dtype: str = "fp32"

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ShapeError("dim must be divisible by heads")
        if self.cond_layer_index == 0:
            self.cond_layer_index = self.layers // 2 + 1
        self.ff_dims = tuple(self.ff_dims)

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "fp64" else np.float32

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["ff_dims"] = list(self.ff_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class ControlBlock(Layer):
    """Embeds the three control channels and projects them to model dim.

    A dropped channel is replaced by its learned null embedding, so the
    fully dropped control equals the unconditional path by construction.
    """

    def __init__(self, cfg: ModelConfig, rng):
        f = cfg.feat_emb_dim
        dt = cfg.np_dtype
        self.emb_score_tempo = Embedding(cfg.tempo_vocab, f, rng, dtype=dt)
        self.emb_score_vel = Embedding(cfg.velocity_vocab, f, rng, dtype=dt)
        self.emb_perf_tempo = Embedding(cfg.tempo_vocab, f, rng, dtype=dt)
        self.null_score = Tensor(rng.normal(0.0, 0.02, size=2 * f).astype(dt), requires_grad=True)
        self.null_perf = Tensor(rng.normal(0.0, 0.02, size=f).astype(dt), requires_grad=True)
        self.null_text = Tensor(rng.normal(0.0, 0.02, size=cfg.text_emb_dim).astype(dt), requires_grad=True)
        self.proj = Linear(3 * f + cfg.text_emb_dim, cfg.dim, rng, dtype=dt)
        self._f = f
        self._text_dim = cfg.text_emb_dim
        self._dtype = dt

    def _bcast(self, vec, b, n):
        return T.reshape(vec, (1, 1, vec.shape[0]))

    def assemble(self, control, b, n):
        """(B, n, dim) control injection. `control=None` means all-null."""
        f = self._f
        if control is None:
            score = self._bcast(self.null_score, b, n)
            perf = self._bcast(self.null_perf, b, n)
            text = self._bcast(self.null_text, b, n)
            score = T.mul(score, np.ones((b, n, 1), dtype=self._dtype))
            perf = T.mul(perf, np.ones((b, n, 1), dtype=self._dtype))
            text = T.mul(text, np.ones((b, n, 1), dtype=self._dtype))
        else:
            st = self.emb_score_tempo(np.asarray(control.score_tempo))
            sv = self.emb_score_vel(np.asarray(control.score_velocity))
            score = T.concat([st, sv], axis=-1)
            drop = np.asarray(control.drop_score, dtype=bool).reshape(b, 1, 1)
            score = T.where_const(np.broadcast_to(drop, (b, n, 2 * f)), self._bcast(self.null_score, b, n), score)

            perf = self.emb_perf_tempo(np.asarray(control.perf_tempo))
            drop = np.asarray(control.drop_perf_tempo, dtype=bool).reshape(b, 1, 1)
            perf = T.where_const(np.broadcast_to(drop, (b, n, f)), self._bcast(self.null_perf, b, n), perf)

            text = Tensor(np.asarray(control.text_emb, dtype=self._dtype))
            drop = np.asarray(control.drop_text, dtype=bool).reshape(b, 1, 1)
            text = T.where_const(np.broadcast_to(drop, (b, n, self._text_dim)), self._bcast(self.null_text, b, n), text)
        return self.proj(T.concat([score, perf, text], axis=-1))


class PianoFlow(Layer):
    """Parameter store plus the forward pass of the vector-field model."""

    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        cfg = config
        f = cfg.feat_emb_dim
        dt = cfg.np_dtype

        self.proj_data = Linear((N_SCORE_FEATURES + N_PERF_FEATURES) * f, cfg.dim, rng, dtype=dt)
        self.proj_xt = Linear(N_PERF_FEATURES * f, cfg.dim, rng, dtype=dt)
        self.mask_emb = Tensor(rng.normal(0.0, 0.02, size=N_PERF_FEATURES * f).astype(dt), requires_grad=True)
        self.sos_emb = Tensor(rng.normal(0.0, 0.02, size=cfg.dim).astype(dt), requires_grad=True)
        self.eos_emb = Tensor(rng.normal(0.0, 0.02, size=cfg.dim).astype(dt), requires_grad=True)
        self.interp_emb = Embedding(2, cfg.dim, rng, dtype=dt)

        self.blocks = _BlockList(
            [Block(cfg.dim, cfg.heads, cfg.ff_dims[1], cfg.time_emb_dim, rng, dtype=dt) for _ in range(cfg.layers)]
        )
        self.final_norm = AdaLayerNorm(cfg.dim, cfg.time_emb_dim, rng, dtype=dt)
        # Zero-init head: the initial field prediction is exactly zero.
        self.head = Linear(cfg.dim, N_PERF_FEATURES, rng, zero=True, dtype=dt)
        self.control_block = ControlBlock(cfg, rng) if cfg.use_control else None

    # -- parameter bookkeeping ---------------------------------------------

    def named_params(self):
        out = super().named_params()
        return dict(sorted(out.items()))

    def param_count(self):
        return sum(p.size for p in self.named_params().values())

    def zero_grad(self):
        for p in self.named_params().values():
            p.zero_grad()

    # -- forward -------------------------------------------------------------

    def forward(self, x_t, x_ctx, y, t, mask, interpolated=None, control=None):
        """Predict the velocity field, shape (B, n, 4).

        x_t, x_ctx, y: (B, n, 4) float arrays (normalized features).
        t: scalar or (B,) flow times in [0, 1].
        mask: (B, n) boolean, True where the performance is to be predicted;
            masked context positions receive the MASK embedding.
        interpolated: optional (B, n) boolean flag for cleanup-filled notes.
        control: optional conditioning inputs; None runs the unconditional
            path, which is identical to every channel being dropped.
        """
        cfg = self.config
        dt = cfg.np_dtype
        x_t = np.asarray(x_t, dtype=dt)
        x_ctx = np.asarray(x_ctx, dtype=dt)
        y = np.asarray(y, dtype=dt)
        if x_t.ndim == 2:
            raise ShapeError("inputs must be batched: (B, n, 4)")
        if not (x_t.shape == x_ctx.shape == y.shape) or x_t.shape[-1] != N_PERF_FEATURES:
            raise ShapeError(f"feature arrays disagree: {x_t.shape}, {x_ctx.shape}, {y.shape}")
        b, n, _ = x_t.shape
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (b, n):
            raise ShapeError(f"mask shape {mask.shape} does not match ({b}, {n})")
        f = cfg.feat_emb_dim

        y_emb = sinusoidal_embed(y, f).reshape(b, n, -1).astype(dt)
        ctx_emb = sinusoidal_embed(x_ctx, f).reshape(b, n, -1).astype(dt)
        xt_emb = sinusoidal_embed(x_t, f).reshape(b, n, -1).astype(dt)

        ctx_block = T.where_const(
            np.broadcast_to(mask[..., None], ctx_emb.shape),
            T.reshape(self.mask_emb, (1, 1, -1)),
            Tensor(ctx_emb),
        )
        h = T.add(self.proj_data(T.concat([Tensor(y_emb), ctx_block], axis=-1)), self.proj_xt(Tensor(xt_emb)))
        if interpolated is None:
            interp_ids = np.zeros((b, n), dtype=np.int64)
        else:
            interp_ids = np.asarray(interpolated, dtype=np.int64)
        h = T.add(h, self.interp_emb(interp_ids))

        ones = np.ones((b, 1, 1), dtype=dt)
        sos = T.mul(T.reshape(self.sos_emb, (1, 1, -1)), ones)
        eos = T.mul(T.reshape(self.eos_emb, (1, 1, -1)), ones)
        h = T.concat([sos, h, eos], axis=1)  # (B, n+2, dim)

        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        t_emb = Tensor(sinusoidal_embed(t_arr, cfg.time_emb_dim).astype(dt))

        inject = None
        if self.control_block is not None:
            c = self.control_block.assemble(control, b, n)
            zero = Tensor(np.zeros((b, 1, cfg.dim), dtype=dt))
            inject = T.concat([zero, c, zero], axis=1)

        positions = np.arange(n + 2)
        for i, block in enumerate(self.blocks.items):
            if inject is not None and i + 1 == cfg.cond_layer_index:
                h = T.add(h, inject)
            h = block(h, t_emb, positions)
        h = self.final_norm(h, t_emb)
        v = self.head(h)
        return v[:, 1 : n + 1, :]

    def field(self, x_t, x_ctx, y, t, mask, interpolated=None, control=None):
        """forward() evaluated for sampling; returns a plain ndarray."""
        return self.forward(x_t, x_ctx, y, t, mask, interpolated, control).data


class _BlockList(Layer):
    def __init__(self, items):
        self.items = items

    def named_params(self):
        out = {}
        for i, item in enumerate(self.items):
            for sub, p in item.named_params().items():
                out[f"{i}.{sub}"] = p
        return out
