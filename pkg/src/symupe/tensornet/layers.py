"""Building blocks of the vector-field transformer.

All layers hold their parameters as `Tensor` objects and expose them
through `named_params()` so the model can assemble a flat parameter map
for the optimizer and the checkpoint writer.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from . import tensor as T
from .tensor import Tensor

SIN_EMBED_MAX_FREQ = 1.0e4


def sinusoidal_embed(values, dim):
    """Map real values to interleaved sin/cos features.

    Frequencies are geometrically spaced from 1 to SIN_EMBED_MAX_FREQ so
    that nearby values stay close (smooth in the input) while fine value
    differences are still resolved by the fast components. Returns a plain
    ndarray of shape values.shape + (dim,); the embedding has no
    parameters.
    """
    if dim % 2 != 0:
        raise ShapeError("sinusoidal embedding dim must be even")
    values = np.asarray(values, dtype=np.float64)
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = SIN_EMBED_MAX_FREQ ** (np.arange(half) / (half - 1))
    angles = values[..., None] * freqs
    out = np.empty(values.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def rope_angles(positions, head_dim, base=10000.0):
    """cos/sin tables for rotary position encoding at integer positions."""
    positions = np.asarray(positions, dtype=np.float64)
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half) / half)
    angles = positions[..., None] * inv_freq
    return np.cos(angles), np.sin(angles)


def rope_apply(q, k, positions):
    """Rotate query/key channel pairs by position-dependent angles.

    Shapes: q, k are (..., n, head_dim) with the position axis second to
    last. Dot products between rotated vectors depend only on relative
    position.
    """
    head_dim = q.shape[-1]
    if head_dim % 2 != 0:
        raise ShapeError("rope requires an even head dim")
    cos, sin = rope_angles(positions, head_dim)
    if isinstance(q, Tensor) or isinstance(k, Tensor):
        return T.rope_rotate(q, cos, sin), T.rope_rotate(k, cos, sin)
    q = Tensor(q)
    k = Tensor(k)
    return T.rope_rotate(q, cos, sin).data, T.rope_rotate(k, cos, sin).data


class Layer:
    """Minimal parameter-container base."""

    def named_params(self):
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Layer):
                for sub, p in value.named_params().items():
                    out[f"{name}.{sub}"] = p
        return out


class Linear(Layer):
    """y = x W (+ b). Bias off by default; only AdaLN maps use one."""

    def __init__(self, d_in, d_out, rng, bias=False, scale=None, zero=False, dtype=np.float32):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            std = scale if scale is not None else (1.0 / np.sqrt(d_in))
            w = rng.normal(0.0, std, size=(d_in, d_out))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = None
        if bias:
            self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class Embedding(Layer):
    def __init__(self, count, dim, rng, std=0.02, dtype=np.float32):
        self.weight = Tensor(rng.normal(0.0, std, size=(count, dim)).astype(dtype), requires_grad=True)

    def __call__(self, ids):
        return T.embedding(self.weight, ids)


class AdaLayerNorm(Layer):
    """LayerNorm whose scale/shift are linear in the flow-time embedding.

    The modulation map is zero-initialized, so an untrained layer behaves
    as a plain parameter-free LayerNorm.
    """

    def __init__(self, dim, time_dim, rng, dtype=np.float32):
        self.mod = Linear(time_dim, 2 * dim, rng, bias=True, zero=True, dtype=dtype)
        self.dim = dim

    def __call__(self, h, t_emb):
        # t_emb: (B, time_dim) or (time_dim,); h: (..., n, dim)
        mod = self.mod(t_emb)  # (B, 2*dim)
        gamma = mod[..., : self.dim]
        beta = mod[..., self.dim :]
        if isinstance(h, Tensor) and h.data.ndim == 3:
            gamma = T.reshape(gamma, (gamma.shape[0], 1, self.dim))
            beta = T.reshape(beta, (beta.shape[0], 1, self.dim))
        normed = T.layer_norm(h)
        return T.add(T.mul(normed, T.add(gamma, 1.0)), beta)


class MQAttention(Layer):
    """Bidirectional attention with one shared key/value head.

    Queries use `heads` heads of size dim/heads; keys and values are
    projected once and broadcast across the query heads. Rotary position
    encoding is applied to queries and keys before the dot product.
    """

    def __init__(self, dim, heads, rng, dtype=np.float32):
        if dim % heads != 0:
            raise ShapeError("model dim must be divisible by the head count")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng, dtype=dtype)
        self.wk = Linear(dim, self.head_dim, rng, dtype=dtype)
        self.wv = Linear(dim, self.head_dim, rng, dtype=dtype)
        self.wo = Linear(dim, dim, rng, dtype=dtype)

    def __call__(self, x, positions):
        # x: (B, n, dim)
        b, n, dim = x.shape
        h, hd = self.heads, self.head_dim
        q = self.wq(x)  # (B, n, dim)
        k = self.wk(x)  # (B, n, hd)
        v = self.wv(x)  # (B, n, hd)

        q = T.transpose(T.reshape(q, (b, n, h, hd)), (0, 2, 1, 3))  # (B, h, n, hd)
        k = T.reshape(k, (b, 1, n, hd))
        v = T.reshape(v, (b, 1, n, hd))

        q, k = rope_apply(q, k, np.arange(n))

        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))  # (B, h, n, n)
        scores = T.mul(scores, 1.0 / np.sqrt(hd))
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v)  # (B, h, n, hd)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, dim))
        return self.wo(ctx)


class SwiGLU(Layer):
    """(silu(x W_gate) * x W_val) W_out with no biases."""

    def __init__(self, dim, hidden, rng, dtype=np.float32):
        self.w_gate = Linear(dim, hidden, rng, dtype=dtype)
        self.w_val = Linear(dim, hidden, rng, dtype=dtype)
        self.w_out = Linear(hidden, dim, rng, dtype=dtype)

    def __call__(self, x):
        return self.w_out(T.mul(T.silu(self.w_gate(x)), self.w_val(x)))


class Block(Layer):
    """Pre-norm transformer block: AdaLN -> attention, AdaLN -> SwiGLU."""

    def __init__(self, dim, heads, ff_hidden, time_dim, rng, dtype=np.float32):
        self.norm_attn = AdaLayerNorm(dim, time_dim, rng, dtype=dtype)
        self.attn = MQAttention(dim, heads, rng, dtype=dtype)
        self.norm_ffn = AdaLayerNorm(dim, time_dim, rng, dtype=dtype)
        self.ffn = SwiGLU(dim, ff_hidden, rng, dtype=dtype)

    def __call__(self, h, t_emb, positions):
        h = T.add(h, self.attn(self.norm_attn(h, t_emb), positions))
        h = T.add(h, self.ffn(self.norm_ffn(h, t_emb)))
        return h
