"""Versioned binary checkpoints.

Layout: the magic line ``SYMUPE-CKPT v1``, one line of JSON holding the
model config, then one record per parameter: a text header line
``<name> <dim0> <dim1> ...`` followed by the raw little-endian float32
values in row-major order. The loader rebuilds the model from the config
and validates every tensor shape against it.
"""

from __future__ import annotations

import json

import numpy as np

from ..errors import ParseError, ShapeError
from .model import ModelConfig, PianoFlow

MAGIC = b"SYMUPE-CKPT v1"


def save(model: PianoFlow, path):
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(json.dumps(model.config.to_dict()).encode() + b"\n")
        for name, p in model.named_params().items():
            dims = " ".join(str(d) for d in p.data.shape)
            fh.write(f"{name} {dims}".rstrip().encode() + b"\n")
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load(path) -> PianoFlow:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != MAGIC:
            raise ParseError(f"bad checkpoint magic {magic!r}", offset=0)
        config = ModelConfig.from_dict(json.loads(fh.readline().decode()))
        model = PianoFlow(config, seed=0)
        params = model.named_params()
        seen = set()
        while True:
            header = fh.readline()
            if not header:
                break
            parts = header.decode().split()
            name, dims = parts[0], tuple(int(d) for d in parts[1:])
            raw = fh.read(4 * int(np.prod(dims, dtype=np.int64)))
            if name not in params:
                raise ShapeError(f"unknown parameter {name!r} in checkpoint")
            p = params[name]
            if p.data.shape != dims:
                raise ShapeError(f"{name}: checkpoint shape {dims} != model shape {p.data.shape}")
            p.data = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(config.np_dtype)
            seen.add(name)
        missing = set(params) - seen
        if missing:
            raise ShapeError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
    return model
