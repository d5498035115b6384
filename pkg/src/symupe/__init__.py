"""Symbolic piano performance rendering with masked conditional flow matching.

Modules:

- midi_io: Standard MIDI File parsing/writing and sustain resolution
- codec: score/performance features, aligned sequences, token codec
- maskgen: training and inpainting mask strategies
- flowcore: the optimal-transport flow-matching math
- tensornet: autodiff core, the vector-field transformer, optimizer
- conditioning: control channels and classifier-free-guidance dropout
- sampler: ODE integration, windowed rendering, inpainting
- evalsuite: objective performance metrics
- pipeline: augmentation, synthetic data, the training loop
- cli: the `symupe` command-line tool
"""

from . import codec, conditioning, evalsuite, flowcore, maskgen, midi_io, pipeline, sampler, tensornet

__version__ = "0.1.0"

__all__ = [
    "codec",
    "conditioning",
    "evalsuite",
    "flowcore",
    "maskgen",
    "midi_io",
    "pipeline",
    "sampler",
    "tensornet",
    "__version__",
]
