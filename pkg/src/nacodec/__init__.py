"""Desk-scale neural audio codec lab.

A self-contained numpy stack: tape-based autodiff, differentiable DSP,
the full spectral/adversarial/latent loss suite, a transformer
resampling autoencoder, reconstruction metrics, and a seeded toy
training loop with an ablation harness.
"""

__version__ = "0.1.0"

from .audio import AudioBuffer, read_wav, write_wav
from .nn import Autoencoder, LatentSeq, ModelConfig
from .tensor import GradMap, Param, Tape, Tensor, finite_diff_check

__all__ = [
    "AudioBuffer",
    "Autoencoder",
    "GradMap",
    "LatentSeq",
    "ModelConfig",
    "Param",
    "Tape",
    "Tensor",
    "finite_diff_check",
    "read_wav",
    "write_wav",
    "__version__",
]
