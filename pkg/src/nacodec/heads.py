"""Auxiliary heads trained against the latent space, and their targets.

A small velocity transformer regularises the latents toward generative
tractability, linear probes regress perceptual features, and a critic
scores (latent, audio-feature, text) triplets for cross-modal alignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp
from . import tensor as tc
from .nn import Linear, MaskSpec, Net, TransformerStack
from .tensor import Tensor

FULL_ATTENTION = MaskSpec("sliding_window", window=1 << 20)


def time_features(t: float, n: int = 16) -> np.ndarray:
    """Sinusoidal embedding of a scalar timestep in [0, 1]."""
    half = n // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class VelocityNet(Net):
    """Unconditional velocity predictor v(z_t, t) over latent sequences."""

    def __init__(self, rng, latent_dim, dim=48, depth=2, heads=2, t_feats=16, dtype=np.float32):
        super().__init__(dtype)
        self.t_feats = t_feats
        self.in_proj = self.child("in_proj", Linear(rng, latent_dim, dim, dtype=dtype))
        self.t_proj = self.child("t_proj", Linear(rng, t_feats, dim, dtype=dtype))
        self.stack = self.child(
            "stack",
            TransformerStack(rng, dim, depth, heads, FULL_ATTENTION, differential=False, dtype=dtype),
        )
        self.out_proj = self.child("out_proj", Linear(rng, dim, latent_dim, dtype=dtype))

    def __call__(self, z_t: Tensor, t: float) -> Tensor:
        seq = self.in_proj(tc.transpose(z_t, (1, 0)))
        temb = self.t_proj(Tensor(time_features(t, self.t_feats)[None, :].astype(self.dtype.name)))
        seq = seq + temb
        seq = self.stack(seq, np.arange(seq.shape[0]))
        return tc.transpose(self.out_proj(seq), (1, 0))


class Regressor(Net):
    """Per-frame linear probe from the latent to a feature target."""

    def __init__(self, rng, latent_dim, n_bins, dtype=np.float32):
        super().__init__(dtype)
        self.proj = self.child("proj", Linear(rng, latent_dim, n_bins, dtype=dtype))

    def __call__(self, z: Tensor) -> Tensor:
        return tc.transpose(self.proj(tc.transpose(z, (1, 0))), (1, 0))


class Critic(Net):
    """Scores whether latent, audio features and a text embedding match.

    The three modalities are projected to a shared width, concatenated
    behind a learnable scoring token, and the token's output is read out.
    """

    def __init__(self, rng, latent_dim, audio_dim, text_dim, dim=32, depth=2, heads=2, dtype=np.float32):
        super().__init__(dtype)
        self.proj_latent = self.child("proj_latent", Linear(rng, latent_dim, dim, dtype=dtype))
        self.proj_audio = self.child("proj_audio", Linear(rng, audio_dim, dim, dtype=dtype))
        self.proj_text = self.child("proj_text", Linear(rng, text_dim, dim, dtype=dtype))
        self.token = self.param("token", rng.standard_normal(dim) * 0.02)
        self.stack = self.child(
            "stack",
            TransformerStack(rng, dim, depth, heads, FULL_ATTENTION, differential=False, dtype=dtype),
        )
        self.head = self.child("head", Linear(rng, dim, 1, dtype=dtype))

    def __call__(self, z: Tensor, audio_feats: Tensor, text_emb: Tensor) -> Tensor:
        parts = [
            tc.reshape(self.token, (1, -1)),
            self.proj_latent(tc.transpose(z, (1, 0))),
            self.proj_audio(tc.transpose(audio_feats, (1, 0))),
            self.proj_text(tc.reshape(text_emb, (1, -1))),
        ]
        seq = tc.concat(parts, axis=0)
        seq = self.stack(seq, np.arange(seq.shape[0]))
        return tc.reshape(self.head(seq[0:1]), ())


# ---------------------------------------------------------------------------
# regression / critic targets (plain arrays; targets carry no gradient)


@dataclass(frozen=True)
class TargetConfig:
    """Feature targets for the semantic probes."""

    sample_rate: int
    chroma_bins: int = 128
    chroma_fft: int = 8192
    chroma_octaves: tuple = ((1.0, 1.0), (5.0, 1.5), (9.0, 1.0))
    ild_bands: int = 32
    ild_fft: int = 1024

    @property
    def n_targets(self) -> int:
        return len(self.chroma_octaves) + 1

    def target_bins(self) -> list[int]:
        return [self.chroma_bins] * len(self.chroma_octaves) + [self.ild_bands]


def regression_targets(audio: np.ndarray, cfg: TargetConfig) -> list[np.ndarray]:
    """Chromagrams at three octave bands plus per-band level difference.

    ``audio`` is (channels, n); mono audio gets a zero level-difference
    target.  Everything is computed in float64 numpy (no gradients).
    """
    audio = np.atleast_2d(np.asarray(audio, dtype=np.float64))
    mid = audio.mean(axis=0)
    spec = dsp.stft(Tensor(mid), dsp.StftConfig(cfg.chroma_fft))
    mag = spec.magnitude().data
    out = []
    for centre, width in cfg.chroma_octaves:
        bank = dsp.chroma_bank(cfg.chroma_bins, cfg.chroma_fft, cfg.sample_rate, centre, width)
        out.append(bank @ mag)

    ild_cfg = dsp.StftConfig(cfg.ild_fft)
    mel = dsp.mel_bank(ild_cfg.bins, cfg.ild_bands, cfg.sample_rate)
    if audio.shape[0] == 2:
        mag_l = dsp.stft(Tensor(audio[0]), ild_cfg).magnitude().data
        mag_r = dsp.stft(Tensor(audio[1]), ild_cfg).magnitude().data
        eps = 1e-8
        ild = 20.0 * np.log10((mel @ mag_l + eps) / (mel @ mag_r + eps))
    else:
        frames = dsp.stft(Tensor(audio[0]), ild_cfg).shape[1]
        ild = np.zeros((cfg.ild_bands, frames))
    out.append(ild)
    return out


def wavelet_features(audio: np.ndarray, frames: int, levels: int = 8) -> np.ndarray:
    """Critic-side audio features: log1p band envelopes of the wavelet
    decomposition of the mid channel, (levels+1, frames)."""
    audio = np.atleast_2d(np.asarray(audio, dtype=np.float64))
    mid = audio.mean(axis=0)
    bands = dsp.cdf97_wavelet(Tensor(mid), levels)
    rows = [dsp.resample_nearest(np.log1p(np.abs(b.data))[None, :], frames)[0] for b in bands]
    return np.stack(rows)


class AuxHeads(Net):
    """Velocity model, semantic regressors and contrastive critic."""

    def __init__(self, rng, latent_dim, targets: TargetConfig, text_dim=32,
                 velocity_dim=48, velocity_depth=2, critic_dim=32, critic_depth=2,
                 wavelet_levels=8, dtype=np.float32):
        super().__init__(dtype)
        self.targets = targets
        self.wavelet_levels = wavelet_levels
        self.velocity = self.child(
            "velocity", VelocityNet(rng, latent_dim, velocity_dim, velocity_depth, dtype=dtype)
        )
        self.regressors = [
            self.child(f"regressor{i}", Regressor(rng, latent_dim, bins, dtype=dtype))
            for i, bins in enumerate(targets.target_bins())
        ]
        self.critic = self.child(
            "critic",
            Critic(rng, latent_dim, wavelet_levels + 1, text_dim, critic_dim, critic_depth, dtype=dtype),
        )


def build_aux_heads(rng, latent_dim: int, targets: TargetConfig, **kw) -> AuxHeads:
    return AuxHeads(rng, latent_dim, targets, **kw)
