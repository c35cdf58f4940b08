"""Multi-view discriminator ensembles (convolutional and transformer).

Each member maps stereo audio to a scalar score plus per-layer features
for the feature-matching objective.  Widths are toy-scale by default and
configurable; ensemble structure is fixed: 7 members for the
convolutional kind, 10 for the transformer kind.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp
from . import tensor as tc
from .nn import Linear, MaskSpec, ModelError, Net, Trb, TrbConfig, patch as patch_op
from .tensor import Tensor


class Conv2d(Net):
    """2-d convolution via gather + matmul; optionally weight-normalised."""

    def __init__(self, rng, c_in, c_out, kernel=(3, 3), stride=(1, 1), pad=(1, 1),
                 weight_norm=False, dtype=np.float32):
        super().__init__(dtype)
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.weight_norm = weight_norm
        fan_in = c_in * kernel[0] * kernel[1]
        w = rng.standard_normal((fan_in, c_out)) / np.sqrt(fan_in)
        if weight_norm:
            self.v = self.param("v", w)
            self.g = self.param("g", np.linalg.norm(w, axis=0))
        else:
            self.w = self.param("w", w)
        self.b = self.param("b", np.zeros(c_out))

    def _weight(self) -> Tensor:
        if not self.weight_norm:
            return self.w
        norm = tc.sqrt(tc.sum_(self.v * self.v, axis=0) + 1e-12)
        return self.v * (self.g / norm)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[0] != self.c_in:
            raise ModelError(f"conv2d expected ({self.c_in}, h, w), got {x.shape}")
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.pad
        x = tc.pad_zeros(x, ph, ph, axis=1)
        x = tc.pad_zeros(x, pw, pw, axis=2)
        _, h_p, w_p = x.shape
        h_out = (h_p - kh) // sh + 1
        w_out = (w_p - kw) // sw + 1
        if h_out < 1 or w_out < 1:
            raise ModelError(f"conv input {x.shape} smaller than kernel {self.kernel}")
        idx_h = (np.arange(h_out) * sh)[:, None] + np.arange(kh)
        idx_w = (np.arange(w_out) * sw)[:, None] + np.arange(kw)
        t = tc.transpose(x, (1, 2, 0))            # (Hp, Wp, C)
        t = tc.gather(t, idx_h)                   # (Hout, kh, Wp, C)
        t = tc.transpose(t, (2, 0, 1, 3))         # (Wp, Hout, kh, C)
        t = tc.gather(t, idx_w)                   # (Wout, kw, Hout, kh, C)
        t = tc.transpose(t, (2, 0, 3, 1, 4))      # (Hout, Wout, kh, kw, C)
        cols = tc.reshape(t, (h_out * w_out, kh * kw * self.c_in))
        out = tc.matmul(cols, self._weight()) + self.b
        return tc.transpose(tc.reshape(out, (h_out, w_out, self.c_out)), (2, 0, 1))


class ConvStack(Net):
    """Three-conv scoring stack shared by the convolutional members."""

    def __init__(self, rng, c_in, width, weight_norm=False, dtype=np.float32):
        super().__init__(dtype)
        self.conv1 = self.child("conv1", Conv2d(rng, c_in, width, stride=(2, 1), weight_norm=weight_norm, dtype=dtype))
        self.conv2 = self.child("conv2", Conv2d(rng, width, width, stride=(2, 2), weight_norm=weight_norm, dtype=dtype))
        self.conv3 = self.child("conv3", Conv2d(rng, width, 1, weight_norm=weight_norm, dtype=dtype))

    def __call__(self, image: Tensor):
        f1 = tc.leaky_relu(self.conv1(image))
        f2 = tc.leaky_relu(self.conv2(f1))
        score_map = self.conv3(f2)
        return tc.mean(score_map), [f1, f2, score_map]


def _stack_channels(parts: list[Tensor]) -> Tensor:
    return tc.concat([tc.reshape(p, (1,) + p.shape) for p in parts], axis=0)


class ConvStftDisc(Net):
    """Complex-spectrogram view: re/im of every channel as a 2-d image."""

    def __init__(self, rng, fft_size, channels=2, width=8, dtype=np.float32):
        super().__init__(dtype)
        self.cfg = dsp.StftConfig(fft_size)
        self.stack = self.child("stack", ConvStack(rng, 2 * channels, width, dtype=dtype))

    def __call__(self, audio: Tensor):
        parts = []
        for c in range(audio.shape[0]):
            spec = dsp.stft(audio[c], self.cfg)
            parts += [spec.real, spec.imag]
        return self.stack(_stack_channels(parts))


class PqmfDisc(Net):
    """Subband view over the (band, time) plane, weight-normalised convs."""

    def __init__(self, rng, n_bands=16, channels=2, width=8, dtype=np.float32):
        super().__init__(dtype)
        self.n_bands = n_bands
        self.stack = self.child("stack", ConvStack(rng, channels, width, weight_norm=True, dtype=dtype))

    def __call__(self, audio: Tensor):
        parts = [dsp.pqmf(audio[c], self.n_bands) for c in range(audio.shape[0])]
        return self.stack(_stack_channels(parts))


class ChromaConvDisc(Net):
    """Pitch-class view of the mid channel."""

    def __init__(self, rng, n_bins=48, fft_size=1024, sample_rate=8000, width=8, dtype=np.float32):
        super().__init__(dtype)
        self.n_bins = n_bins
        self.fft = dsp.StftConfig(fft_size)
        self.sample_rate = sample_rate
        self.stack = self.child("stack", ConvStack(rng, 1, width, dtype=dtype))

    def __call__(self, audio: Tensor):
        mid = tc.mean(audio, axis=0)
        mag = dsp.stft(mid, self.fft).magnitude()
        ch = dsp.chroma(mag, self.n_bins, 4.0, 4.0, sample_rate=self.sample_rate, fft_size=self.fft.fft_size)
        return self.stack(tc.reshape(ch, (1,) + ch.shape))


class TrbDisc(Net):
    """Resampling-transformer discriminator over a framewise view."""

    def __init__(self, rng, feat_dim, dim=16, depth=2, heads=2, stride=4, dtype=np.float32):
        super().__init__(dtype)
        self.in_proj = self.child("in_proj", Linear(rng, feat_dim, dim, dtype=dtype))
        self.trb = self.child(
            "trb",
            Trb(rng, TrbConfig("encoder", stride, depth, dim, heads,
                               attention=MaskSpec("sliding_window", window=8),
                               differential=False), dtype=dtype),
        )
        self.head = self.child("head", Linear(rng, dim, 1, dtype=dtype))

    def _frames(self, audio: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, audio: Tensor):
        seq = self.in_proj(self._frames(audio))
        out = self.trb(seq, None)
        pooled = tc.mean(out, axis=0, keepdims=True)
        return tc.reshape(self.head(pooled), ()), [seq, out]


class TrbStftDisc(TrbDisc):
    def __init__(self, rng, fft_size, channels=2, **kw):
        self.cfg = dsp.StftConfig(fft_size)
        self.channels = channels
        super().__init__(rng, feat_dim=2 * channels * self.cfg.bins, **kw)

    def _frames(self, audio: Tensor) -> Tensor:
        parts = []
        for c in range(audio.shape[0]):
            spec = dsp.stft(audio[c], self.cfg)
            parts += [spec.real, spec.imag]
        return tc.transpose(tc.concat(parts, axis=0), (1, 0))


class TrbChromaDisc(TrbDisc):
    def __init__(self, rng, octave_centre, octave_width, n_bins=48, fft_size=2048,
                 sample_rate=8000, **kw):
        self.n_bins = n_bins
        self.fft = dsp.StftConfig(fft_size)
        self.sample_rate = sample_rate
        self.octave = (octave_centre, octave_width)
        super().__init__(rng, feat_dim=n_bins, **kw)

    def _frames(self, audio: Tensor) -> Tensor:
        mid = tc.mean(audio, axis=0)
        mag = dsp.stft(mid, self.fft).magnitude()
        ch = dsp.chroma(mag, self.n_bins, self.octave[0], self.octave[1],
                        sample_rate=self.sample_rate, fft_size=self.fft.fft_size)
        return tc.transpose(ch, (1, 0))


class TrbPatchDisc(TrbDisc):
    """Raw waveform reshaped into prime-sized patches (avoids harmonic
    aliasing against the codec's own patch grid)."""

    def __init__(self, rng, patch_size, channels=2, **kw):
        self.patch_size = patch_size
        self.channels = channels
        super().__init__(rng, feat_dim=channels * patch_size, **kw)

    def _frames(self, audio: Tensor) -> Tensor:
        n = audio.shape[1]
        pad = (-n) % self.patch_size
        if pad:
            audio = tc.pad_zeros(audio, 0, pad, axis=1)
        return tc.transpose(patch_op(audio, self.patch_size), (1, 0))


@dataclass
class EnsembleConfig:
    kind: str = "convolutional"  # | "transformer"
    channels: int = 2
    sample_rate: int = 8000
    width: int = 8
    trb_dim: int = 16
    trb_depth: int = 2
    conv_ffts: tuple = (128, 256, 512, 1024, 2048)
    trb_ffts: tuple = (128, 1024, 4096)
    chroma_octaves: tuple = ((1.0, 1.0), (5.0, 1.5), (9.0, 1.0))
    patch_primes: tuple = (29, 443, 953)
    pqmf_bands: int = 16
    chroma_bins: int = 48


class DiscEnsemble(Net):
    def __init__(self, rng, cfg: EnsembleConfig, dtype=np.float32):
        super().__init__(dtype)
        self.kind = cfg.kind
        members: list[Net] = []
        if cfg.kind == "convolutional":
            for fft in cfg.conv_ffts:
                members.append(ConvStftDisc(rng, fft, cfg.channels, cfg.width, dtype=dtype))
            members.append(PqmfDisc(rng, cfg.pqmf_bands, cfg.channels, cfg.width, dtype=dtype))
            members.append(ChromaConvDisc(rng, cfg.chroma_bins, 1024, cfg.sample_rate, cfg.width, dtype=dtype))
        elif cfg.kind == "transformer":
            for fft in cfg.trb_ffts:
                members.append(TrbStftDisc(rng, fft, cfg.channels, dim=cfg.trb_dim,
                                           depth=cfg.trb_depth, dtype=dtype))
            for centre, width in cfg.chroma_octaves:
                members.append(TrbChromaDisc(rng, centre, width, cfg.chroma_bins,
                                             sample_rate=cfg.sample_rate, dim=cfg.trb_dim,
                                             depth=cfg.trb_depth, dtype=dtype))
            for prime in cfg.patch_primes:
                members.append(TrbPatchDisc(rng, prime, cfg.channels, dim=cfg.trb_dim,
                                            depth=cfg.trb_depth, dtype=dtype))
            members.append(PqmfDisc(rng, cfg.pqmf_bands, cfg.channels, cfg.width, dtype=dtype))
        else:
            raise ModelError(f"unknown ensemble kind {cfg.kind!r}")
        self.members = [self.child(f"disc{i}", m) for i, m in enumerate(members)]

    def __len__(self) -> int:
        return len(self.members)

    def forward(self, audio: Tensor):
        scores, features = [], []
        for m in self.members:
            s, f = m(audio)
            scores.append(s)
            features.append(f)
        return scores, features


def build_discriminators(rng, kind: str, toy_width: int = 8, **kw) -> DiscEnsemble:
    cfg = EnsembleConfig(kind=kind, width=toy_width, **kw)
    return DiscEnsemble(rng, cfg)
