"""Seeded synthetic audio: tones, chirps, filtered noise, AM harmonics.

Items are stereo with randomised level differences and inter-channel
delays so every loss term (stereo views, chroma, level-difference
regression) sees real signal.  Each (seed, step, index) triple maps to a
fixed item, so data order is reproducible across runs and processes.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.signal import lfilter

from . import dsp


def _rng_for(*entropy) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def _stereo_image(rng, left: np.ndarray):
    ild_db = rng.uniform(-6.0, 6.0)
    delay = int(rng.integers(0, 4))
    gain = 10.0 ** (-ild_db / 20.0)
    right = gain * np.roll(left, delay)
    return np.stack([left, right]), ild_db, delay


def synth_item(rng: np.random.Generator, n: int, sample_rate: int):
    """One stereo item plus a short caption used for text embeddings."""
    kind = rng.choice(["tones", "chirp", "noise", "am"])
    t = np.arange(n) / sample_rate
    nyq = sample_rate / 2.0
    if kind == "tones":
        k = int(rng.integers(1, 4))
        freqs = np.exp(rng.uniform(np.log(80.0), np.log(0.8 * nyq), k))
        amps = rng.uniform(0.2, 1.0, k)
        left = sum(a * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) for f, a in zip(freqs, amps))
        text = "tones " + " ".join(f"{f:.0f}" for f in freqs)
    elif kind == "chirp":
        f0 = np.exp(rng.uniform(np.log(100.0), np.log(0.2 * nyq)))
        octaves = min(rng.uniform(2.0, 6.5), np.log2(0.9 * nyq / f0))
        amp_db = rng.uniform(-24.0, -6.0)
        buf = dsp.chirp(n / sample_rate, sample_rate, f0, octaves, amp_db)
        left = buf.samples[0][:n]
        text = f"chirp {f0:.0f}Hz {octaves:.1f}oct"
    elif kind == "noise":
        f_c = np.exp(rng.uniform(np.log(200.0), np.log(0.7 * nyq)))
        r = 0.98
        w0 = 2 * np.pi * f_c / sample_rate
        b = [1.0 - r]
        a = [1.0, -2 * r * np.cos(w0), r * r]
        left = lfilter(b, a, rng.standard_normal(n))
        text = f"noise {f_c:.0f}Hz"
    else:  # am harmonics
        f0 = np.exp(rng.uniform(np.log(80.0), np.log(nyq / 8.0)))
        n_h = int(rng.integers(2, 5))
        left = sum(np.sin(2 * np.pi * f0 * (h + 1) * t) / (h + 1) for h in range(n_h))
        f_m = rng.uniform(1.0, 8.0)
        left = left * (1.0 + 0.6 * np.sin(2 * np.pi * f_m * t))
        text = f"am {f0:.0f}Hz x{n_h}"
    peak = np.abs(left).max()
    if peak > 0:
        left = left / peak * 10.0 ** (rng.uniform(-20.0, -6.0) / 20.0)
    stereo, ild, delay = _stereo_image(rng, left)
    text += f" ild={ild:.1f} d={delay}"
    return stereo.astype(np.float32), text


class ToyDataSource:
    """Deterministic batches drawn from a fixed pool of synthetic items.

    A finite pool (reused across steps) stands in for a training set;
    validation items come from a disjoint seed range.
    """

    VAL_OFFSET = 1 << 30

    def __init__(self, seed: int, segment_samples: int, sample_rate: int, pool_size: int = 48):
        self.seed = seed
        self.n = segment_samples
        self.sample_rate = sample_rate
        self.pool_size = pool_size

    def item(self, key: int, n: int | None = None):
        rng = _rng_for(self.seed, key)
        return synth_item(rng, n or self.n, self.sample_rate)

    def batch(self, step: int, size: int):
        return [self.item((step * size + i) % self.pool_size) for i in range(size)]

    def val_items(self, count: int, n: int | None = None):
        return [self.item(self.VAL_OFFSET + i, n) for i in range(count)]


class HashTextEmbedder:
    """Deterministic stand-in for a text encoder: caption -> fixed vector."""

    def __init__(self, dim: int = 32):
        self.dim = dim

    def __call__(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        rng = np.random.default_rng(np.frombuffer(digest[:16], dtype=np.uint64))
        return rng.standard_normal(self.dim).astype(np.float32)
