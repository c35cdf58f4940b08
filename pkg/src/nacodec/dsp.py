"""Deterministic, differentiable signal transforms.

Everything here is a pure function of tensors (or plain arrays for the
constant projection matrices), so transforms can be evaluated in parallel
across channels and resolutions and always reproduce bit-identical output
for identical input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as tc
from .audio import AudioBuffer
from .tensor import Tensor

EPS_F32 = 1e-8
EPS_F64 = 1e-12


def eps_for(dtype) -> float:
    return EPS_F64 if np.dtype(dtype) == np.float64 else EPS_F32


class DspError(ValueError):
    pass


# ---------------------------------------------------------------------------
# STFT


@dataclass(frozen=True)
class StftConfig:
    """Analysis settings: Hann window, hop defaults to 75% overlap."""

    fft_size: int
    hop: int = 0
    centered: bool = True

    def __post_init__(self):
        if self.fft_size < 2:
            raise DspError(f"fft_size must be >= 2, got {self.fft_size}")
        if self.hop == 0:
            object.__setattr__(self, "hop", self.fft_size // 4)
        if self.hop <= 0:
            raise DspError("hop must be positive")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass
class ComplexSpec:
    """Paired real/imaginary spectrogram tensors of shape (bins, frames)."""

    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise DspError(f"real/imag shape mismatch {self.real.shape} vs {self.imag.shape}")

    @property
    def shape(self):
        return self.real.shape

    def magnitude(self) -> Tensor:
        """sqrt(re^2 + im^2 + eps^2): differentiable at silent bins."""
        e = eps_for(self.real.dtype)
        return tc.sqrt(self.real * self.real + self.imag * self.imag + e * e)

    def detach(self) -> "ComplexSpec":
        return ComplexSpec(self.real.detach(), self.imag.detach())


@lru_cache(maxsize=None)
def _hann(n: int, dtype_name: str) -> np.ndarray:
    # periodic Hann
    k = np.arange(n)
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)).astype(dtype_name)


def _reflect_index(pos: np.ndarray, n: int) -> np.ndarray:
    """Map extended positions onto [0, n) by reflection without edge repeat."""
    if n == 1:
        return np.zeros_like(pos)
    period = 2 * (n - 1)
    m = np.mod(pos, period)
    return np.where(m < n, m, period - m)


@lru_cache(maxsize=None)
def _frame_indices(length: int, fft_size: int, hop: int, centered: bool):
    if centered:
        starts = np.arange(0, length // hop + 1) * hop - fft_size // 2
    else:
        if length < fft_size:
            raise DspError("signal shorter than fft_size for uncentered framing")
        starts = np.arange(0, (length - fft_size) // hop + 1) * hop
    pos = starts[:, None] + np.arange(fft_size)[None, :]
    return _reflect_index(pos, length)


def stft(x: Tensor, cfg: StftConfig) -> ComplexSpec:
    """STFT of a single channel; differentiable w.r.t. the samples.

    Centered framing reflects the signal at its end points, so the frame
    count depends only on the length, not on transient alignment.
    """
    if isinstance(x, AudioBuffer):
        raise DspError("stft takes a single-channel tensor; index the buffer first")
    if x.ndim != 1:
        raise DspError(f"stft input must be 1-d, got shape {x.shape}")
    if x.size == 0:
        raise DspError("stft of empty signal")
    idx = _frame_indices(x.size, cfg.fft_size, cfg.hop, cfg.centered)
    frames = tc.gather(x, idx)  # (n_frames, fft)
    win = Tensor(_hann(cfg.fft_size, x.dtype.name))
    re, im = tc.rfft(frames * win)
    return ComplexSpec(re.T, im.T)


# ---------------------------------------------------------------------------
# K-weighting (two-stage pre-emphasis cascade, unity gain at 1 kHz)


def _shelf_coeffs(fs: float, gain_db: float, f0: float, q: float):
    a_lin = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * np.pi * f0 / fs
    alpha = np.sin(w0) / (2.0 * q)
    cosw = np.cos(w0)
    ra = np.sqrt(a_lin)
    b = np.array(
        [
            a_lin * ((a_lin + 1) + (a_lin - 1) * cosw + 2 * ra * alpha),
            -2 * a_lin * ((a_lin - 1) + (a_lin + 1) * cosw),
            a_lin * ((a_lin + 1) + (a_lin - 1) * cosw - 2 * ra * alpha),
        ]
    )
    a = np.array(
        [
            (a_lin + 1) - (a_lin - 1) * cosw + 2 * ra * alpha,
            2 * ((a_lin - 1) - (a_lin + 1) * cosw),
            (a_lin + 1) - (a_lin - 1) * cosw - 2 * ra * alpha,
        ]
    )
    return b / a[0], a / a[0]


def _highpass_coeffs(fs: float, f0: float, q: float):
    w0 = 2.0 * np.pi * f0 / fs
    alpha = np.sin(w0) / (2.0 * q)
    cosw = np.cos(w0)
    b = np.array([(1 + cosw) / 2, -(1 + cosw), (1 + cosw) / 2])
    a = np.array([1 + alpha, -2 * cosw, 1 - alpha])
    return b / a[0], a / a[0]


def biquad_response(sos: np.ndarray, freq_hz: float, fs: float) -> complex:
    """Complex frequency response of an sos cascade at one frequency."""
    z = np.exp(-2j * np.pi * freq_hz / fs)
    h = 1.0 + 0j
    for b0, b1, b2, a0, a1, a2 in sos:
        h *= (b0 + b1 * z + b2 * z * z) / (a0 + a1 * z + a2 * z * z)
    return h


@lru_cache(maxsize=None)
def k_weight_sos(sample_rate: int) -> np.ndarray:
    """High-shelf + high-pass cascade, rescaled to 0 dB at 1 kHz.

    The raw two-stage cascade sits ~0.44 dB above unity at 1 kHz; a single
    global gain keeps the response shape while pinning 1 kHz to 0 dB.
    """
    fs = float(sample_rate)
    if fs < 4000:
        raise DspError(f"sample rate {sample_rate} too low for pre-emphasis design")
    bs, as_ = _shelf_coeffs(fs, 3.999843853973347, 1681.974450955533, 0.7071752369554196)
    bh, ah = _highpass_coeffs(fs, 38.13547087602444, 0.5003270373238773)
    sos = np.array([np.concatenate([bs, as_]), np.concatenate([bh, ah])])
    norm = abs(biquad_response(sos, 1000.0, fs))
    if not np.isfinite(norm) or norm <= 0:
        raise DspError(f"unstable pre-emphasis design at {sample_rate} Hz")
    sos[0, :3] /= norm
    return sos


def k_weight(audio, sample_rate: int | None = None):
    """Perceptual pre-emphasis before spectral losses; differentiable.

    Accepts an AudioBuffer (returns an AudioBuffer) or a tensor of shape
    (..., n) with an explicit sample rate (returns a tensor).
    """
    if isinstance(audio, AudioBuffer):
        t = k_weight(audio.tensor(audio.samples.dtype), audio.sample_rate)
        return AudioBuffer(audio.sample_rate, t.data)
    if sample_rate is None:
        raise DspError("sample_rate required for tensor input")
    return tc.iir_filter(audio, k_weight_sos(int(sample_rate)))


# ---------------------------------------------------------------------------
# stereo views


def mid_side(audio):
    """Stereo -> (mid, side) with mid=(L+R)/2, side=(L-R)/2."""
    if isinstance(audio, AudioBuffer):
        if audio.channels != 2:
            raise DspError("mid_side requires stereo input")
        m = (audio.samples[0] + audio.samples[1]) * 0.5
        s = (audio.samples[0] - audio.samples[1]) * 0.5
        return AudioBuffer(audio.sample_rate, m), AudioBuffer(audio.sample_rate, s)
    if audio.ndim != 2 or audio.shape[0] != 2:
        raise DspError(f"mid_side requires shape (2, n), got {audio.shape}")
    left, right = audio[0], audio[1]
    return (left + right) * 0.5, (left - right) * 0.5


# ---------------------------------------------------------------------------
# mel / chroma projections


@lru_cache(maxsize=None)
def mel_bank(n_bins: int, n_mel: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-mel filters (n_mel, n_bins), rows L1-normalised."""
    if n_mel >= n_bins:
        raise DspError(f"n_mel={n_mel} must be < spectrogram bins {n_bins}")

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    nyq = sample_rate / 2.0
    edges = from_mel(np.linspace(to_mel(0.0), to_mel(nyq), n_mel + 2))
    freqs = np.linspace(0.0, nyq, n_bins)
    bank = np.zeros((n_mel, n_bins))
    for i in range(n_mel):
        lo, mid_, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (freqs - lo) / max(mid_ - lo, 1e-9)
        down = (hi - freqs) / max(hi - mid_, 1e-9)
        bank[i] = np.clip(np.minimum(up, down), 0.0, None)
        row = bank[i].sum()
        if row <= 0:
            raise DspError(f"mel filter {i} is empty; reduce n_mel")
        bank[i] /= row
    return bank


C1_HZ = 32.70319566257483  # octave index 0 reference (C1)


@lru_cache(maxsize=None)
def chroma_bank(
    n_bins: int,
    fft_size: int,
    sample_rate: int,
    octave_centre: float,
    octave_width: float,
) -> np.ndarray:
    """Pitch-class folding matrix (n_bins, fft_size//2+1).

    Each FFT bin splits linearly between its two nearest pitch-class bins
    and is weighted by a Gaussian over octave distance from
    ``octave_centre`` (std ``octave_width`` octaves).
    """
    if n_bins <= 0:
        raise DspError("chroma needs n_bins > 0")
    n_f = fft_size // 2 + 1
    bank = np.zeros((n_bins, n_f))
    freqs = np.arange(1, n_f) * sample_rate / fft_size
    octs = np.log2(freqs / C1_HZ)
    w = np.exp(-0.5 * ((octs - octave_centre) / octave_width) ** 2)
    pos = np.mod(octs, 1.0) * n_bins
    lo = np.floor(pos).astype(int) % n_bins
    hi = (lo + 1) % n_bins
    frac = pos - np.floor(pos)
    for k in range(freqs.size):
        bank[lo[k], k + 1] += w[k] * (1.0 - frac[k])
        bank[hi[k], k + 1] += w[k] * frac[k]
    return bank


def chroma(
    spec_mag: Tensor,
    n_bins: int,
    octave_centre: float,
    octave_width: float,
    *,
    sample_rate: int,
    fft_size: int,
) -> Tensor:
    """Chromagram (n_bins, frames) from a magnitude spectrogram."""
    bank = chroma_bank(n_bins, fft_size, int(sample_rate), float(octave_centre), float(octave_width))
    if spec_mag.shape[0] != bank.shape[1]:
        raise DspError(f"spectrogram has {spec_mag.shape[0]} bins, expected {bank.shape[1]}")
    return tc.matmul(Tensor(bank.astype(spec_mag.dtype)), spec_mag)


# ---------------------------------------------------------------------------
# PQMF analysis


@dataclass(frozen=True)
class PqmfDesign:
    n_bands: int
    taps: int
    beta: float
    cutoff: float
    filters: np.ndarray = field(repr=False)


def _pqmf_prototype(taps: int, cutoff: float, beta: float) -> np.ndarray:
    n = np.arange(taps + 1) - taps / 2.0
    with np.errstate(invalid="ignore", divide="ignore"):
        h = np.sin(np.pi * cutoff * n) / (np.pi * n)
    if taps % 2 == 0:
        h[taps // 2] = cutoff
    return h * np.kaiser(taps + 1, beta)


def _pqmf_flatness(n_bands: int, taps: int, cutoff: float, beta: float) -> float:
    # deviation of |H|^2 + |H(w - pi/M)|^2 from flat across the overlap band
    h = _pqmf_prototype(taps, cutoff, beta)
    w = np.linspace(0.0, np.pi / n_bands, 256)
    ks = np.arange(taps + 1)
    mag = lambda om: np.abs(np.exp(-1j * np.outer(om, ks)) @ h)
    a = mag(w) ** 2 + mag(np.abs(w - np.pi / n_bands)) ** 2
    return float(np.max(np.abs(a - a.mean())))


@lru_cache(maxsize=None)
def pqmf_design(n_bands: int, taps: int | None = None, beta: float = 10.06) -> PqmfDesign:
    """Cosine-modulated near-perfect-reconstruction analysis bank.

    Kaiser prototype (~100 dB), cutoff tuned on a fixed grid for power
    complementarity; filters carry a sqrt(n_bands) factor so that the
    critically-sampled subbands conserve signal energy.
    """
    if n_bands < 2 or n_bands & (n_bands - 1):
        raise DspError(f"n_bands must be a power of two >= 2, got {n_bands}")
    if taps is None:
        taps = 16 * n_bands - 2
    grid = np.linspace(0.7 / (2 * n_bands), 1.35 / (2 * n_bands), 120)
    flat = [_pqmf_flatness(n_bands, taps, c, beta) for c in grid]
    cutoff = float(grid[int(np.argmin(flat))])
    h = _pqmf_prototype(taps, cutoff, beta)
    n = np.arange(taps + 1)
    filters = np.zeros((n_bands, taps + 1))
    for k in range(n_bands):
        filters[k] = (
            2.0
            * np.sqrt(n_bands)
            * h
            * np.cos((2 * k + 1) * (np.pi / (2 * n_bands)) * (n - taps / 2) + (-1) ** k * np.pi / 4)
        )
    return PqmfDesign(n_bands, taps, beta, cutoff, filters)


def pqmf(x: Tensor, n_bands: int) -> Tensor:
    """Subband decomposition (n_bands, ceil(n/n_bands)); differentiable."""
    if x.ndim != 1:
        raise DspError(f"pqmf input must be 1-d, got {x.shape}")
    design = pqmf_design(n_bands)
    taps = design.taps
    n = x.size
    n_out = -(-n // n_bands)
    pad_front = taps // 2
    total = n_out * n_bands + taps
    x_pad = tc.pad_zeros(x, pad_front, total - pad_front - n)
    idx = (np.arange(n_out) * n_bands)[:, None] + np.arange(taps + 1)[None, :]
    frames = tc.gather(x_pad, idx)  # (n_out, taps+1)
    filt = Tensor(design.filters.T.astype(x.dtype))  # (taps+1, n_bands)
    return tc.matmul(frames, filt).T


# ---------------------------------------------------------------------------
# CDF 9/7 wavelet analysis (lifting)


CDF97_PREDICT1 = -1.586134342059924
CDF97_UPDATE1 = -0.052980118572961
CDF97_PREDICT2 = 0.882911075530934
CDF97_UPDATE2 = 0.443506852043971
CDF97_SCALE = 1.149604398860098


def _clip_gather(t: Tensor, idx: np.ndarray) -> Tensor:
    return tc.gather(t, np.clip(idx, 0, t.shape[0] - 1))


def _lift_once(a: Tensor):
    """One analysis level: (approx, detail) with edge-repeat extension."""
    n = a.shape[0]
    ns = (n + 1) // 2
    nd = n // 2
    s = tc.gather(a, np.arange(ns) * 2)
    d = tc.gather(a, np.arange(nd) * 2 + 1)
    i_d = np.arange(nd)
    i_s = np.arange(ns)
    d = d + CDF97_PREDICT1 * (_clip_gather(s, i_d) + _clip_gather(s, i_d + 1))
    s = s + CDF97_UPDATE1 * (_clip_gather(d, i_s - 1) + _clip_gather(d, np.minimum(i_s, nd - 1)))
    d = d + CDF97_PREDICT2 * (_clip_gather(s, i_d) + _clip_gather(s, i_d + 1))
    s = s + CDF97_UPDATE2 * (_clip_gather(d, i_s - 1) + _clip_gather(d, np.minimum(i_s, nd - 1)))
    return s * CDF97_SCALE, d * (1.0 / CDF97_SCALE)


def cdf97_wavelet(x: Tensor, levels: int) -> list[Tensor]:
    """Multi-level 9/7 biorthogonal analysis.

    Returns ``levels`` detail bands (finest first) followed by the final
    approximation.  Total coefficient count equals the input length; odd
    lengths put the extra sample in the approximation half.
    """
    if x.ndim != 1:
        raise DspError(f"wavelet input must be 1-d, got {x.shape}")
    if x.size < 2**levels:
        raise DspError(f"signal of {x.size} samples too short for {levels} levels")
    bands: list[Tensor] = []
    approx = x
    for _ in range(levels):
        approx, detail = _lift_once(approx)
        bands.append(detail)
    bands.append(approx)
    return bands


# ---------------------------------------------------------------------------
# chirp synthesis


def chirp(
    duration: float,
    sample_rate: int,
    f_start: float,
    octaves: float,
    amplitude_dbfs: float,
) -> AudioBuffer:
    """Constant-amplitude sweep, linear in log-frequency."""
    f_end = f_start * 2.0**octaves
    if f_end >= sample_rate / 2.0:
        raise DspError(f"sweep ends at {f_end:.0f} Hz, above Nyquist {sample_rate / 2:.0f} Hz")
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    rate = octaves / duration
    phase = 2.0 * np.pi * f_start * (2.0 ** (rate * t) - 1.0) / (rate * np.log(2.0))
    amp = 10.0 ** (amplitude_dbfs / 20.0)
    return AudioBuffer(sample_rate, (amp * np.sin(phase))[None, :])


def resample_nearest(mat: np.ndarray, n_out: int) -> np.ndarray:
    """Nearest-frame resampling of (bins, frames) targets along time."""
    n_in = mat.shape[-1]
    idx = np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1)
    return mat[..., idx]
