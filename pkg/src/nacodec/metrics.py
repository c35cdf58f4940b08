"""Reference/reconstruction quality metrics and the runtime benchmark.

All metrics are pure numpy (no gradients) and reduce mean over frames,
bins, channels, then resolutions.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import dsp
from .audio import AudioBuffer
from .tensor import Tensor

SI_SDR_CAP_DB = 100.0
STFT_METRIC_FFTS = (128, 256, 512, 1024, 2048, 4096)
MEL_METRIC_FFTS = (1024, 2048, 4096)
MEL_METRIC_BANDS = 64
CCPC_FFTS = (512, 1024, 2048, 4096)


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    si_sdr: float
    stft_log1p: float
    mel_log1p: float
    ccpc: float | None = None  # None for mono pairs
    rtf: float | None = None

    def row(self) -> dict:
        return {
            "si_sdr": self.si_sdr,
            "stft_log1p": self.stft_log1p,
            "mel_log1p": self.mel_log1p,
            "ccpc": "" if self.ccpc is None else self.ccpc,
        }


def _channels(x) -> np.ndarray:
    if isinstance(x, AudioBuffer):
        return np.asarray(x.samples, dtype=np.float64)
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def _spec_mag(x: np.ndarray, fft: int) -> np.ndarray:
    spec = dsp.stft(Tensor(x), dsp.StftConfig(fft))
    return np.hypot(spec.real.data, spec.imag.data)


def si_sdr(ref, est) -> float:
    """Scale-invariant signal-to-distortion ratio in dB, capped at +-100.

    Stereo input is averaged over channels.
    """
    r = _channels(ref)
    e = _channels(est)
    if r.shape != e.shape:
        raise MetricError(f"length/channel mismatch {r.shape} vs {e.shape}")
    vals = []
    for c in range(r.shape[0]):
        rc, ec = r[c], e[c]
        denom = float(rc @ rc)
        if denom == 0.0:
            raise MetricError("reference channel is all zero")
        alpha = float(ec @ rc) / denom
        target = alpha * rc
        resid = ec - target
        p_t = float(target @ target)
        p_r = float(resid @ resid)
        if p_r == 0.0:
            vals.append(SI_SDR_CAP_DB)
        elif p_t == 0.0:
            vals.append(-SI_SDR_CAP_DB)
        else:
            vals.append(float(np.clip(10.0 * np.log10(p_t / p_r), -SI_SDR_CAP_DB, SI_SDR_CAP_DB)))
    return float(np.mean(vals))


def stft_log1p(ref, est, fft_sizes=STFT_METRIC_FFTS) -> float:
    """Mean L1 between log(1+|X|) spectrograms over resolutions/channels."""
    r = _channels(ref)
    e = _channels(est)
    if r.shape != e.shape:
        raise MetricError(f"length/channel mismatch {r.shape} vs {e.shape}")
    per_res = []
    for fft in fft_sizes:
        per_ch = [
            np.abs(np.log1p(_spec_mag(r[c], fft)) - np.log1p(_spec_mag(e[c], fft))).mean()
            for c in range(r.shape[0])
        ]
        per_res.append(np.mean(per_ch))
    return float(np.mean(per_res))


def mel_log1p(ref, est, fft_sizes=MEL_METRIC_FFTS, n_mel=MEL_METRIC_BANDS, sample_rate=48000) -> float:
    """stft_log1p on mel projections, each rescaled by n_mel/F first."""
    r = _channels(ref)
    e = _channels(est)
    if r.shape != e.shape:
        raise MetricError(f"length/channel mismatch {r.shape} vs {e.shape}")
    per_res = []
    for fft in fft_sizes:
        bins = fft // 2 + 1
        bank = dsp.mel_bank(bins, n_mel, sample_rate)
        scale = n_mel / bins
        per_ch = []
        for c in range(r.shape[0]):
            mr = np.log1p(scale * (bank @ _spec_mag(r[c], fft)))
            me = np.log1p(scale * (bank @ _spec_mag(e[c], fft)))
            per_ch.append(np.abs(mr - me).mean())
        per_res.append(np.mean(per_ch))
    return float(np.mean(per_res))


def ccpc(ref, est, fft_sizes=CCPC_FFTS) -> float:
    """Cross-channel phase coherence in percent.

    Per resolution, the inter-channel products X_L conj(X_R) of both
    signals are normalised to unit phasors and compared; the comparison
    is weighted by the geometric mean of all four bin magnitudes.
    """
    r = _channels(ref)
    e = _channels(est)
    if r.shape[0] != 2 or e.shape[0] != 2:
        raise MetricError("ccpc requires stereo input")
    if r.shape != e.shape:
        raise MetricError(f"length mismatch {r.shape} vs {e.shape}")
    eps = 1e-12
    per_res = []
    for fft in fft_sizes:
        cfg = dsp.StftConfig(fft)
        sp = [dsp.stft(Tensor(x), cfg) for x in (r[0], r[1], e[0], e[1])]
        cx = [s.real.data + 1j * s.imag.data for s in sp]
        p_ref = cx[0] * np.conj(cx[1])
        p_est = cx[2] * np.conj(cx[3])
        u_ref = p_ref / (np.abs(p_ref) + eps)
        u_est = p_est / (np.abs(p_est) + eps)
        w = np.sqrt(np.abs(p_ref) * np.abs(p_est))
        coh = float(np.sum(w * np.real(u_ref * np.conj(u_est))) / (np.sum(w) + eps))
        per_res.append(coh)
    return float(100.0 * np.mean(per_res))


def evaluate_pair(ref, est, sample_rate: int) -> MetricReport:
    """All reconstruction metrics for one reference/estimate pair."""
    r = _channels(ref)
    e = _channels(est)
    c = ccpc(ref, est) if r.shape[0] == 2 and e.shape[0] == 2 else None
    return MetricReport(
        si_sdr=si_sdr(ref, est),
        stft_log1p=stft_log1p(ref, est),
        mel_log1p=mel_log1p(ref, est, sample_rate=sample_rate),
        ccpc=c,
    )


def rtf_bench(process, duration: float, sample_rate: int = 8000, repeats: int = 5,
              seed: int = 0) -> dict:
    """Real-time factor of a processing callable on synthetic audio.

    ``process`` maps a (2, n) float32 array to audio; one warmup run is
    excluded, then the median of duration/wall-clock over ``repeats``.
    """
    n = int(round(duration * sample_rate))
    rng = np.random.default_rng(seed)
    audio = (rng.standard_normal((2, n)) * 0.1).astype(np.float32)
    process(audio)  # warmup, excluded
    timings = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        process(audio)
        timings.append(time.perf_counter() - t0)
    rtf = duration / float(np.median(timings))
    return {"rtf": rtf, "timings": timings, "duration": duration, "repeats": repeats}


def write_metric_csv(path, rows: list[tuple[str, MetricReport]]) -> None:
    """Per-file rows plus an aggregate row of column means."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "si_sdr", "stft_log1p", "mel_log1p", "ccpc"])
        for name, rep in rows:
            r = rep.row()
            writer.writerow([name, r["si_sdr"], r["stft_log1p"], r["mel_log1p"], r["ccpc"]])
        if rows:
            agg = {}
            for key in ("si_sdr", "stft_log1p", "mel_log1p"):
                agg[key] = float(np.mean([getattr(rep, key) for _, rep in rows]))
            cc = [rep.ccpc for _, rep in rows if rep.ccpc is not None]
            writer.writerow(
                ["aggregate", agg["si_sdr"], agg["stft_log1p"], agg["mel_log1p"],
                 float(np.mean(cc)) if cc else ""]
            )
