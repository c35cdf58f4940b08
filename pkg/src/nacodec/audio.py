"""Audio buffers and WAV file I/O (PCM16 / PCM24 / float32)."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class AudioError(ValueError):
    """Bad audio data or unsupported WAV encoding."""


@dataclass
class AudioBuffer:
    """Sampled waveform: ``samples`` has shape (channels, n) float."""

    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples))
        if self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 2 or self.samples.shape[0] not in (1, 2):
            raise AudioError(f"samples must be (1|2, n), got {self.samples.shape}")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate

    def tensor(self, dtype=np.float32) -> Tensor:
        return Tensor(self.samples.astype(dtype, copy=False))

    def channel(self, i: int) -> np.ndarray:
        return self.samples[i]


def _pcm24_to_float(raw: bytes) -> np.ndarray:
    b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
    val = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
    val = np.where(val >= 1 << 23, val - (1 << 24), val)
    return val.astype(np.float64) / float(1 << 23)


def _float_to_pcm24(x: np.ndarray) -> bytes:
    val = np.clip(np.round(x * float(1 << 23)), -(1 << 23), (1 << 23) - 1).astype(np.int64)
    val = np.where(val < 0, val + (1 << 24), val).astype(np.uint32)
    out = np.empty((val.size, 3), dtype=np.uint8)
    out[:, 0] = val & 0xFF
    out[:, 1] = (val >> 8) & 0xFF
    out[:, 2] = (val >> 16) & 0xFF
    return out.tobytes()


def read_wav(path) -> AudioBuffer:
    """Read a RIFF/WAVE file; PCM16, PCM24 and float32 only."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4 : pos + 8])
        body = data[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise AudioError(f"{path}: missing fmt/data chunk")
    audio_format, n_ch, rate, _, _, bits = struct.unpack("<HHIIHH", fmt[:16])
    if n_ch not in (1, 2):
        raise AudioError(f"{path}: unsupported channel count {n_ch}")
    if audio_format == 1 and bits == 16:
        x = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 1 and bits == 24:
        x = _pcm24_to_float(payload)
    elif audio_format == 3 and bits == 32:
        x = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        raise AudioError(
            f"{path}: unsupported encoding (format={audio_format}, bits={bits}); "
            "supported: PCM16, PCM24, float32"
        )
    n = x.size // n_ch
    x = x[: n * n_ch].reshape(n, n_ch).T
    return AudioBuffer(rate, np.ascontiguousarray(x))


def write_wav(path, buf: AudioBuffer, encoding: str = "float32") -> None:
    """Write an AudioBuffer; encoding one of pcm16, pcm24, float32."""
    x = buf.samples.T.reshape(-1)  # interleaved
    if encoding == "pcm16":
        body = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        audio_format, bits = 1, 16
    elif encoding == "pcm24":
        body = _float_to_pcm24(x)
        audio_format, bits = 1, 24
    elif encoding == "float32":
        body = x.astype("<f4").tobytes()
        audio_format, bits = 3, 32
    else:
        raise AudioError(f"unsupported encoding {encoding!r}")
    n_ch = buf.channels
    byte_rate = buf.sample_rate * n_ch * bits // 8
    block_align = n_ch * bits // 8
    fmt = struct.pack("<HHIIHH", audio_format, n_ch, buf.sample_rate, byte_rate, block_align, bits)
    riff = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    riff += b"data" + struct.pack("<I", len(body)) + body
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(riff)) + riff)
