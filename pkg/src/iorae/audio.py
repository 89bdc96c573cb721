"""WAV ingestion/emission and the in-memory audio representation.

Only mono 16-bit PCM RIFF/WAVE is accepted: the reversible embedding stage
needs a fixed LSB substrate, so other containers are rejected rather than
converted. All internal processing is float64; quantization happens only at
WAV emission and LSB embedding.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PCM_SCALE = 32768
MIN_SAMPLE_RATE = 8000
MAX_SAMPLE_RATE = 48000


class WavError(Exception):
    """Base class for WAV container problems."""


class WavFormatError(WavError):
    """Not a RIFF/WAVE stream, or a required chunk is missing or garbled."""


class WavUnsupportedError(WavError):
    """Well-formed WAV, but not mono 16-bit PCM in the accepted rate range."""


class WavTruncatedError(WavError):
    """The data chunk ends before its declared length."""


@dataclass
class AudioClip:
    """Mono audio: float64 samples in [-1, 1] plus a sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("samples must be a nonempty 1-D sequence")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        peak = float(np.max(np.abs(self.samples)))
        if peak > 1.0:
            raise ValueError(f"samples exceed [-1, 1] (peak {peak:.6g})")

    @property
    def n(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def quantize16(value):
    """Map [-1, 1] amplitudes to int16 counts.

    Rounds half away from zero, then clamps to [-32768, 32767]. Accepts
    scalars or arrays; returns an int for scalar input.
    """
    v = np.multiply(value, PCM_SCALE, dtype=np.float64)
    q = np.sign(v) * np.floor(np.abs(v) + 0.5)
    q = np.clip(q, -PCM_SCALE, PCM_SCALE - 1)
    if np.isscalar(value):
        return int(q)
    return q.astype(np.int64)


def dequantize16(value):
    """Map int16 counts back to amplitudes (divide by 32768)."""
    out = np.asarray(value, dtype=np.float64) / PCM_SCALE
    if np.isscalar(value):
        return float(out)
    return out


def load_wav(path) -> AudioClip:
    """Read a mono 16-bit PCM WAV file into an AudioClip.

    Raises WavFormatError / WavUnsupportedError / WavTruncatedError for the
    respective container defects.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE stream")

    fmt = None
    pcm_bytes = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            if len(body) < size:
                raise WavTruncatedError(
                    f"{path}: data chunk declares {size} bytes, "
                    f"only {len(body)} present"
                )
            pcm_bytes = body
        pos += 8 + size + (size & 1)

    if fmt is None or pcm_bytes is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")

    audio_format, channels, rate, _byte_rate, _block_align, bits = fmt
    if audio_format != 1:
        raise WavUnsupportedError(f"{path}: compression code {audio_format}, want PCM")
    if channels != 1:
        raise WavUnsupportedError(f"{path}: {channels} channels, want mono")
    if bits != 16:
        raise WavUnsupportedError(f"{path}: {bits}-bit samples, want 16")
    if not (MIN_SAMPLE_RATE <= rate <= MAX_SAMPLE_RATE):
        raise WavUnsupportedError(f"{path}: sample rate {rate} outside 8000-48000 Hz")
    if len(pcm_bytes) < 2:
        raise WavFormatError(f"{path}: empty data chunk")

    pcm = np.frombuffer(pcm_bytes[: len(pcm_bytes) - (len(pcm_bytes) & 1)], dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / PCM_SCALE, rate)


def save_wav(clip: AudioClip, path) -> None:
    """Write an AudioClip as mono 16-bit PCM little-endian WAV."""
    pcm = quantize16(clip.samples).astype("<i2")
    payload = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, 1, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16
    )
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)
