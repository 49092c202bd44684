"""Narrow-band audio front end: decode, resample, scale, augment.

The model consumes mono 8 kHz speech.  Decoding accepts 16-bit PCM
RIFF/WAVE only; anything else is rejected rather than converted so the
decode contract stays bit-exact.  Amplitudes live in [-1, 1) floats; the
input scale constant k is expressed against the 16-bit integer range, so
scaling multiplies the float form by k * 32768.
"""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sp_signal

INT16_FULL_SCALE = 32768
STOPBAND_DB = 60.0


class WavFormatError(ValueError):
    """Malformed or unsupported WAV input."""


@dataclass
class AudioSample:
    """Mono waveform plus provenance: the unit of training and inference."""

    waveform: np.ndarray  # float64, amplitudes in [-1, 1) right after decode
    sample_rate: int
    language: str = ""
    label: object = None  # emotion name, trait tuple, or None
    source_id: str = ""

    def __post_init__(self):
        self.waveform = np.asarray(self.waveform, dtype=np.float64)
        if self.waveform.ndim != 1 or self.waveform.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")

    @property
    def duration_s(self) -> float:
        return self.waveform.shape[0] / self.sample_rate

    def with_waveform(self, waveform: np.ndarray) -> "AudioSample":
        return replace(self, waveform=waveform)


@dataclass(frozen=True)
class PreprocessConfig:
    """Knobs of the decode -> resample -> scale -> augment pipeline."""

    target_rate: int = 8000
    input_scale_k: float = 5e-4  # relative to 16-bit integer amplitude
    volume_rand_a: float = 1.5
    augment: bool = False

    def __post_init__(self):
        if self.target_rate <= 0:
            raise ValueError("target_rate must be positive")
        if self.volume_rand_a < 0:
            raise ValueError("volume_rand_a must be >= 0")


def decode_wav(data: bytes, source_id: str = "") -> AudioSample:
    """Decode a 16-bit PCM RIFF/WAVE byte string to a mono AudioSample.

    Multi-channel audio is averaged to mono; integer samples map to
    [-1, 1) by division by 32768.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE file")
    pos = 12
    fmt = None
    pcm = None
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavFormatError("truncated fmt chunk")
            audio_format, channels, rate, _, _, bits = struct.unpack_from(
                "<HHIIHH", body, 0
            )
            if audio_format != 1:
                raise WavFormatError(
                    f"unsupported codec (format tag {audio_format}); "
                    "only 16-bit PCM is accepted"
                )
            if bits != 16:
                raise WavFormatError(
                    f"unsupported sample width ({bits}-bit); "
                    "only 16-bit PCM is accepted"
                )
            if channels < 1:
                raise WavFormatError("fmt chunk declares zero channels")
            fmt = (channels, rate)
        elif chunk_id == b"data":
            if fmt is None:
                raise WavFormatError("data chunk before fmt chunk")
            if len(body) < size:
                raise WavFormatError("unexpected end of data")
            pcm = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None or pcm is None:
        raise WavFormatError("missing fmt or data chunk")
    channels, rate = fmt
    if len(pcm) % (2 * channels) != 0:
        raise WavFormatError("unexpected end of data")
    ints = np.frombuffer(pcm, dtype="<i2").reshape(-1, channels)
    if ints.shape[0] == 0:
        raise WavFormatError("empty data chunk")
    mono = ints.astype(np.float64).mean(axis=1) / INT16_FULL_SCALE
    return AudioSample(mono, rate, source_id=source_id)


def read_wav(path) -> AudioSample:
    with open(path, "rb") as fh:
        return decode_wav(fh.read(), source_id=str(path))


def write_wav(path, waveform: np.ndarray, sample_rate: int) -> None:
    """Write a float waveform in [-1, 1) as mono 16-bit PCM."""
    ints = np.clip(
        np.round(np.asarray(waveform) * INT16_FULL_SCALE), -32768, 32767
    ).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(ints.tobytes())


def resample_to_target(sample: AudioSample, target_rate: int = 8000) -> AudioSample:
    """Downsample with a Kaiser-windowed sinc low-pass (>= 60 dB stop band).

    Upsampling is refused: the pipeline only ever narrows bandwidth.
    """
    if sample.sample_rate == target_rate:
        return sample
    if sample.sample_rate < target_rate:
        raise ValueError(
            f"cannot upsample from {sample.sample_rate} Hz to {target_rate} Hz"
        )
    g = math.gcd(sample.sample_rate, target_rate)
    up, down = target_rate // g, sample.sample_rate // g
    beta = sp_signal.kaiser_beta(STOPBAND_DB)
    y = sp_signal.resample_poly(sample.waveform, up, down, window=("kaiser", beta))
    return replace(sample, waveform=y, sample_rate=target_rate)


def scale_input(sample: AudioSample, k: float) -> AudioSample:
    """Multiply amplitudes by k expressed against the 16-bit integer scale."""
    return sample.with_waveform(sample.waveform * (k * INT16_FULL_SCALE))


def draw_volume_scale(a: float, rng: np.random.Generator) -> float:
    """One multiplicative volume coefficient 10**U(-a, a)."""
    if a < 0:
        raise ValueError("a must be >= 0")
    if a == 0:
        return 1.0
    return float(10.0 ** rng.uniform(-a, a))


def randomize_volume(
    sample: AudioSample, a: float, rng: np.random.Generator
) -> AudioSample:
    """Training-time volume augmentation; draws a fresh coefficient per call."""
    return sample.with_waveform(sample.waveform * draw_volume_scale(a, rng))


def to_model_channels(sample: AudioSample) -> np.ndarray:
    """Two-channel input (frames, 2): raw waveform and its elementwise square."""
    w = sample.waveform
    return np.stack((w, w * w), axis=1)


def prepare_waveform(
    sample: AudioSample,
    cfg: PreprocessConfig,
    rng: np.random.Generator | None = None,
) -> AudioSample:
    """Resample -> scale; then volume-randomize when cfg.augment is set.

    The evaluation path must call this with augment unset; augmentation
    before the squared channel keeps both channels consistent.
    """
    if cfg.augment and rng is None:
        raise ValueError("augmentation requires an rng")
    out = resample_to_target(sample, cfg.target_rate)
    out = scale_input(out, cfg.input_scale_k)
    if cfg.augment:
        out = randomize_volume(out, cfg.volume_rand_a, rng)
    return out
