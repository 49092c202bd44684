"""Power spectrogram front end for the baseline model.

Frames mirror the raw model's first layer (200-sample window, 100-sample
hop at 8 kHz) so both front ends see the same frame rate; 256-point FFT
gives 129 one-sided power bins per frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio import AudioSample
from .numerics import InputTooShortError, conv_output_frames


@dataclass
class Spectrogram:
    power: np.ndarray  # (frames, bins), nonnegative
    frame_hop: int
    window_len: int

    @property
    def frames(self) -> int:
        return self.power.shape[0]

    @property
    def bins(self) -> int:
        return self.power.shape[1]


def tukey_window(length: int, taper_ratio: float) -> np.ndarray:
    """Tapered-cosine window; taper_ratio 0 is rectangular, 1 is Hann."""
    if length < 1:
        raise ValueError("window length must be >= 1")
    if not 0.0 <= taper_ratio <= 1.0:
        raise ValueError("taper_ratio must be in [0, 1]")
    if length == 1:
        return np.ones(1)
    if taper_ratio == 0.0:
        return np.ones(length)
    n = np.arange(length)
    edge = taper_ratio * (length - 1) / 2.0
    w = np.ones(length, dtype=np.float64)
    lo = n < edge
    hi = n > (length - 1) - edge
    w[lo] = 0.5 * (1.0 + np.cos(np.pi * (n[lo] / edge - 1.0)))
    w[hi] = 0.5 * (1.0 + np.cos(np.pi * ((n[hi] - (length - 1)) / edge + 1.0)))
    return w


def spectrogram(
    sample: AudioSample,
    window_len: int = 200,
    hop: int = 100,
    fft_size: int = 256,
    taper_ratio: float = 0.5,
) -> Spectrogram:
    """One-sided power spectrogram of an 8 kHz sample.

    Each frame is Tukey-windowed, zero-padded to fft_size, and reduced to
    the magnitude-squared of the first fft_size/2 + 1 FFT bins.
    """
    if fft_size < window_len:
        raise ValueError("fft_size must be >= window_len")
    x = sample.waveform
    if x.shape[0] < window_len:
        raise InputTooShortError(x.shape[0], window_len, unit="samples")
    win = tukey_window(window_len, taper_ratio)
    segments = sliding_window_view(x, window_len)[::hop] * win
    spec = np.fft.rfft(segments, n=fft_size, axis=1)
    power = np.abs(spec) ** 2
    assert power.shape[0] == conv_output_frames(x.shape[0], window_len, hop)
    return Spectrogram(power=power, frame_hop=hop, window_len=window_len)
