"""Log-mel filter-bank (Fbank) feature extraction and waveform loading.

Frames are Hann-windowed, zero-padded to the FFT size, and the power
spectrum |X|^2 is projected through an HTK-scale triangular mel bank before
the natural log with a 1e-10 floor. T = 1 + floor((len - frame_len) / shift),
no end padding.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import get_window

from .tensor import Tensor

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class FbankConfig:
    sample_rate: int = 16000
    frame_len_ms: float = 25.0
    frame_shift_ms: float = 10.0
    fft_size: int = 512
    mel_bins: int = 80
    window: str = "hann"

    def __post_init__(self):
        if self.mel_bins < 2:
            raise ValueError(f"mel_bins must be >= 2, got {self.mel_bins}")
        if self.frame_len_ms < self.frame_shift_ms:
            raise ValueError("frame_len must be >= frame_shift")
        if self.fft_size < self.frame_len:
            raise ValueError(
                f"fft_size {self.fft_size} is shorter than the {self.frame_len}-sample frame"
            )

    @property
    def frame_len(self) -> int:
        return int(round(self.sample_rate * self.frame_len_ms / 1000.0))

    @property
    def frame_shift(self) -> int:
        return int(round(self.sample_rate * self.frame_shift_ms / 1000.0))

    @property
    def num_fft_bins(self) -> int:
        return self.fft_size // 2 + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _mel_points(cfg: FbankConfig) -> np.ndarray:
    lo, hi = hz_to_mel(0.0), hz_to_mel(cfg.sample_rate / 2.0)
    return mel_to_hz(np.linspace(lo, hi, cfg.mel_bins + 2))


def mel_center_freqs(cfg: FbankConfig) -> np.ndarray:
    """Peak frequency in Hz of each triangular filter."""
    return _mel_points(cfg)[1:-1]


def mel_filterbank(cfg: FbankConfig) -> np.ndarray:
    """Triangular filters as a nonnegative (mel_bins, fft_size//2+1) matrix."""
    points = _mel_points(cfg)
    freqs = np.arange(cfg.num_fft_bins) * cfg.sample_rate / cfg.fft_size
    bank = np.zeros((cfg.mel_bins, cfg.num_fft_bins))
    for j in range(cfg.mel_bins):
        left, center, right = points[j], points[j + 1], points[j + 2]
        rise = (freqs - left) / (center - left)
        fall = (right - freqs) / (right - center)
        bank[j] = np.maximum(0.0, np.minimum(rise, fall))
    return bank


def frame_signal(waveform: np.ndarray, cfg: FbankConfig) -> np.ndarray:
    wave = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if wave.size < cfg.frame_len:
        raise ValueError(
            f"waveform of {wave.size} samples is shorter than one {cfg.frame_len}-sample frame"
        )
    frames = sliding_window_view(wave, cfg.frame_len)[:: cfg.frame_shift]
    return frames


def compute_fbank(waveform, cfg: FbankConfig = FbankConfig()) -> Tensor:
    """Waveform samples -> T x F log-mel feature tensor (float32)."""
    frames = frame_signal(waveform, cfg)
    win = get_window(cfg.window, cfg.frame_len, fftbins=True)
    spectrum = np.fft.rfft(frames * win, n=cfg.fft_size, axis=1)
    power = np.abs(spectrum) ** 2
    energies = power @ mel_filterbank(cfg).T
    feats = np.log(np.maximum(energies, LOG_FLOOR))
    return Tensor(feats.astype(np.float32))


def read_waveform(path, expected_rate: int | None = None) -> np.ndarray:
    """Load mono samples from a RIFF/PCM wav or a raw little-endian float32 file.

    Integer PCM is scaled to [-1, 1); float payloads pass through. No
    resampling: a wav whose rate differs from ``expected_rate`` is rejected.
    """
    path = Path(path)
    if path.suffix.lower() == ".wav":
        rate, data = wavfile.read(path)
        if expected_rate is not None and rate != expected_rate:
            raise ValueError(f"{path}: sample rate {rate} does not match expected {expected_rate}")
        if data.ndim != 1:
            raise ValueError(f"{path}: expected single-channel audio, got {data.ndim} channels")
        if np.issubdtype(data.dtype, np.integer):
            info = np.iinfo(data.dtype)
            offset = (info.max + info.min + 1) / 2.0
            return ((data.astype(np.float64) - offset) / (info.max - offset)).astype(np.float32)
        return data.astype(np.float32)
    return np.fromfile(path, dtype="<f4").astype(np.float32)
