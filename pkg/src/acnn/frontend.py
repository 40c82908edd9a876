"""logMel filter-bank frontend.

Turns a mono 16 kHz clip into a fixed 26 x 748 matrix of log filter-bank
energies (25 ms Hamming frames, 10 ms shift, 7.5 s maximum length).
Clips shorter than the maximum are padded with zero samples; every frame
that is not fully covered by the original signal holds ``log(log_floor)``.
"""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyAudio, InvalidConfig, SampleRateMismatch

CACHE_MAGIC = b"ACNF"
CACHE_VERSION = 1


@dataclass(frozen=True)
class FrontendConfig:
    frame_ms: float = 25.0
    shift_ms: float = 10.0
    n_mels: int = 26
    max_seconds: float = 7.5
    sample_rate_expected: int = 16000
    fft_size: int = 512
    log_floor: float = 1e-10

    def __post_init__(self):
        if not self.frame_ms > self.shift_ms > 0:
            raise InvalidConfig("need frame_ms > shift_ms > 0")
        if self.sample_rate_expected <= 0:
            raise InvalidConfig("sample_rate_expected must be positive")
        if self.fft_size < self.frame_len:
            raise InvalidConfig(
                f"fft_size {self.fft_size} shorter than frame ({self.frame_len} samples)"
            )
        if self.n_mels < 1 or self.max_seconds <= 0 or self.log_floor <= 0:
            raise InvalidConfig("n_mels, max_seconds and log_floor must be positive")

    @property
    def frame_len(self) -> int:
        return int(round(self.frame_ms * self.sample_rate_expected / 1000.0))

    @property
    def shift_len(self) -> int:
        return int(round(self.shift_ms * self.sample_rate_expected / 1000.0))

    @property
    def max_samples(self) -> int:
        return int(round(self.max_seconds * self.sample_rate_expected))

    @property
    def n_frames(self) -> int:
        """Fixed column count of every feature matrix."""
        return frame_count(self.max_seconds, self)

    @property
    def pad_value(self) -> float:
        return math.log(self.log_floor)


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidConfig("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (n_mels, T)
    n_frames_valid: int

    @property
    def shape(self):
        return self.values.shape


def _frames_for_samples(n_samples: int, frame_len: int, shift_len: int) -> int:
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // shift_len + 1


def frame_count(duration_s: float, cfg: FrontendConfig) -> int:
    """Number of whole frames that fit in ``duration_s`` seconds."""
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    n_samples = int(round(duration_s * cfg.sample_rate_expected))
    return _frames_for_samples(n_samples, cfg.frame_len, cfg.shift_len)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, fft_size: int, n_mels: int) -> np.ndarray:
    """Triangular HTK-mel filters over the ``fft_size // 2 + 1`` rfft bins.

    Band edges are equally spaced on the mel scale from 0 Hz to Nyquist.
    Returns an ``(n_mels, fft_size // 2 + 1)`` array.
    """
    if n_mels < 1 or fft_size < 2:
        raise InvalidConfig("need n_mels >= 1 and fft_size >= 2")
    n_bins = fft_size // 2 + 1
    if n_mels > n_bins - 1:
        raise InvalidConfig(
            f"n_mels={n_mels} exceeds the {n_bins - 1} positive-frequency bins"
        )
    nyquist = sample_rate / 2.0
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), n_mels + 2))
    freqs = np.linspace(0.0, nyquist, n_bins)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.max(axis=1) <= 0.0)
    if empty.size:
        raise InvalidConfig(
            f"filters {empty.tolist()} fall between FFT bins; lower n_mels or raise fft_size"
        )
    return fb


def mel_centers(cfg: FrontendConfig) -> np.ndarray:
    """Centre frequency (Hz) of each filter."""
    nyquist = cfg.sample_rate_expected / 2.0
    return mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), cfg.n_mels + 2))[1:-1]


_FB_CACHE: dict = {}


def _filterbank_for(cfg: FrontendConfig) -> np.ndarray:
    key = (cfg.sample_rate_expected, cfg.fft_size, cfg.n_mels)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(*key)
    return _FB_CACHE[key]


def logmel(clip: AudioClip, cfg: FrontendConfig | None = None) -> FeatureMatrix:
    cfg = cfg or FrontendConfig()
    if clip.sample_rate != cfg.sample_rate_expected:
        raise SampleRateMismatch(
            f"clip is {clip.sample_rate} Hz, frontend expects {cfg.sample_rate_expected} Hz"
        )
    samples = np.asarray(clip.samples, dtype=np.float64)
    if samples.ndim != 1 or samples.size == 0:
        raise EmptyAudio("clip has no samples")

    n_keep = min(samples.size, cfg.max_samples)
    signal = np.zeros(cfg.max_samples)
    signal[:n_keep] = samples[:n_keep]
    n_valid = _frames_for_samples(n_keep, cfg.frame_len, cfg.shift_len)

    frames = np.lib.stride_tricks.sliding_window_view(signal, cfg.frame_len)[:: cfg.shift_len]
    frames = frames[: cfg.n_frames] * np.hamming(cfg.frame_len)
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    energies = power @ _filterbank_for(cfg).T  # (T, n_mels)
    values = np.log(np.maximum(energies, cfg.log_floor)).T
    # frames not fully inside the original clip count as padding
    values[:, n_valid:] = cfg.pad_value
    return FeatureMatrix(np.ascontiguousarray(values), n_valid)


# --- WAV I/O ---------------------------------------------------------------


def read_wav(path) -> AudioClip:
    """Read 16-bit PCM mono WAV into floats in [-1, 1)."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise InvalidConfig(f"{path}: expected mono, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise InvalidConfig(f"{path}: expected 16-bit PCM")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, samples, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


# --- feature cache ---------------------------------------------------------


def save_features(path, fm: FeatureMatrix) -> None:
    rows, cols = fm.values.shape
    header = CACHE_MAGIC + bytes([CACHE_VERSION]) + struct.pack("<III", rows, cols, fm.n_frames_valid)
    Path(path).write_bytes(header + fm.values.astype("<f4").tobytes(order="C"))


def load_features(path) -> FeatureMatrix:
    blob = Path(path).read_bytes()
    if blob[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    if blob[4] != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {blob[4]}")
    rows, cols, n_valid = struct.unpack_from("<III", blob, 5)
    data = np.frombuffer(blob, dtype="<f4", offset=17, count=rows * cols)
    return FeatureMatrix(data.reshape(rows, cols).astype(np.float64), n_valid)
