"""Gammatone time-frequency front-end.

FFT-based approximation of an ERB-spaced gammatone filterbank: each frame's
power spectrum is weighted by one spectral shape per band, log-compressed and
later z-normalized per band using corpus statistics.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EAR_Q = 9.26449  # Glasberg and Moore parameters
MIN_BW = 24.7
STD_FLOOR = 1e-8

GTF_MAGIC = b"GTFC"
GTF_VERSION = 1
NORM_MAGIC = b"GTNS"
NORM_VERSION = 1


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class CacheFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FrontendConfig:
    n_bands: int = 64
    win_len: int = 1764
    hop_len: int = 882
    fft_size: int = 2048
    f_low: float = 20.0
    f_high: float = 22050.0
    log_floor: float = 1e-10
    sample_rate: int = 44100
    log_compress: bool = True

    def __post_init__(self):
        if self.n_bands < 1:
            raise ConfigError(f"n_bands must be >= 1, got {self.n_bands}")
        if not (0 < self.hop_len <= self.win_len <= self.fft_size):
            raise ConfigError(
                f"need 0 < hop_len <= win_len <= fft_size, got "
                f"{self.hop_len}, {self.win_len}, {self.fft_size}")
        if not (0 < self.f_low < self.f_high <= self.sample_rate / 2):
            raise ConfigError(
                f"need 0 < f_low < f_high <= {self.sample_rate / 2}, got "
                f"{self.f_low}, {self.f_high}")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FrontendConfig":
        return cls(**d)


@dataclass
class FeatureMatrix:
    """Bands x frames matrix (height = frequency, width = time)."""
    values: np.ndarray

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise InputError("mean/std must be 1-D vectors of equal length")
        if self.count < 2:
            raise InputError(f"NormStats needs count >= 2, got {self.count}")
        if not np.all(self.std > 0):
            raise InputError("NormStats std must be strictly positive")


def erb_space(n_bands: int, f_low: float, f_high: float) -> np.ndarray:
    """Center frequencies uniformly spaced on the ERB scale, highest first.

    The last element equals ``f_low`` exactly.
    """
    if n_bands < 1 or not (0 < f_low < f_high):
        raise ConfigError(f"bad ERB range: n={n_bands}, [{f_low}, {f_high}]")
    c = EAR_Q * MIN_BW
    i = np.arange(1, n_bands + 1, dtype=np.float64)
    step = (np.log(f_low + c) - np.log(f_high + c)) / n_bands
    cf = -c + np.exp(i * step) * (f_high + c)
    # exp/log round-off would otherwise leave cf[-1] a few ulps off f_low
    cf[-1] = f_low
    if not np.all(np.isfinite(cf)) or (n_bands > 1 and not np.all(np.diff(cf) < 0)):
        raise ConfigError("ERB center frequencies are not finite and strictly decreasing")
    return cf


def erb_bandwidth(f):
    return 24.7 * (4.37 * np.asarray(f) / 1000.0 + 1.0)


def fft_frequencies(cfg: FrontendConfig) -> np.ndarray:
    return np.arange(cfg.fft_size // 2 + 1) * (cfg.sample_rate / cfg.fft_size)


def gammatone_weights(cfg: FrontendConfig) -> np.ndarray:
    """Spectral weighting matrix of shape (n_bands, fft_size // 2 + 1).

    Row r is the 4th-order gammatone magnitude-squared approximation
    ``[1 + ((f - cf_r) / b_r)^2]^-4`` with ``b_r = 1.019 * ERB(cf_r)``,
    scaled so its peak is 1.
    """
    cf = erb_space(cfg.n_bands, cfg.f_low, cfg.f_high)
    b = 1.019 * erb_bandwidth(cf)
    f = fft_frequencies(cfg)
    w = (1.0 + ((f[None, :] - cf[:, None]) / b[:, None]) ** 2) ** -4
    return w / w.max(axis=1, keepdims=True)


def _check_clip(clip: AudioClip, cfg: FrontendConfig) -> np.ndarray:
    if clip.sample_rate != cfg.sample_rate:
        raise InputError(
            f"sample rate {clip.sample_rate} Hz does not match {cfg.sample_rate} Hz "
            "(resampling is not supported)")
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.ndim != 1:
        raise InputError("clip must be mono")
    if len(x) < cfg.win_len:
        raise InputError(f"clip has {len(x)} samples, shorter than one window ({cfg.win_len})")
    return x


def num_frames(n_samples: int, win_len: int, hop_len: int) -> int:
    if n_samples < win_len:
        raise InputError(f"{n_samples} samples is shorter than one window ({win_len})")
    return (n_samples - win_len) // hop_len + 1


def frame_signal(clip: AudioClip, cfg: FrontendConfig) -> np.ndarray:
    """Return a (T, win_len) read-only view of overlapping frames, no padding."""
    x = _check_clip(clip, cfg)
    return sliding_window_view(x, cfg.win_len)[::cfg.hop_len]


def analysis_window(win_len: int) -> np.ndarray:
    # periodic Hann
    n = np.arange(win_len)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_len)


def power_spectrum(frame: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """|rfft(hann * frame, fft_size)|^2; also accepts a stack of frames."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1] != cfg.win_len:
        raise InputError(f"frame length {frame.shape[-1]} != win_len {cfg.win_len}")
    spec = np.fft.rfft(frame * analysis_window(cfg.win_len), n=cfg.fft_size, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def one_sided_energy(power: np.ndarray, fft_size: int) -> np.ndarray:
    """Time-domain energy recovered from a one-sided power spectrum (Parseval)."""
    scale = np.full(power.shape[-1], 2.0)
    scale[0] = 1.0
    if fft_size % 2 == 0:
        scale[-1] = 1.0
    return (power * scale).sum(axis=-1) / fft_size


def gammatonegram(clip: AudioClip, cfg: FrontendConfig = FrontendConfig(),
                  weights: np.ndarray | None = None) -> FeatureMatrix:
    frames = frame_signal(clip, cfg)
    if weights is None:
        weights = gammatone_weights(cfg)
    band_power = weights @ power_spectrum(frames, cfg).T
    if cfg.log_compress:
        band_power = 10.0 * np.log10(band_power + cfg.log_floor)
    return FeatureMatrix(np.ascontiguousarray(band_power, dtype=np.float32))


class StatsAccumulator:
    """Per-band running mean / M2 (Chan et al. merge), mergeable across workers."""

    def __init__(self, n_bands: int | None = None):
        self.n_bands = n_bands
        self.count = 0
        self.mean = None
        self.m2 = None

    def update(self, m: FeatureMatrix | np.ndarray) -> "StatsAccumulator":
        v = np.asarray(getattr(m, "values", m), dtype=np.float64)
        if v.ndim != 2 or v.shape[1] == 0:
            return self
        n = v.shape[1]
        mean = v.mean(axis=1)
        m2 = ((v - mean[:, None]) ** 2).sum(axis=1)
        return self._combine(n, mean, m2)

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        if other.count == 0:
            return self
        return self._combine(other.count, other.mean, other.m2)

    def _combine(self, n, mean, m2):
        if self.count == 0:
            self.n_bands = len(mean)
            self.count, self.mean, self.m2 = n, mean.copy(), m2.copy()
            return self
        if len(mean) != self.n_bands:
            raise InputError(f"band count mismatch: {len(mean)} vs {self.n_bands}")
        total = self.count + n
        delta = mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + m2 + delta ** 2 * (self.count * n / total)
        self.count = total
        return self

    def finalize(self) -> NormStats:
        if self.count < 2:
            raise InputError(f"need at least 2 frames to estimate statistics, got {self.count}")
        std = np.sqrt(self.m2 / self.count)
        return NormStats(self.mean.copy(), np.maximum(std, STD_FLOOR), self.count)


def accumulate_stats(features: Iterable[FeatureMatrix | np.ndarray]) -> NormStats:
    acc = StatsAccumulator()
    for m in features:
        acc.update(m)
    if acc.count == 0:
        raise InputError("no features to accumulate")
    return acc.finalize()


def apply_normalization(m: FeatureMatrix, stats: NormStats) -> FeatureMatrix:
    v = np.asarray(m.values)
    if v.shape[0] != len(stats.mean):
        raise InputError(f"matrix has {v.shape[0]} bands, stats have {len(stats.mean)}")
    out = (v - stats.mean[:, None]) / stats.std[:, None]
    return FeatureMatrix(out.astype(v.dtype, copy=False))


# -- binary files ------------------------------------------------------------

def encode_features(m: FeatureMatrix) -> bytes:
    v = np.ascontiguousarray(m.values, dtype="<f4")
    return GTF_MAGIC + struct.pack("<HHI", GTF_VERSION, v.shape[0], v.shape[1]) + v.tobytes()


def decode_features(buf: bytes, source: str = "<bytes>") -> FeatureMatrix:
    if len(buf) < 12:
        raise CacheFormatError(f"{source}: truncated header at offset {len(buf)}")
    if buf[:4] != GTF_MAGIC:
        raise CacheFormatError(f"{source}: bad magic {buf[:4]!r} at offset 0")
    version, bands, frames = struct.unpack_from("<HHI", buf, 4)
    if version != GTF_VERSION:
        raise CacheFormatError(f"{source}: unsupported version {version} at offset 4")
    need = 12 + 4 * bands * frames
    if len(buf) != need:
        raise CacheFormatError(
            f"{source}: payload size mismatch at offset {len(buf)} (expected {need} bytes)")
    v = np.frombuffer(buf, dtype="<f4", offset=12).reshape(bands, frames)
    return FeatureMatrix(v.astype(np.float32))


def save_features(m: FeatureMatrix, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_features(m))
    tmp.replace(path)


def load_features(path) -> FeatureMatrix:
    return decode_features(Path(path).read_bytes(), str(path))


def save_stats(stats: NormStats, path) -> None:
    n = len(stats.mean)
    buf = (NORM_MAGIC + struct.pack("<HHQ", NORM_VERSION, n, stats.count)
           + stats.mean.astype("<f8").tobytes() + stats.std.astype("<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf)
    tmp.replace(path)


def load_stats(path) -> NormStats:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != NORM_MAGIC:
        raise CacheFormatError(f"{path}: not a stats file (bad magic at offset 0)")
    version, n, count = struct.unpack_from("<HHQ", buf, 4)
    if version != NORM_VERSION:
        raise CacheFormatError(f"{path}: unsupported version {version} at offset 4")
    if len(buf) != 16 + 16 * n:
        raise CacheFormatError(f"{path}: truncated at offset {len(buf)}")
    mean = np.frombuffer(buf, "<f8", n, 16)
    std = np.frombuffer(buf, "<f8", n, 16 + 8 * n)
    return NormStats(mean.copy(), std.copy(), int(count))
