"""Log-magnitude semi-logarithmic spectrogram and fixed-context snippets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

N_BINS = 144
CONTEXT = 11
BINS_PER_SEMITONE = 2


class EmptyInput(ValueError):
    pass


class InfeasibleLayout(ValueError):
    pass


@dataclass
class FeatureConfig:
    sample_rate: int = 22050
    fps: int = 50
    n_fft: int = 2048
    f_min: float = 27.5
    f_max: float | None = None
    n_bins: int = N_BINS

    @property
    def hop(self):
        if self.sample_rate % self.fps:
            raise ValueError(f"sample_rate {self.sample_rate} not divisible by fps {self.fps}")
        return self.sample_rate // self.fps


@dataclass
class LogFreqSpectrogram:
    frames: np.ndarray
    fps: int
    sample_rate: int


@dataclass
class FeatureSnippet:
    values: np.ndarray
    center_frame: int


def stft_magnitude(samples, n_fft=2048, hop=441):
    """Hann-windowed magnitude STFT, frame ``t`` centred on sample ``t * hop``.

    The signal is zero-padded by ``n_fft // 2`` at the front and as much as
    needed at the tail, giving ``ceil(len / hop)`` frames.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise EmptyInput("expected a non-empty mono signal")
    if hop < 1:
        raise ValueError("hop must be >= 1")
    n_frames = math.ceil(x.size / hop)
    pad_front = n_fft // 2
    total = (n_frames - 1) * hop + n_fft
    padded = np.zeros(total)
    padded[pad_front:pad_front + x.size] = x[:total - pad_front]
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    window = np.hanning(n_fft + 1)[:-1]  # periodic Hann
    return np.abs(np.fft.rfft(frames * window, axis=1))


def log_centers(sample_rate, n_fft, n_bins=N_BINS, bins_per_semitone=BINS_PER_SEMITONE,
                f_min=27.5, f_max=None):
    """Return ``(linear_bins, log_centre_frequencies)`` of the filterbank layout.

    Below the crossover, where the log spacing would be narrower than one
    STFT bin, STFT bins are passed through one by one; above it, filters are
    spaced ``2 ** (1 / (12 * bins_per_semitone))`` apart.
    """
    f_max = sample_rate / 2 if f_max is None else f_max
    if not 0 < f_min < f_max <= sample_rate / 2:
        raise InfeasibleLayout(f"need 0 < f_min < f_max <= Nyquist, got {f_min}, {f_max}")
    ratio = 2.0 ** (1.0 / (12 * bins_per_semitone))
    df = sample_rate / n_fft
    cross = crossover_bin(sample_rate, n_fft, bins_per_semitone)
    first = max(1, math.ceil(f_min / df - 1e-9))
    linear = np.arange(first, cross)
    if linear.size > n_bins:
        linear = linear[:n_bins]
    n_log = n_bins - linear.size
    f0 = max(cross * df, f_min)
    centers = f0 * ratio ** np.arange(n_log)
    if n_log and centers[-1] * ratio > f_max:
        raise InfeasibleLayout(
            f"{n_bins} bins do not fit between {f_min} and {f_max} Hz "
            f"(top filter edge {centers[-1] * ratio:.1f} Hz)")
    return linear, centers


def crossover_bin(sample_rate, n_fft, bins_per_semitone=BINS_PER_SEMITONE):
    """Smallest STFT bin whose log-spacing gap is at least one STFT bin wide."""
    ratio = 2.0 ** (1.0 / (12 * bins_per_semitone))
    return math.ceil(1.0 / (ratio - 1.0) - 1e-12)


def build_filterbank(sample_rate=22050, n_fft=2048, n_bins=N_BINS,
                     bins_per_semitone=BINS_PER_SEMITONE, f_min=27.5, f_max=None):
    """Semi-logarithmic filterbank of shape ``(n_fft // 2 + 1, n_bins)``."""
    linear, centers = log_centers(sample_rate, n_fft, n_bins, bins_per_semitone, f_min, f_max)
    ratio = 2.0 ** (1.0 / (12 * bins_per_semitone))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((freqs.size, n_bins))
    fb[linear, np.arange(linear.size)] = 1.0
    for j, fc in enumerate(centers):
        lo, hi = fc / ratio, fc * ratio
        rising = (freqs - lo) / (fc - lo)
        falling = (hi - freqs) / (hi - fc)
        fb[:, linear.size + j] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def log_compress(m):
    return np.log1p(m)


def spectrogram(samples, config=None):
    config = config or FeatureConfig()
    mag = stft_magnitude(samples, config.n_fft, config.hop)
    fb = build_filterbank(config.sample_rate, config.n_fft, config.n_bins,
                          f_min=config.f_min, f_max=config.f_max)
    frames = log_compress(mag @ fb).astype(np.float32)
    return LogFreqSpectrogram(frames, config.fps, config.sample_rate)


def extract_snippet(spec, t):
    frames = spec.frames if isinstance(spec, LogFreqSpectrogram) else spec
    h = CONTEXT // 2
    out = np.zeros((CONTEXT, frames.shape[1]), frames.dtype)
    lo, hi = max(0, t - h), min(frames.shape[0], t + h + 1)
    out[lo - (t - h):hi - (t - h)] = frames[lo:hi]
    return FeatureSnippet(out, t)


def snippet_windows(frames):
    """All snippets of a spectrogram at once, shape ``(T, CONTEXT, bins)`` (a view)."""
    h = CONTEXT // 2
    padded = np.pad(frames, ((h, h), (0, 0)))
    return np.lib.stride_tricks.sliding_window_view(padded, CONTEXT, axis=0).transpose(0, 2, 1)


def read_wav(path, expected_rate=None):
    """Read a mono 16-bit PCM or 32-bit float WAV as float64 in [-1, 1]."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if expected_rate is not None and rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} != configured {expected_rate}")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0, rate
    if data.dtype == np.float32:
        return data.astype(np.float64), rate
    raise ValueError(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path, samples, sample_rate):
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, sample_rate, pcm)
