"""Waveform to normalized spectrogram conversion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputTooShortError, ParameterError, ValidationError

DEFAULT_SAMPLE_RATE = 16000
FRAME_WIDTH_MS = 25
FRAME_STEP_MS = 10
SEGMENT_SECONDS = 3


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValidationError("waveform must be a non-empty 1-D array")
        if int(self.sample_rate) <= 0:
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    """``frames`` is T x F: time frames by frequency bins."""

    frames: np.ndarray
    frame_width_ms: float = FRAME_WIDTH_MS
    frame_step_ms: float = FRAME_STEP_MS
    normalized: bool = False

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]


def window_samples(sample_rate: int, width_ms: float = FRAME_WIDTH_MS, step_ms: float = FRAME_STEP_MS) -> tuple[int, int]:
    """Window length and hop in samples."""
    return int(round(sample_rate * width_ms / 1000)), int(round(sample_rate * step_ms / 1000))


def frame_count(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        return 0
    return (n_samples - window) // hop + 1


def segment_frames(sample_rate: int = DEFAULT_SAMPLE_RATE, seconds: float = SEGMENT_SECONDS) -> int:
    """Frames in a ``seconds``-long segment (298 for 3 s at the default framing)."""
    W, H = window_samples(sample_rate)
    return frame_count(int(round(seconds * sample_rate)), W, H)


def hamming_window(N: int) -> np.ndarray:
    if N < 2:
        raise ParameterError(f"hamming window needs N >= 2, got {N}")
    # evaluate the first half and mirror it so the window is exactly symmetric
    # 0.08 + 0.46 (1 - cos) equals 0.54 - 0.46 cos but hits 0.08 and 1.0 exactly
    half = 0.08 + 0.46 * (1.0 - np.cos(2.0 * np.pi * np.arange((N + 1) // 2) / (N - 1)))
    return np.concatenate([half, half[: N // 2][::-1]])


def spectrogram(w: Waveform, width_ms: float = FRAME_WIDTH_MS, step_ms: float = FRAME_STEP_MS) -> Spectrogram:
    """Magnitude spectrogram with a sliding hamming window; bins 0..W/2."""
    W, H = window_samples(w.sample_rate, width_ms, step_ms)
    if w.samples.size < W:
        raise InputTooShortError(f"waveform has {w.samples.size} samples, shorter than one {W}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, W)[::H]
    mags = np.abs(np.fft.rfft(frames * hamming_window(W), axis=1))
    return Spectrogram(mags, width_ms, step_ms, normalized=False)


def normalize(s: Spectrogram, scope: str = "bin") -> Spectrogram:
    """Standardize over time; near-constant bins (or inputs) become zero.

    ``scope="bin"`` standardizes every frequency bin separately.
    ``scope="utterance"`` uses one mean and std for the whole matrix, which keeps
    the spectral shape that per-bin scaling removes.
    """
    x = s.frames
    if x.shape[0] < 2:
        raise ParameterError(f"normalization needs at least 2 frames, got {x.shape[0]}")
    if scope == "bin":
        mu, sd = x.mean(axis=0), x.std(axis=0)
    elif scope == "utterance":
        mu, sd = x.mean(), x.std()
    else:
        raise ParameterError(f"normalization scope must be 'bin' or 'utterance', got {scope!r}")
    flat = sd < 1e-8
    out = np.where(flat, 0.0, (x - mu) / np.where(flat, 1.0, sd))
    return Spectrogram(out, s.frame_width_ms, s.frame_step_ms, normalized=True)


def cyclic_pad(frames: np.ndarray, length: int) -> np.ndarray:
    reps = -(-length // frames.shape[0])
    return np.concatenate([frames] * reps, axis=0)[:length]


def sample_segment(
    s: Spectrogram,
    rng: np.random.Generator,
    seconds: float = SEGMENT_SECONDS,
    n_frames: int | None = None,
) -> Spectrogram:
    """Random contiguous ``n_frames`` slice; shorter inputs are cyclically repeated.

    ``n_frames`` defaults to the frame count of ``seconds`` at 16 kHz framing.
    """
    T_seg = n_frames if n_frames is not None else segment_frames(seconds=seconds)
    x = s.frames
    if x.shape[0] < T_seg:
        out = cyclic_pad(x, T_seg)
    else:
        start = int(rng.integers(0, x.shape[0] - T_seg + 1))
        out = x[start : start + T_seg]
    return Spectrogram(out, s.frame_width_ms, s.frame_step_ms, s.normalized)
