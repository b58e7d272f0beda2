"""Detection of zero-masked waveform regions at embedding resolution.

A zeroed waveform segment passed through a bias-free strided convolution
produces exactly zero output wherever a frame's receptive window lies fully
inside the segment. Those frames are what gets detected; frames that only
partially overlap the gap are left unmasked.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal_io import FeatureSequence

REL_EPS = 1e-6
ABS_FLOOR = 1e-12


class DegenerateInputError(ValueError):
    pass


@dataclass
class MaskPair:
    masked: np.ndarray      # 1 where the frame was zero-masked
    unmasked: np.ndarray    # 1 - masked
    stride_samples: int = 20
    kernel_samples: int = 40

    def __post_init__(self):
        self.masked = np.asarray(self.masked, dtype=np.int8)
        self.unmasked = np.asarray(self.unmasked, dtype=np.int8)
        if self.masked.shape != self.unmasked.shape:
            raise ValueError("masked/unmasked selectors differ in length")
        if np.any(self.masked + self.unmasked != 1):
            raise ValueError("masked and unmasked selectors must be complementary")

    def __len__(self) -> int:
        return self.masked.shape[0]

    @classmethod
    def from_masked(cls, masked, stride_samples: int = 20, kernel_samples: int = 40) -> "MaskPair":
        masked = np.asarray(masked, dtype=np.int8)
        return cls(masked, 1 - masked, stride_samples, kernel_samples)

    @property
    def masked_frames(self) -> np.ndarray:
        return np.flatnonzero(self.masked)

    def runs(self) -> list[tuple[int, int]]:
        return _runs(self.masked.astype(bool))


def _runs(flags: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as half-open ``(start, stop)`` pairs."""
    padded = np.concatenate([[False], flags, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[0::2].tolist(), edges[1::2].tolist()))


def min_run_frames(threshold_samples: int, stride: int) -> int:
    return max(1, threshold_samples // stride)


def detect_masked_frames(pre_activation, threshold_samples: int = 20, stride: int = 20,
                         kernel: int = 40) -> MaskPair:
    """``pre_activation`` is a FeatureSequence or a ``[frames, channels]`` array."""
    data = pre_activation.data if isinstance(pre_activation, FeatureSequence) else pre_activation
    data = np.asarray(data)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("pre-activation must be a non-empty [frames, channels] matrix")
    peak = np.abs(data).max(axis=1)
    global_max = float(peak.max())
    if global_max == 0.0:
        raise DegenerateInputError("all-zero encoder output; masked region is undefined")
    eps = max(REL_EPS * global_max, ABS_FLOOR)
    zero = peak <= eps

    masked = np.zeros(data.shape[0], dtype=np.int8)
    shortest = min_run_frames(threshold_samples, stride)
    for lo, hi in _runs(zero):
        if hi - lo >= shortest:
            masked[lo:hi] = 1
    return MaskPair(masked, 1 - masked, stride, kernel)


def receptive_field_oracle(n_samples: int, gap_lo: int, gap_hi: int, kernel: int, stride: int) -> np.ndarray:
    """Frames whose window ``[j*stride, j*stride + kernel)`` lies inside ``[gap_lo, gap_hi)``."""
    n_frames = (n_samples - kernel) // stride + 1
    j = np.arange(n_frames)
    return ((j * stride >= gap_lo) & (j * stride + kernel <= gap_hi)).astype(np.int8)


def split_by_mask(X, mp: MaskPair):
    """Return ``(masked_part, unmasked_part)``; they sum to ``X`` exactly."""
    data = X.data if isinstance(X, FeatureSequence) else np.asarray(X)
    T = min(data.shape[0], len(mp))
    data = data[:T]
    sel = mp.masked[:T].astype(bool)[:, None]
    masked_part = np.where(sel, data, np.zeros_like(data))
    unmasked_part = np.where(sel, np.zeros_like(data), data)
    if isinstance(X, FeatureSequence):
        return FeatureSequence(masked_part, X.frame_rate), FeatureSequence(unmasked_part, X.frame_rate)
    return masked_part, unmasked_part
