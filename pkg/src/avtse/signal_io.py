"""Audio and feature-sequence I/O.

Audio is 16-bit PCM WAV. Feature sequences use a small binary format:
one ASCII header line followed by little-endian float32 values, time-major::

    AVTSE-FEAT v1 frames=<int> channels=<int> rate=<decimal>\\n
"""
from __future__ import annotations

import re
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEAT_MAGIC = "AVTSE-FEAT v1"
_HEADER_RE = re.compile(
    r"^AVTSE-FEAT v1 frames=(\d+) channels=(\d+) rate=([0-9]+(?:\.[0-9]+)?(?:[eE][+-]?[0-9]+)?)$"
)
_PCM_SCALE = 32767.0


class SignalFormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class FeatureSequence:
    """Time-major real matrix ``data[frames, channels]``."""

    data: np.ndarray
    frame_rate: float

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"feature data must be 2-D, got shape {data.shape}")
        if data.shape[1] <= 0:
            raise ValueError("feature sequence needs at least one channel")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature sequence contains non-finite entries")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        self.data = data

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


def read_audio(path) -> Waveform:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as e:
        raise SignalFormatError(f"{path}: {e}") from e

    if width == 2:
        pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / _PCM_SCALE
    elif width == 4:
        pcm = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483647.0
    elif width == 1:
        pcm = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 127.0
    else:
        raise SignalFormatError(f"{path}: unsupported sample width {width}")
    if pcm.size == 0:
        raise SignalFormatError(f"{path}: zero-length audio")

    pcm = pcm.reshape(-1, n_channels).mean(axis=1)
    return Waveform(np.clip(pcm, -1.0, 1.0), rate)


def write_audio(path, w: Waveform) -> None:
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * _PCM_SCALE).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(w.sample_rate))
        wf.writeframes(pcm.tobytes())


def _format_rate(rate: float) -> str:
    text = repr(float(rate))
    if "e" in text or "E" in text:
        text = f"{float(rate):.17f}".rstrip("0")
        if text.endswith("."):
            text += "0"
    return text


def write_features(path, f: FeatureSequence) -> None:
    header = f"{FEAT_MAGIC} frames={f.frames} channels={f.channels} rate={_format_rate(f.frame_rate)}\n"
    payload = np.ascontiguousarray(f.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header.encode("ascii") + payload)


def read_features(path) -> FeatureSequence:
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise SignalFormatError(f"{path}: missing header line")
    try:
        header = blob[:nl].decode("ascii")
    except UnicodeDecodeError as e:
        raise SignalFormatError(f"{path}: header is not ASCII") from e
    m = _HEADER_RE.match(header)
    if m is None:
        raise SignalFormatError(f"{path}: malformed header {header!r}")
    frames, channels, rate = int(m.group(1)), int(m.group(2)), float(m.group(3))
    payload = blob[nl + 1:]
    expected = frames * channels * 4
    if len(payload) != expected:
        raise SignalFormatError(
            f"{path}: payload has {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(frames, channels).astype(np.float32)
    return FeatureSequence(data, rate)
