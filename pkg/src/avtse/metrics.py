"""Evaluation metrics: SI-SDR, SI-SDRi, SDR (plain SNR), STOI, and an external PESQ hook.

No alignment search is done; estimates and references are compared sample for sample.
"""
from __future__ import annotations

import csv
import json
import math
import re
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .signal_io import Waveform

DB_CAP = 60.0


def _arr(w) -> np.ndarray:
    return np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)


def _cap(ratio_num: float, ratio_den: float) -> float:
    if ratio_den <= 0.0:
        return DB_CAP
    if ratio_num <= 0.0:
        return -DB_CAP
    return float(min(DB_CAP, max(-DB_CAP, 10.0 * math.log10(ratio_num / ratio_den))))


def si_sdr(est, ref) -> float:
    est, ref = _arr(est), _arr(ref)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise ValueError("zero-power reference")
    proj = (est @ ref) / ref_energy * ref
    noise = est - proj
    return _cap(float(proj @ proj), float(noise @ noise))


def si_sdr_improvement(est, mix, ref) -> float:
    return si_sdr(est, ref) - si_sdr(mix, ref)


def sdr(est, ref) -> float:
    est, ref = _arr(est), _arr(ref)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    err = ref - est
    return _cap(float(ref @ ref), float(err @ err))


# --- STOI ------------------------------------------------------------------

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


class STOIError(ValueError):
    pass


def third_octave_matrix(fs: int = STOI_FS, nfft: int = STOI_NFFT, n_bands: int = STOI_BANDS,
                        min_freq: float = STOI_MIN_FREQ) -> np.ndarray:
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, f.shape[0]))
    for i in range(n_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _hann(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def _frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    idx = np.arange(0, x.shape[0] - size + 1, hop)
    return np.stack([x[i:i + size] for i in idx]) if idx.size else np.zeros((0, size))


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n, size = frames.shape
    out = np.zeros((n - 1) * hop + size) if n else np.zeros(0)
    for i in range(n):
        out[i * hop:i * hop + size] += frames[i]
    return out


def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float = STOI_DYN_RANGE,
                         size: int = STOI_FRAME, hop: int = STOI_FRAME // 2):
    """Drop frames of ``x`` more than ``dyn_range`` dB below its loudest frame (same frames from ``y``)."""
    w = _hann(size)
    xf, yf = w * _frames(x, size, hop), w * _frames(y, size, hop)
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = (energy.max() - dyn_range - energy) < 0
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _stft_mag2(x: np.ndarray) -> np.ndarray:
    w = _hann(STOI_FRAME)
    idx = range(0, x.shape[0] - STOI_FRAME, STOI_FRAME // 2)
    spec = np.stack([np.fft.rfft(w * x[i:i + STOI_FRAME], n=STOI_NFFT) for i in idx], axis=1)
    return np.abs(spec) ** 2


def stoi(est, ref, fs: int = 16000) -> float:
    x, y = _arr(ref), _arr(est)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if fs != STOI_FS:
        g = math.gcd(STOI_FS, fs)
        x = resample_poly(x, STOI_FS // g, fs // g)
        y = resample_poly(y, STOI_FS // g, fs // g)
    x, y = remove_silent_frames(x, y)
    if x.shape[0] <= STOI_FRAME:
        raise STOIError("no active speech left after silence removal")
    obm = third_octave_matrix()
    x_tob = np.sqrt(obm @ _stft_mag2(x))
    y_tob = np.sqrt(obm @ _stft_mag2(y))
    n_frames = x_tob.shape[1]
    if n_frames < STOI_SEGMENT:
        raise STOIError(f"{n_frames} active frames; need at least {STOI_SEGMENT}")

    xs = np.stack([x_tob[:, m - STOI_SEGMENT:m] for m in range(STOI_SEGMENT, n_frames + 1)])
    ys = np.stack([y_tob[:, m - STOI_SEGMENT:m] for m in range(STOI_SEGMENT, n_frames + 1)])
    norm = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + _EPS)
    clip = 10 ** (-STOI_BETA / 20)
    yp = np.minimum(ys * norm, xs * (1 + clip))
    yp = yp - yp.mean(axis=2, keepdims=True)
    xs = xs - xs.mean(axis=2, keepdims=True)
    yp /= np.linalg.norm(yp, axis=2, keepdims=True) + _EPS
    xs /= np.linalg.norm(xs, axis=2, keepdims=True) + _EPS
    return float(np.sum(yp * xs) / (xs.shape[0] * xs.shape[1]))


# --- PESQ via an external tool -------------------------------------------------

class PESQToolError(RuntimeError):
    pass


_FLOAT_RE = re.compile(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


def pesq_external(est_path, ref_path, tool_path=None, timeout: float = 120.0) -> float | None:
    """Run ``<tool> <ref> <est>`` and return the last number it prints; ``None`` if no tool."""
    if not tool_path:
        return None
    proc = subprocess.run([str(tool_path), str(ref_path), str(est_path)], capture_output=True,
                          text=True, timeout=timeout)
    if proc.returncode != 0:
        raise PESQToolError(f"{tool_path} exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
    numbers = _FLOAT_RE.findall(proc.stdout)
    if not numbers:
        raise PESQToolError(f"{tool_path} printed no score")
    return float(numbers[-1])


# --- reports -----------------------------------------------------------------

METRIC_FIELDS = ("si_sdr", "si_sdri", "sdr", "stoi", "pesq")


@dataclass
class UtteranceScore:
    id: str
    si_sdr: float
    si_sdri: float
    sdr: float
    stoi: float | None = None
    pesq: float | None = None
    errors: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    records: list[UtteranceScore] = field(default_factory=list)
    label: str = ""

    def aggregate(self) -> dict[str, float | None]:
        agg = {}
        for name in METRIC_FIELDS:
            vals = [getattr(r, name) for r in self.records if getattr(r, name) is not None]
            agg[name] = float(np.mean(vals)) if vals else None
        agg["count"] = len(self.records)
        return agg

    def to_json(self) -> str:
        return json.dumps({"label": self.label, "records": [asdict(r) for r in self.records],
                           "aggregate": self.aggregate()}, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls([UtteranceScore(**r) for r in d["records"]], d.get("label", ""))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(("id",) + METRIC_FIELDS)
            for r in self.records:
                wr.writerow([r.id] + ["" if getattr(r, k) is None else f"{getattr(r, k):.6f}"
                                      for k in METRIC_FIELDS])


def score_utterance(uid: str, est, mix, ref, fs: int = 16000, with_stoi: bool = True,
                    pesq_paths: tuple | None = None, pesq_tool=None) -> UtteranceScore:
    rec = UtteranceScore(uid, si_sdr(est, ref), si_sdr_improvement(est, mix, ref), sdr(est, ref))
    if with_stoi:
        try:
            rec.stoi = stoi(est, ref, fs)
        except STOIError as e:
            rec.errors["stoi"] = str(e)
    if pesq_tool and pesq_paths:
        try:
            rec.pesq = pesq_external(pesq_paths[0], pesq_paths[1], pesq_tool)
        except (PESQToolError, OSError, subprocess.TimeoutExpired) as e:
            rec.errors["pesq"] = str(e)
    return rec
