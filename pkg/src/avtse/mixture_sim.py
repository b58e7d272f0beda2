"""Two-speaker mixture simulation and a synthetic audio-visual corpus."""
from __future__ import annotations

import json
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .signal_io import FeatureSequence, Waveform, read_audio, read_features, write_audio, write_features

MASK_DURATIONS_MS = (0, 100, 200, 300, 400, 500, 600)
SPLITS = ("train", "valid", "test")


@dataclass
class SimConfig:
    seed: int = 0
    counts: tuple[int, int, int] = (20000, 5000, 3000)
    snr_range_db: tuple[float, float] = (-10.0, 10.0)
    mask_duration_ms: int = 0
    train_crop_s: float = 4.0
    test_crop_s: tuple[float, float] = (4.0, 6.0)
    # fraction of corpus speakers held out for the test split
    test_speaker_fraction: float = 0.25

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        self.snr_range_db = tuple(float(v) for v in self.snr_range_db)
        if len(self.counts) != 3 or min(self.counts) < 0:
            raise ValueError(f"counts must be three non-negative integers, got {self.counts}")
        lo, hi = self.snr_range_db
        if lo > hi:
            raise ValueError(f"snr range lower bound {lo} exceeds upper bound {hi}")
        if self.mask_duration_ms not in MASK_DURATIONS_MS:
            raise ValueError(f"mask_duration_ms must be one of {MASK_DURATIONS_MS}")


@dataclass
class ManifestEntry:
    target_audio: str
    interferer_audio: str
    target_visual: str
    snr_db: float
    crop_start_s: float
    crop_len_s: float
    mask_start_s: float = -1.0
    mask_len_s: float = 0.0
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.mask_len_s > 0:
            end = self.mask_start_s + self.mask_len_s
            if self.mask_start_s < 0 or end > self.crop_len_s + 1e-9:
                raise ValueError("mask interval must lie inside the crop")

    @property
    def has_mask(self) -> bool:
        return self.mask_len_s > 0


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def mix_at_snr(target: Waveform, interferer: Waveform, snr_db: float) -> Waveform:
    if len(target) != len(interferer):
        raise ValueError(f"length mismatch: {len(target)} vs {len(interferer)}")
    if target.sample_rate != interferer.sample_rate:
        raise ValueError("sample rate mismatch")
    p_t, p_i = _power(target.samples), _power(interferer.samples)
    if p_t == 0.0 or p_i == 0.0:
        raise ValueError("cannot mix a zero-power signal at a given SNR")
    g = np.sqrt(p_t / p_i) * 10.0 ** (-snr_db / 20.0)
    return Waveform(target.samples + g * interferer.samples, target.sample_rate)


def snr_gain(target: Waveform, interferer: Waveform, snr_db: float) -> float:
    return float(np.sqrt(_power(target.samples) / _power(interferer.samples)) * 10.0 ** (-snr_db / 20.0))


def crop_or_pad(w: Waveform, start_s: float, len_s: float) -> Waveform:
    if len_s <= 0:
        raise ValueError("crop length must be positive")
    if start_s < 0:
        raise ValueError("crop start must be non-negative")
    start = int(round(start_s * w.sample_rate))
    n = int(round(len_s * w.sample_rate))
    out = np.zeros(n, dtype=np.float64)
    piece = w.samples[start:start + n]
    out[:piece.shape[0]] = piece
    return Waveform(out, w.sample_rate)


def apply_zero_mask(w: Waveform, start_s: float, len_s: float) -> Waveform:
    if len_s == 0:
        return Waveform(w.samples.copy(), w.sample_rate)
    lo = int(round(start_s * w.sample_rate))
    hi = int(round((start_s + len_s) * w.sample_rate))
    if start_s < 0 or len_s < 0 or hi > len(w):
        raise ValueError(f"mask [{start_s}, {start_s + len_s}) s outside a {w.duration:.3f} s signal")
    out = w.samples.copy()
    out[lo:hi] = 0.0
    return Waveform(out, w.sample_rate)


# --- corpus listing ---------------------------------------------------------

@dataclass
class Utterance:
    speaker: str
    audio: str
    visual: str
    duration_s: float


def list_corpus(corpus_dir) -> list[Utterance]:
    """Corpus layout: ``<corpus>/<speaker>/<utt>.wav`` with ``<utt>.feat`` next to it."""
    corpus_dir = Path(corpus_dir)
    utts = []
    for wav in sorted(corpus_dir.glob("*/*.wav")):
        feat = wav.with_suffix(".feat")
        if not feat.exists():
            continue
        with wave.open(str(wav), "rb") as wf:
            duration = wf.getnframes() / wf.getframerate()
        utts.append(Utterance(wav.parent.name, str(wav.relative_to(corpus_dir)),
                              str(feat.relative_to(corpus_dir)), duration))
    return utts


def _split_speakers(speakers: list[str], cfg: SimConfig, rng: np.random.Generator):
    if len(speakers) < 2:
        raise ValueError(f"need at least 2 speakers, found {len(speakers)}")
    order = list(rng.permutation(len(speakers)))
    n_test = 0
    if cfg.counts[2] > 0:
        # test speakers must be unseen and still allow two-speaker mixtures
        n_test = max(2, int(round(cfg.test_speaker_fraction * len(speakers))))
        if len(speakers) - n_test < 2 and (cfg.counts[0] > 0 or cfg.counts[1] > 0):
            raise ValueError("not enough speakers for disjoint train/test speaker sets")
    test = sorted(speakers[i] for i in order[:n_test])
    seen = sorted(speakers[i] for i in order[n_test:])
    return seen, test


def build_manifest(corpus_dir, cfg: SimConfig) -> list[ManifestEntry]:
    utts = list_corpus(corpus_dir)
    if not utts:
        raise ValueError(f"empty corpus: {corpus_dir}")
    by_speaker: dict[str, list[Utterance]] = {}
    for u in utts:
        by_speaker.setdefault(u.speaker, []).append(u)
    rng = np.random.default_rng(cfg.seed)
    seen, test = _split_speakers(sorted(by_speaker), cfg, rng)

    entries = []
    for split, count in zip(SPLITS, cfg.counts):
        pool = test if split == "test" else seen
        for _ in range(count):
            s_t, s_i = rng.choice(len(pool), size=2, replace=False)
            tgt_list, itf_list = by_speaker[pool[s_t]], by_speaker[pool[s_i]]
            tgt = tgt_list[int(rng.integers(len(tgt_list)))]
            itf = itf_list[int(rng.integers(len(itf_list)))]
            snr = float(rng.uniform(*cfg.snr_range_db))
            if split == "test":
                crop_len = float(np.round(rng.uniform(*cfg.test_crop_s), 3))
            else:
                crop_len = cfg.train_crop_s
            avail = min(tgt.duration_s, itf.duration_s) - crop_len
            # crop starts on a video-frame boundary so audio and lip crops stay aligned
            crop_start = int(rng.integers(0, int(np.floor(avail * 25)) + 1)) / 25.0 if avail > 0 else 0.0
            mask_start, mask_len = -1.0, 0.0
            if cfg.mask_duration_ms > 0:
                mask_len = cfg.mask_duration_ms / 1000.0
                mask_start = float(np.round(rng.uniform(0.0, crop_len - mask_len), 3))
            entries.append(ManifestEntry(tgt.audio, itf.audio, tgt.visual, snr, crop_start,
                                         crop_len, mask_start, mask_len, split))
    return entries


def with_mask_duration(entries: list[ManifestEntry], mask_duration_ms: int, seed: int) -> list[ManifestEntry]:
    """Same mixtures, new mask intervals (one per entry) of the given duration."""
    rng = np.random.default_rng(seed)
    out = []
    for e in entries:
        if mask_duration_ms > 0:
            mask_len = mask_duration_ms / 1000.0
            mask_start = float(np.round(rng.uniform(0.0, e.crop_len_s - mask_len), 3))
        else:
            mask_start, mask_len = -1.0, 0.0
        out.append(ManifestEntry(**{**asdict(e), "mask_start_s": mask_start, "mask_len_s": mask_len}))
    return out


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    lines = [json.dumps(asdict(e), sort_keys=False) for e in entries]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            entries.append(ManifestEntry(**json.loads(line)))
    return entries


# --- rendering --------------------------------------------------------------

@dataclass
class RenderedItem:
    mixture: np.ndarray
    target: np.ndarray
    visual: np.ndarray
    mask_start_s: float = -1.0
    mask_len_s: float = 0.0
    sample_rate: int = 16000
    key: str = field(default="")


def render_entry(corpus_dir, e: ManifestEntry, video_fps: int = 25, apply_mask: bool = True) -> RenderedItem:
    corpus_dir = Path(corpus_dir)
    tgt = crop_or_pad(read_audio(corpus_dir / e.target_audio), e.crop_start_s, e.crop_len_s)
    itf = crop_or_pad(read_audio(corpus_dir / e.interferer_audio), e.crop_start_s, e.crop_len_s)
    mix = mix_at_snr(tgt, itf, e.snr_db)
    if apply_mask and e.has_mask:
        mix = apply_zero_mask(mix, e.mask_start_s, e.mask_len_s)

    vis = read_features(corpus_dir / e.target_visual)
    v0 = int(round(e.crop_start_s * vis.frame_rate))
    nv = int(round(e.crop_len_s * video_fps))
    frames = np.zeros((nv, vis.channels), dtype=np.float32)
    piece = vis.data[v0:v0 + nv]
    frames[:piece.shape[0]] = piece
    key = f"{Path(e.target_audio).stem}~{Path(e.interferer_audio).stem}@{e.snr_db:.2f}"
    return RenderedItem(mix.samples, tgt.samples, frames, e.mask_start_s if apply_mask else -1.0,
                        e.mask_len_s if apply_mask else 0.0, tgt.sample_rate, key)


# --- synthetic corpus -------------------------------------------------------

SYNTH_DURATION_S = 6.0


def _envelope(rng: np.random.Generator, n_frames: int) -> np.ndarray:
    """Talk spurts of 4-11 frames separated by 8-24 frame pauses, values in [0.02, 1]."""
    env = np.empty(n_frames)
    i, on = 0, bool(rng.integers(2))
    while i < n_frames:
        run = int(rng.integers(4, 12) if on else rng.integers(8, 25))
        env[i:i + run] = rng.uniform(0.6, 1.0) if on else 0.02
        i += run
        on = not on
    return env


def _visual_encoding(env: np.ndarray, channels: int, seed: int) -> np.ndarray:
    # corpus-wide fixed projection so every speaker shares one visual "front-end"
    proj = np.random.default_rng(seed + 7919)
    gain = proj.normal(0.0, 2.0, size=channels)
    bias = proj.normal(0.0, 0.5, size=channels)
    delta = np.diff(env, prepend=env[0])
    dgain = proj.normal(0.0, 1.0, size=channels)
    return np.tanh(env[:, None] * gain + delta[:, None] * dgain + bias).astype(np.float32)


def speaker_f0(index: int) -> float:
    """Fundamentals on a half-octave ladder from 80 Hz, cycling every three octaves."""
    return 80.0 * 2.0 ** ((index % 6) / 2.0)


def synth_utterance(f0: float, tilt: float, env: np.ndarray, rng: np.random.Generator,
                    sample_rate: int = 16000, fps: int = 25) -> np.ndarray:
    n = int(round(SYNTH_DURATION_S * sample_rate))
    t = np.arange(n) / sample_rate
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(3.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * f0 * np.cumsum(vibrato) / sample_rate
    x = np.zeros(n)
    k = 1
    while k * f0 < 0.45 * sample_rate and k <= 40:
        x += (k ** -tilt) * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
        k += 1
    # frame-rate envelope -> sample rate, linear interpolation between frame centres
    centres = (np.arange(env.shape[0]) + 0.5) / fps
    amp = np.interp(t, centres, env)
    x = amp * x / np.max(np.abs(x))
    x += 1e-3 * rng.standard_normal(n)
    return 0.5 * x / np.max(np.abs(x))


def synth_corpus(out_dir, n_speakers: int, utts_per_speaker: int, seed: int,
                 visual_channels: int = 512, sample_rate: int = 16000, fps: int = 25) -> list[Path]:
    if n_speakers < 2:
        raise ValueError("need at least 2 speakers")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_frames = int(round(SYNTH_DURATION_S * fps))
    written = []
    for s in range(n_speakers):
        spk_dir = out_dir / f"spk{s:03d}"
        spk_dir.mkdir(exist_ok=True)
        f0 = speaker_f0(s)
        tilt = 1.0 + ((s * 5) % 6) / 5.0
        for u in range(utts_per_speaker):
            env = _envelope(rng, n_frames)
            audio = synth_utterance(f0, tilt, env, rng, sample_rate, fps)
            stem = spk_dir / f"utt{u:03d}"
            write_audio(stem.with_suffix(".wav"), Waveform(audio, sample_rate))
            write_features(stem.with_suffix(".feat"),
                           FeatureSequence(_visual_encoding(env, visual_channels, seed), float(fps)))
            written += [stem.with_suffix(".wav"), stem.with_suffix(".feat")]
    return written
