"""Log-magnitude spectrogram images (512-point DFT, 10 ms hop, fixed dB colour scale)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .signal_io import Waveform  # noqa: E402

N_FFT = 512
HOP_S = 0.010
DB_RANGE = (-80.0, 20.0)

TITLES = {"mixture": "Mixture", "extracted": "Extracted target", "ground_truth": "Ground truth"}


def log_spectrogram(w: Waveform) -> np.ndarray:
    hop = int(round(HOP_S * w.sample_rate))
    x = np.pad(w.samples, (N_FFT // 2, N_FFT // 2))
    win = np.hanning(N_FFT)
    starts = range(0, x.shape[0] - N_FFT + 1, hop)
    spec = np.abs(np.stack([np.fft.rfft(win * x[s:s + N_FFT]) for s in starts], axis=1))
    return 20 * np.log10(spec + 1e-8)


def render_spectrograms(waves: dict[str, Waveform], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, w in waves.items():
        S = log_spectrogram(w)
        fig, ax = plt.subplots(figsize=(6, 2.4), dpi=100)
        ax.imshow(S, origin="lower", aspect="auto", cmap="magma", vmin=DB_RANGE[0], vmax=DB_RANGE[1],
                  extent=(0, w.duration, 0, w.sample_rate / 2000))
        ax.set_title(TITLES.get(name, name))
        ax.set_xlabel("Time (s)")
        ax.set_ylabel("kHz")
        fig.tight_layout()
        path = out_dir / f"{name}.png"
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths
