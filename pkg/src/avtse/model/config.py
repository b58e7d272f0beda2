from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass
class ModelConfig:
    N: int = 256
    L: int = 40
    B: int = 256
    H: int = 512
    P: int = 3
    X: int = 7
    R: int = 4
    d_visual: int = 512
    d_av: int = 768
    n_av_layers: int = 4
    n_av_heads: int = 12
    mar_layers: int = 4
    mar_heads: int | None = None
    mar_residual: bool = True
    visual_blocks: int = 5
    duration_layers: int = 5
    max_cue_frames: int = 1024
    sample_rate: int = 16000
    video_fps: int = 25

    def __post_init__(self):
        if self.L % 2:
            raise ValueError(f"encoder kernel L must be even, got {self.L}")
        if self.R < 1 or self.n_av_layers < 1:
            raise ValueError("R and n_av_layers must be >= 1")
        ratio = self.sample_rate / (self.stride * self.video_fps)
        if ratio != int(ratio) or ratio < 1:
            raise ValueError(f"audio/visual rate ratio {ratio} is not a positive integer")
        if self.upsample_factor != 2 ** self.duration_layers:
            raise ValueError(
                f"duration adapter divides by {2 ** self.duration_layers} "
                f"but the audio/visual rate ratio is {self.upsample_factor}"
            )
        if self.d_av % self.n_av_heads or self.d_av % self.mar_num_heads:
            raise ValueError("d_av must be divisible by the attention head counts")

    @property
    def stride(self) -> int:
        return self.L // 2

    @property
    def embed_rate(self) -> float:
        return self.sample_rate / self.stride

    @property
    def upsample_factor(self) -> int:
        return int(self.sample_rate // (self.stride * self.video_fps))

    @property
    def mar_num_heads(self) -> int:
        return self.mar_heads or self.n_av_heads

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.L) // self.stride + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def paper(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def miniature(cls, **overrides) -> "ModelConfig":
        base = dict(N=8, L=40, B=8, H=16, P=3, X=2, R=2, d_visual=16, d_av=16,
                    n_av_layers=4, n_av_heads=2, mar_layers=4)
        base.update(overrides)
        return cls(**base)
