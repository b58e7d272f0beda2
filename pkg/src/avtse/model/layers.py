"""Building blocks. Tensors are channel-first ``(batch, channels, frames)`` unless noted."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class ChannelNorm(nn.Module):
    """LayerNorm over channels at every frame; keeps the receptive field local in time."""

    def __init__(self, channels: int, eps: float = 1e-8):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class SpeechEncoder(nn.Module):
    def __init__(self, N: int, L: int):
        super().__init__()
        self.L = L
        self.conv = nn.Conv1d(1, N, L, stride=L // 2, bias=False)
        self.act = nn.ReLU()

    def forward(self, x):
        """x: (batch, samples) -> (rectified, pre_activation), each (batch, N, frames)."""
        if x.shape[-1] < self.L:
            raise ValueError(f"input of {x.shape[-1]} samples is shorter than the kernel ({self.L})")
        pre = self.conv(x.unsqueeze(1))
        return self.act(pre), pre


class SpeechDecoder(nn.Module):
    def __init__(self, N: int, L: int):
        super().__init__()
        self.N = N
        self.deconv = nn.ConvTranspose1d(N, 1, L, stride=L // 2, bias=False)

    def forward(self, X):
        if X.shape[1] != self.N:
            raise ValueError(f"decoder expects {self.N} channels, got {X.shape[1]}")
        return self.deconv(X).squeeze(1)


class VisualBlock(nn.Module):
    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        self.net = nn.Sequential(
            nn.ReLU(),
            ChannelNorm(channels),
            nn.Conv1d(channels, channels, kernel, padding=kernel // 2, groups=channels),
            nn.PReLU(),
            ChannelNorm(channels),
            nn.Conv1d(channels, channels, 1),
        )

    def forward(self, x):
        return x + self.net(x)


class VisualAdapter(nn.Module):
    def __init__(self, channels: int, n_blocks: int = 5):
        super().__init__()
        self.channels = channels
        self.blocks = nn.Sequential(*[VisualBlock(channels) for _ in range(n_blocks)])

    def forward(self, v):
        if v.shape[1] != self.channels:
            raise ValueError(f"visual adapter expects {self.channels} channels, got {v.shape[1]}")
        return self.blocks(v)


class TemporalBlock(nn.Module):
    def __init__(self, B: int, H: int, P: int, dilation: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(B, H, 1),
            nn.PReLU(),
            ChannelNorm(H),
            nn.Conv1d(H, H, P, dilation=dilation, padding=dilation * (P - 1) // 2, groups=H),
            nn.PReLU(),
            ChannelNorm(H),
            nn.Conv1d(H, B, 1),
        )

    def forward(self, x):
        return x + self.net(x)


class MaskEstimator(nn.Module):
    def __init__(self, N: int, d_visual: int, B: int, H: int, P: int, X: int):
        super().__init__()
        if P % 2 == 0:
            raise ValueError("conv-block kernel P must be odd to keep frame alignment")
        self.N, self.d_visual = N, d_visual
        self.norm = ChannelNorm(N + d_visual)
        self.bottleneck = nn.Conv1d(N + d_visual, B, 1)
        self.blocks = nn.Sequential(*[TemporalBlock(B, H, P, 2 ** i) for i in range(X)])
        self.act = nn.PReLU()
        self.out = nn.Conv1d(B, N, 1)
        self.out_act = nn.ReLU()

    def forward(self, X, V):
        if X.shape[-1] != V.shape[-1]:
            raise RuntimeError(f"unaligned mask-estimator inputs: {X.shape[-1]} vs {V.shape[-1]} frames")
        h = self.bottleneck(self.norm(torch.cat([X, V], dim=1)))
        h = self.blocks(h)
        return self.out_act(self.out(self.act(h)))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, d = x.shape

        def split(y):
            return y.view(b, t, self.heads, d // self.heads).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        y = F.scaled_dot_product_attention(q, k, v)
        return self.out_proj(y.transpose(1, 2).reshape(b, t, d))


class TransformerLayer(nn.Module):
    """Pre-norm encoder layer; operates on time-major ``(batch, frames, dim)``."""

    def __init__(self, dim: int, heads: int, ff_mult: int = 4):
        super().__init__()
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.ff_norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, ff_mult * dim)
        self.fc2 = nn.Linear(ff_mult * dim, dim)

    def forward(self, x):
        x = x + self.attn(self.attn_norm(x))
        return x + self.fc2(F.gelu(self.fc1(self.ff_norm(x))))


def init_transformer_(module: nn.Module, std: float = 0.02):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            nn.init.zeros_(m.bias)


def sinusoid_positions(length: int, dim: int, dtype=torch.float32, device=None):
    pos = torch.arange(length, dtype=torch.float64, device=device)[:, None]
    idx = torch.arange(0, dim, 2, dtype=torch.float64, device=device)
    angle = pos / (10000.0 ** (idx / dim))
    table = torch.zeros(length, dim, dtype=torch.float64, device=device)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return table.to(dtype)


class DurationAdapter(nn.Module):
    """Stack of kernel-2 stride-2 convolutions: each layer halves the frame rate."""

    def __init__(self, channels: int, n_layers: int = 5):
        super().__init__()
        self.convs = nn.ModuleList([nn.Conv1d(channels, channels, 2, stride=2) for _ in range(n_layers)])

    def forward(self, x):
        for conv in self.convs:
            x = F.gelu(conv(x))
        return x


class CueEncoder(nn.Module):
    def __init__(self, N: int, d_visual: int, d_av: int, n_layers: int, heads: int,
                 duration_layers: int = 5, max_frames: int = 1024):
        super().__init__()
        self.duration_adapter = DurationAdapter(N, duration_layers)
        self.pre_adapter = nn.Conv1d(N + d_visual, d_av, 1)
        self.pos_embed = nn.Parameter(torch.zeros(max_frames, d_av))
        self.layers = nn.ModuleList([TransformerLayer(d_av, heads) for _ in range(n_layers)])
        self.final_norm = nn.LayerNorm(d_av)
        self.post_adapter = nn.Conv1d(d_av, d_visual, 1)
        init_transformer_(self.layers)
        nn.init.trunc_normal_(self.pos_embed, std=0.02, a=-0.04, b=0.04)

    def forward(self, S_emb, V_prev):
        """S_emb: re-encoded speech at the embedding rate; V_prev: cue at the video rate."""
        A = self.duration_adapter(S_emb)
        T = min(A.shape[-1], V_prev.shape[-1])
        if T > self.pos_embed.shape[0]:
            raise ValueError(f"{T} cue frames exceed the positional table ({self.pos_embed.shape[0]})")
        h = self.pre_adapter(torch.cat([A[..., :T], V_prev[..., :T]], dim=1)).transpose(1, 2)
        h = h + self.pos_embed[:T]
        for layer in self.layers:
            h = layer(h)
        return self.post_adapter(self.final_norm(h).transpose(1, 2))


class MARBlock(nn.Module):
    """Transformer over [X^R; V^R] predicting the full target embedding.

    With ``residual`` the block predicts a correction to X^R and its output projection
    starts at zero, so a fresh block passes X^R through unchanged.
    """

    def __init__(self, N: int, d_visual: int, d_av: int, n_layers: int, heads: int, residual: bool = True):
        super().__init__()
        self.residual = residual
        self.in_proj = nn.Conv1d(N + d_visual, d_av, 1)
        self.layers = nn.ModuleList([TransformerLayer(d_av, heads) for _ in range(n_layers)])
        self.final_norm = nn.LayerNorm(d_av)
        self.out_proj = nn.Conv1d(d_av, N, 1)
        init_transformer_(self.layers)
        if residual:
            nn.init.zeros_(self.out_proj.weight)
            nn.init.zeros_(self.out_proj.bias)

    def forward(self, X, V_up):
        h = self.in_proj(torch.cat([X, V_up], dim=1)).transpose(1, 2)
        h = h + sinusoid_positions(h.shape[1], h.shape[2], h.dtype, h.device)
        for layer in self.layers:
            h = layer(h)
        out = self.out_proj(self.final_norm(h).transpose(1, 2))
        return X + out if self.residual else out


def upsample_cue(v, factor: int, length: int | None = None):
    """Nearest-neighbour repetition along time, then trimmed (or edge-extended) to ``length``."""
    up = torch.repeat_interleave(v, factor, dim=-1)
    if length is None:
        return up
    if up.shape[-1] >= length:
        return up[..., :length]
    pad = up[..., -1:].expand(*up.shape[:-1], length - up.shape[-1])
    return torch.cat([up, pad], dim=-1)


def receptive_span(P: int, X: int) -> int:
    return sum((P - 1) * 2 ** i for i in range(X))

