from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..masked_region import DegenerateInputError, MaskPair, detect_masked_frames
from .config import ModelConfig
from .layers import (CueEncoder, MARBlock, MaskEstimator, SpeechDecoder, SpeechEncoder,
                     VisualAdapter, upsample_cue)

PARAMETER_GROUPS = ("speech_encoder", "speech_decoder", "visual_adapter",
                    "mask_estimator", "cue_encoder", "mar_block")


@dataclass
class ExtractOutput:
    s_hat: torch.Tensor         # (batch, samples)
    X_R: torch.Tensor           # (batch, N, frames), final masked embedding
    V_R: torch.Tensor           # (batch, d_visual, video frames)
    X0: torch.Tensor            # rectified mixture embedding
    X0_pre: torch.Tensor        # pre-activation mixture embedding
    masks: list = field(default_factory=list)          # M^0..M^R
    intermediate: list = field(default_factory=list)   # S^0..S^{R-1}
    cues: list = field(default_factory=list)           # V^0..V^R


@dataclass
class Stage2Output:
    s_hat: torch.Tensor
    X_hat_R: torch.Tensor
    masked: torch.Tensor        # (batch, frames) float selector, 1 on masked frames
    mask_pairs: list
    extract: ExtractOutput


class AVHuMARTSE(nn.Module):
    """Audio-visual target speech extractor with an optional mask-and-recover block.

    Waveforms are ``(batch, samples)``; visual features are time-major
    ``(batch, video_frames, d_visual)`` as stored on disk.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.speech_encoder = SpeechEncoder(cfg.N, cfg.L)
        self.speech_decoder = SpeechDecoder(cfg.N, cfg.L)
        self.visual_adapter = VisualAdapter(cfg.d_visual, cfg.visual_blocks)
        self.mask_estimator = MaskEstimator(cfg.N, cfg.d_visual, cfg.B, cfg.H, cfg.P, cfg.X)
        self.cue_encoder = CueEncoder(cfg.N, cfg.d_visual, cfg.d_av, cfg.n_av_layers, cfg.n_av_heads,
                                      cfg.duration_layers, cfg.max_cue_frames)
        self.mar_block = MARBlock(cfg.N, cfg.d_visual, cfg.d_av, cfg.mar_layers, cfg.mar_num_heads,
                                  cfg.mar_residual)

    # --- components ------------------------------------------------------

    def speech_encode(self, w):
        return self.speech_encoder(w)

    def speech_decode(self, X, length: int | None = None):
        s = self.speech_decoder(X)
        if length is not None:
            s = s[..., :length] if s.shape[-1] >= length else F.pad(s, (0, length - s.shape[-1]))
        return s

    def visual_adapt(self, v_raw):
        return self.visual_adapter(v_raw.transpose(1, 2))

    def upsample_cue(self, V, length: int | None = None):
        return upsample_cue(V, self.cfg.upsample_factor, length)

    def estimate_mask(self, X, V):
        return self.mask_estimator(X, self.upsample_cue(V, X.shape[-1]))

    def cue_encode(self, S_prev, V_prev):
        S_emb, _ = self.speech_encode(S_prev)
        return self.cue_encoder(S_emb, V_prev)

    def mar_refine(self, X_R, V_R):
        return self.mar_block(X_R, self.upsample_cue(V_R, X_R.shape[-1]))

    # --- pipelines -------------------------------------------------------

    def extract(self, x0, v_raw) -> ExtractOutput:
        T = x0.shape[-1]
        X0, X0_pre = self.speech_encode(x0)
        V = self.visual_adapt(v_raw)
        M = self.estimate_mask(X0, V)
        out = ExtractOutput(None, None, None, X0, X0_pre, masks=[M], cues=[V])
        for _ in range(self.cfg.R):
            S = self.speech_decode(M * X0, T)
            X_prev, _ = self.speech_encode(S)
            V = self.cue_encoder(X_prev, V)
            M = self.estimate_mask(X_prev, V)
            out.intermediate.append(S)
            out.cues.append(V)
            out.masks.append(M)
        out.X_R = M * X0
        out.V_R = V
        out.s_hat = self.speech_decode(out.X_R, T)
        return out

    def detect_masks(self, X0_pre, threshold_samples: int = 20) -> list[MaskPair]:
        pre = X0_pre.detach().to("cpu", torch.float64).numpy()
        pairs = []
        for item in pre:
            try:
                mp = detect_masked_frames(item.T, threshold_samples, self.cfg.stride, self.cfg.L)
            except DegenerateInputError:
                mp = MaskPair.from_masked(np.zeros(item.shape[1], dtype=np.int8), self.cfg.stride, self.cfg.L)
            pairs.append(mp)
        return pairs

    def forward_stage2(self, x0_masked, v_raw, use_mar: bool = True,
                       threshold_samples: int = 20) -> Stage2Output:
        ext = self.extract(x0_masked, v_raw)
        pairs = self.detect_masks(ext.X0_pre, threshold_samples)
        masked = torch.as_tensor(np.stack([mp.masked for mp in pairs]), dtype=ext.X_R.dtype,
                                 device=ext.X_R.device)
        if use_mar:
            X_hat = self.mar_refine(ext.X_R, ext.V_R)
            s_hat = self.speech_decode(X_hat, x0_masked.shape[-1])
        else:
            X_hat, s_hat = ext.X_R, ext.s_hat
        return Stage2Output(s_hat, X_hat, masked, pairs, ext)

    def encode_target(self, y):
        """Ground-truth embedding for the embedding-level losses (shared encoder)."""
        return self.speech_encode(y)[0]

    def forward(self, x0, v_raw, stage: int = 1):
        if stage == 1:
            return self.extract(x0, v_raw).s_hat
        return self.forward_stage2(x0, v_raw).s_hat

    # --- parameter bookkeeping -------------------------------------------

    def parameter_groups(self) -> dict[str, dict[str, torch.Tensor]]:
        return {g: dict(getattr(self, g).named_parameters()) for g in PARAMETER_GROUPS}

    def reset_mar_block(self, seed: int | None = None):
        if seed is not None:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                self.mar_block = MARBlock(self.cfg.N, self.cfg.d_visual, self.cfg.d_av,
                                          self.cfg.mar_layers, self.cfg.mar_num_heads, self.cfg.mar_residual)
        else:
            self.mar_block = MARBlock(self.cfg.N, self.cfg.d_visual, self.cfg.d_av,
                                      self.cfg.mar_layers, self.cfg.mar_num_heads, self.cfg.mar_residual)
        ref = next(self.speech_encoder.parameters())
        self.mar_block.to(ref.device, ref.dtype)


def build_model(cfg: ModelConfig, seed: int = 0) -> AVHuMARTSE:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return AVHuMARTSE(cfg)
