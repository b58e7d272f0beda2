"""Training objectives. All functions take batched tensors and return batch means."""
from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-8


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 5.0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = float(getattr(self, name))
            if v != v or v in (float("inf"), float("-inf")):
                raise ValueError(f"loss weight {name} must be finite")

    @classmethod
    def stage_one(cls) -> "LossWeights":
        return cls(1.0, 0.0, 0.0)


def si_sdr_loss(y, s_hat, eps: float = EPS, reduce: bool = True):
    """Negative SI-SDR in dB. ``y`` and ``s_hat`` are ``(batch, samples)`` or 1-D."""
    y, s_hat = torch.atleast_2d(y), torch.atleast_2d(s_hat)
    if y.shape != s_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(s_hat.shape)}")
    ref_energy = (y * y).sum(-1, keepdim=True)
    if torch.any(ref_energy == 0):
        raise ValueError("zero-power reference signal")
    proj = (s_hat * y).sum(-1, keepdim=True) / ref_energy * y
    noise = s_hat - proj
    ratio = ((proj * proj).sum(-1) + eps) / ((noise * noise).sum(-1) + eps)
    loss = -10.0 * torch.log10(ratio)
    return loss.mean() if reduce else loss


def _align(X_hat, Y, masked):
    T = min(X_hat.shape[-1], Y.shape[-1], masked.shape[-1])
    return X_hat[..., :T], Y[..., :T], masked[..., :T]


def masked_mse_losses(X_hat, Y, masked):
    """MSE inside and outside the masked frames, both normalised by the full tensor size.

    ``X_hat`` and ``Y`` are ``(batch, channels, frames)``; ``masked`` is ``(batch, frames)``
    with 1 on masked frames. The two terms add up to the plain full-tensor MSE.
    """
    if X_hat.shape[:2] != Y.shape[:2]:
        raise ValueError(f"shape mismatch: {tuple(X_hat.shape)} vs {tuple(Y.shape)}")
    X_hat, Y, masked = _align(X_hat, Y, masked)
    sel = masked.to(X_hat.dtype).unsqueeze(1)
    sq = (X_hat - Y) ** 2
    n = sq.numel()
    l_recover = (sq * sel).sum() / n
    l_tse = (sq * (1 - sel)).sum() / n
    return l_recover, l_tse


def total_loss(y, s_hat, X_hat=None, Y=None, masked=None, w: LossWeights | None = None):
    """Weighted sum of the SI-SDR, recovery and unmasked-embedding terms.

    Returns ``(total, parts)`` where ``parts`` holds the detached component values.
    """
    w = w or LossWeights()
    l_sisdr = si_sdr_loss(y, s_hat)
    total = w.alpha * l_sisdr
    parts = {"si_sdr": float(l_sisdr.detach())}
    if X_hat is not None and (w.beta or w.gamma):
        l_rec, l_tse = masked_mse_losses(X_hat, Y, masked)
        total = total + w.beta * l_rec + w.gamma * l_tse
        parts["recover"] = float(l_rec.detach())
        parts["tse_embedding"] = float(l_tse.detach())
    parts["total"] = float(total.detach())
    return total, parts


def combine(parts: dict, w: LossWeights) -> float:
    return w.alpha * parts["si_sdr"] + w.beta * parts.get("recover", 0.0) + w.gamma * parts.get("tse_embedding", 0.0)
