"""Training losses: direction alignment, attention alignment, similarity,
reconstruction, and their weighted total.

All functions are pure and differentiable end-to-end. Near-zero-norm
direction vectors (e.g. an edit that changed nothing, common early in
training) are guarded to a neutral loss value instead of producing NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .diffusion import AttentionStack
from .embedding import NORM_EPS, InputError


class ConfigError(ValueError):
    """Raised on invalid loss configuration."""


@dataclass
class LossWeights:
    clip_direction: float = 1.0
    attn_align: float = 0.5
    clip_sim: float = 1.0
    recon: float = 1.0

    def __post_init__(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ConfigError(f"negative loss weight {name}={v}")


@dataclass
class LossOptions:
    squared_norms: bool = False        # use ||.||^2 instead of ||.|| in attn/pixel terms
    normalize_pixel_loss: bool = False  # divide the pixel term by element count


@dataclass
class LossBreakdown:
    clip_direction: torch.Tensor
    attn_align: torch.Tensor
    clip_sim: torch.Tensor
    recon: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {k: float(v.detach() if torch.is_tensor(v) else v)
                for k, v in vars(self).items()}


def _guarded_direction_cos(u: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, bool]:
    nu, nv = u.norm(), v.norm()
    if nu < NORM_EPS or nv < NORM_EPS:
        return torch.zeros((), dtype=u.dtype), True
    return (u @ v) / (nu * nv), False


def clip_direction_loss(e_input_img: torch.Tensor, e_edit_img: torch.Tensor,
                        e_input_txt: torch.Tensor, e_edit_txt: torch.Tensor
                        ) -> torch.Tensor:
    """1 - cos(image-embedding delta, caption-embedding delta).

    Degenerate deltas give loss 1 (cos treated as 0).
    """
    for e in (e_edit_img, e_input_txt, e_edit_txt):
        if e.shape != e_input_img.shape:
            raise InputError("embedding dimension mismatch")
    cos, _ = _guarded_direction_cos(e_edit_img - e_input_img, e_edit_txt - e_input_txt)
    return 1.0 - cos


def attention_alignment_loss(forward_maps: AttentionStack, reverse_maps: AttentionStack,
                             options: LossOptions | None = None) -> torch.Tensor:
    """Per-layer Frobenius distance between forward and reverse attention, summed.

    Batched stacks ((N, P, L) layers) return the mean over the batch of the
    per-sample layer sums.
    """
    opts = options or LossOptions()
    if len(forward_maps.layers) != len(reverse_maps.layers):
        raise InputError("attention stacks have different layer counts")
    total = None
    for a_f, a_r in zip(forward_maps.layers, reverse_maps.layers):
        if a_f.shape != a_r.shape:
            raise InputError("attention map shape mismatch")
        diff = a_f - a_r
        if diff.dim() == 3:  # batched
            sq = diff.pow(2).sum(dim=(1, 2))
            term = (sq if opts.squared_norms else torch.sqrt(sq)).mean()
        else:
            sq = diff.pow(2).sum()
            term = sq if opts.squared_norms else torch.sqrt(sq)
        total = term if total is None else total + term
    return total


def clip_similarity_loss(e_edit_img: torch.Tensor, e_edit_txt: torch.Tensor) -> torch.Tensor:
    """1 - cos(edited-image embedding, edited-caption embedding)."""
    if e_edit_img.shape != e_edit_txt.shape:
        raise InputError("embedding dimension mismatch")
    cos, _ = _guarded_direction_cos(e_edit_img, e_edit_txt)
    return 1.0 - cos


def reconstruction_loss(input_image: torch.Tensor, recon_image: torch.Tensor,
                        e_input_img: torch.Tensor, e_recon_img: torch.Tensor,
                        options: LossOptions | None = None) -> torch.Tensor:
    """Pixel L2 norm plus semantic cosine distance between input and reconstruction."""
    opts = options or LossOptions()
    if input_image.shape != recon_image.shape:
        raise InputError("image shape mismatch")
    if e_input_img.shape != e_recon_img.shape:
        raise InputError("embedding dimension mismatch")
    sq = (input_image - recon_image).pow(2).sum()
    pixel = sq if opts.squared_norms else torch.sqrt(sq)
    if opts.normalize_pixel_loss:
        pixel = pixel / input_image.numel()
    cos, _ = _guarded_direction_cos(e_input_img, e_recon_img)
    return pixel + (1.0 - cos)


def total_loss(clip_direction: torch.Tensor, attn_align: torch.Tensor,
               clip_sim: torch.Tensor, recon: torch.Tensor,
               weights: LossWeights | None = None) -> LossBreakdown:
    """Weighted combination of the four component losses."""
    w = weights or LossWeights()
    total = (w.clip_direction * clip_direction + w.attn_align * attn_align
             + w.clip_sim * clip_sim + w.recon * recon)
    return LossBreakdown(clip_direction=clip_direction, attn_align=attn_align,
                         clip_sim=clip_sim, recon=recon, total=total)
