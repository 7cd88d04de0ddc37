"""Diffusion machinery: schedule, forward noising, conditional denoiser.

The denoiser is a small U-Net conditioned on a timestep, a condition image
(channel-concatenated, 6 input channels) and an instruction token sequence
via cross-attention. Every cross-attention layer exposes its head-averaged
attention weights, which the reversibility losses compare between the
forward and reverse edit passes.

Images live in model space [-1, 1], shape HxWxC; file space is 8-bit RGB.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .embedding import InputError, tokenize

PAD_TOKEN = "<pad>"
NULL_TOKEN = "<null>"
UNK_TOKEN = "<unk>"
MODEL_CHECKPOINT_MAGIC = "erc-model v1"
ALPHA_BAR_GUARD = 1e-6


class NumericGuardError(ArithmeticError):
    """Raised when the signal coefficient is too small to divide by."""


@dataclass
class NoiseSchedule:
    """Cumulative signal coefficients alpha_bar_0..alpha_bar_T."""

    T: int
    alpha_bar: np.ndarray  # float64, length T + 1, strictly decreasing

    def at(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t > self.T).any():
            raise InputError(f"timestep out of range [0, {self.T}]")
        return torch.as_tensor(self.alpha_bar)[t]


def make_schedule(T: int = 1000, s: float = 0.008) -> NoiseSchedule:
    """Cosine-shaped cumulative schedule on T steps."""
    if T < 2:
        raise InputError("schedule needs T >= 2")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T) + s) / (1 + s) * math.pi / 2) ** 2
    alpha_bar = np.clip(f / f[0], 1e-12, 1.0)
    return NoiseSchedule(T=T, alpha_bar=alpha_bar)


def add_noise(x: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) * x + sqrt(1 - abar_t) * eps.

    Accepts a single HWC image with int t, or a NHWC batch with a length-N
    timestep vector.
    """
    t = torch.as_tensor(t, dtype=torch.long)
    if (t < 1).any() or (t > sched.T).any():
        raise InputError(f"timestep out of range [1, {sched.T}]")
    if eps.shape != x.shape:
        raise InputError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x.shape)}")
    ab = sched.at(t).to(x.dtype)
    shape = (-1,) + (1,) * (x.dim() - 1) if t.dim() else ()
    ab = ab.reshape(shape) if t.dim() else ab
    return torch.sqrt(ab) * x + torch.sqrt(1 - ab) * eps


def apply(noise_pred: torch.Tensor, z_t: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Single-step clean-image estimate x0 = (z_t - sqrt(1-abar_t) eps) / sqrt(abar_t)."""
    t = torch.as_tensor(t, dtype=torch.long)
    if (t < 1).any() or (t > sched.T).any():
        raise InputError(f"timestep out of range [1, {sched.T}]")
    if noise_pred.shape != z_t.shape:
        raise InputError("shape mismatch between prediction and noisy image")
    ab = sched.at(t).to(z_t.dtype)
    if (ab < ALPHA_BAR_GUARD).any():
        raise NumericGuardError(f"alpha_bar below {ALPHA_BAR_GUARD} at t={t.tolist()}")
    shape = (-1,) + (1,) * (z_t.dim() - 1) if t.dim() else ()
    ab = ab.reshape(shape) if t.dim() else ab
    return (z_t - torch.sqrt(1 - ab) * noise_pred) / torch.sqrt(ab)


@dataclass
class AttentionStack:
    """Head-averaged cross-attention maps, one (..., positions, tokens) per layer."""

    layers: list[torch.Tensor]

    def detached(self) -> "AttentionStack":
        return AttentionStack([a.detach() for a in self.layers])


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    base_channels: int = 32
    depth: int = 2
    heads: int = 2
    attn_dim: int = 32
    token_dim: int = 32
    max_tokens: int = 16
    time_dim: int = 32


def _timestep_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = (t.float() / T)[:, None] * freqs[None, :] * 1000.0
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class _CrossAttention(nn.Module):
    def __init__(self, channels: int, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.q = nn.Linear(channels, cfg.attn_dim)
        self.k = nn.Linear(cfg.token_dim, cfg.attn_dim)
        self.v = nn.Linear(cfg.token_dim, cfg.attn_dim)
        self.out = nn.Linear(cfg.attn_dim, channels)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: (N, C, H, W); tokens: (N, L, token_dim) -> (updated x, attn (N, P, L))."""
        n, c, h, w = x.shape
        p = h * w
        flat = x.flatten(2).transpose(1, 2)  # (N, P, C)
        q = self.q(flat).view(n, p, self.heads, -1).transpose(1, 2)
        k = self.k(tokens).view(n, tokens.shape[1], self.heads, -1).transpose(1, 2)
        v = self.v(tokens).view(n, tokens.shape[1], self.heads, -1).transpose(1, 2)
        scale = q.shape[-1] ** -0.5
        weights = torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1)  # (N, h, P, L)
        ctx = (weights @ v).transpose(1, 2).reshape(n, p, -1)
        updated = flat + self.out(ctx)
        return updated.transpose(1, 2).view(n, c, h, w), weights.mean(dim=1)


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(x) + self.time_proj(temb)[:, :, None, None])
        return self.skip(x) + self.conv2(h)


class EditModel(nn.Module):
    """Conditional single-step denoiser with exposed cross-attention maps."""

    def __init__(self, vocabulary: list[str], config: ModelConfig | None = None,
                 T: int = 1000):
        super().__init__()
        self.config = config or ModelConfig()
        self.T = T
        specials = [PAD_TOKEN, NULL_TOKEN, UNK_TOKEN]
        self.vocabulary = specials + [w for w in vocabulary if w not in specials]
        self._word_ids = {w: i for i, w in enumerate(self.vocabulary)}
        cfg = self.config

        self.token_table = nn.Embedding(len(self.vocabulary), cfg.token_dim)
        self.token_pos = nn.Parameter(torch.zeros(cfg.max_tokens, cfg.token_dim))
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(),
            nn.Linear(cfg.time_dim, cfg.time_dim))

        chans = [cfg.base_channels * (2 ** i) for i in range(cfg.depth + 1)]
        self.stem = nn.Conv2d(2 * cfg.channels, chans[0], 3, padding=1)
        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        for i in range(cfg.depth):
            self.down_res.append(_ResBlock(chans[i], chans[i + 1], cfg.time_dim))
            self.down_attn.append(_CrossAttention(chans[i + 1], cfg))
            self.downsample.append(nn.Conv2d(chans[i + 1], chans[i + 1], 3, stride=2, padding=1))
        self.mid = _ResBlock(chans[-1], chans[-1], cfg.time_dim)
        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.up_res.append(_ResBlock(chans[i + 1] * 2, chans[i], cfg.time_dim))
            self.up_attn.append(_CrossAttention(chans[i], cfg))
        self.head = nn.Conv2d(chans[0], cfg.channels, 3, padding=1)

    # --- instruction handling -------------------------------------------------

    def tokenize_instruction(self, text: str) -> torch.Tensor:
        """Word ids padded to max_tokens; unknown words map to UNK."""
        words = tokenize(text)
        if len(words) > self.config.max_tokens:
            raise InputError(
                f"instruction has {len(words)} tokens, capacity {self.config.max_tokens}")
        unk = self._word_ids[UNK_TOKEN]
        ids = [self._word_ids.get(w, unk) for w in words]
        ids += [self._word_ids[PAD_TOKEN]] * (self.config.max_tokens - len(ids))
        return torch.tensor(ids, dtype=torch.long)

    def null_tokens(self) -> torch.Tensor:
        """Reserved null sequence standing for dropped text conditioning."""
        return torch.full((self.config.max_tokens,), self._word_ids[NULL_TOKEN],
                          dtype=torch.long)

    # --- forward --------------------------------------------------------------

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond_image: torch.Tensor,
                instruction_tokens: torch.Tensor) -> tuple[torch.Tensor, AttentionStack]:
        """All tensors batched: z_t, cond_image (N, H, W, C); t (N,); tokens (N, L)."""
        x = torch.cat([z_t, cond_image], dim=-1).permute(0, 3, 1, 2)
        temb = self.time_mlp(_timestep_embedding(t, self.config.time_dim, self.T)
                             .to(x.dtype))
        tok = self.token_table(instruction_tokens) + self.token_pos[None, :, :]

        h = self.stem(x)
        maps: list[torch.Tensor] = []
        skips: list[torch.Tensor] = []
        for res, attn, down in zip(self.down_res, self.down_attn, self.downsample):
            h = res(h, temb)
            h, a = attn(h, tok)
            maps.append(a)
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb)
        for res, attn in zip(self.up_res, self.up_attn):
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = res(torch.cat([h, skip], dim=1), temb)
            h, a = attn(h, tok)
            maps.append(a)
        out = self.head(F.silu(h)).permute(0, 2, 3, 1)
        return out, AttentionStack(maps)


def predict(z_t: torch.Tensor, t, cond_image: torch.Tensor,
            instruction_tokens: torch.Tensor, model: EditModel
            ) -> tuple[torch.Tensor, AttentionStack]:
    """Denoiser call for a single sample or a batch.

    Single-sample inputs (HWC image, int t, (L,) tokens) come back unbatched.
    """
    single = z_t.dim() == 3
    if single:
        z_t, cond_image = z_t.unsqueeze(0), cond_image.unsqueeze(0)
        instruction_tokens = instruction_tokens.unsqueeze(0)
        t = torch.tensor([int(t)])
    else:
        t = torch.as_tensor(t, dtype=torch.long)
    if instruction_tokens.shape[-1] > model.config.max_tokens:
        raise InputError("token sequence exceeds model capacity")
    eps, attn = model(z_t, t, cond_image, instruction_tokens)
    if single:
        return eps[0], AttentionStack([a[0] for a in attn.layers])
    return eps, attn


def cfg_combine(eps_uncond: torch.Tensor, eps_image: torch.Tensor,
                eps_full: torch.Tensor, s_T: float, s_I: float) -> torch.Tensor:
    """Dual-scale guidance over (no cond), (image only), (image + text)."""
    return (eps_uncond
            + s_I * (eps_image - eps_uncond)
            + s_T * (eps_full - eps_image))


@torch.no_grad()
def sample_cfg(input_image: torch.Tensor, instruction: str, s_T: float, s_I: float,
               steps: int, model: EditModel, sched: NoiseSchedule,
               rng: torch.Generator) -> torch.Tensor:
    """Multi-step guided sampling conditioned on the input image.

    Deterministic given the rng seed: randomness enters only through the
    initial noise draw; intermediate states follow the clean-estimate update.
    """
    batch = sample_cfg_batch(input_image.unsqueeze(0), [instruction], s_T, s_I,
                             steps, model, sched, rng)
    return batch[0]


@torch.no_grad()
def sample_cfg_batch(input_images: torch.Tensor, instructions: list[str],
                     s_T: float, s_I: float, steps: int, model: EditModel,
                     sched: NoiseSchedule, rng: torch.Generator) -> torch.Tensor:
    if s_T < 0 or s_I < 0:
        raise InputError("guidance scales must be nonnegative")
    if steps > sched.T:
        raise InputError("more sampling steps than schedule steps")
    model.eval()
    n = input_images.shape[0]
    tokens = torch.stack([model.tokenize_instruction(c) for c in instructions])
    null_tok = model.null_tokens().expand(n, -1)
    null_img = torch.zeros_like(input_images)

    # start at the deepest level the clean-estimate division can handle;
    # alpha_bar there is ~1e-6 so the start state is still essentially noise
    t_start = int(np.searchsorted(-sched.alpha_bar, -ALPHA_BAR_GUARD) - 1)
    timesteps = np.unique(np.linspace(1, t_start, steps).round().astype(int))[::-1]
    z = torch.randn(input_images.shape, generator=rng)
    x0 = input_images
    for i, t in enumerate(timesteps):
        tt = torch.full((3 * n,), int(t), dtype=torch.long)
        z3 = z.repeat(3, 1, 1, 1)
        cond3 = torch.cat([null_img, input_images, input_images])
        tok3 = torch.cat([null_tok, tokens, tokens])
        tok3[:n] = null_tok  # uncond row keeps null text
        tok3[n:2 * n] = null_tok
        eps3, _ = model(z3, tt, cond3, tok3)
        guided = cfg_combine(eps3[:n], eps3[n:2 * n], eps3[2 * n:], s_T, s_I)
        x0 = apply(guided, z, int(t), sched)
        if i + 1 < len(timesteps):
            t_next = int(timesteps[i + 1])
            ab_next = sched.at(t_next).float()
            z = torch.sqrt(ab_next) * x0 + torch.sqrt(1 - ab_next) * guided
    return x0


# --- image space conversions and checkpointing -------------------------------

def to_file_space(x: torch.Tensor) -> np.ndarray:
    """Model space [-1, 1] -> 8-bit [0, 255]; clamps only at decode time."""
    arr = x.detach().clamp(-1.5, 1.5).numpy()
    return np.clip(np.round(255.0 * (arr + 1.0) / 2.0), 0, 255).astype(np.uint8)


def to_model_space(arr: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(arr.astype(np.float32) / 255.0 * 2.0 - 1.0)


def save_model(model: EditModel, path: str) -> None:
    buf = io.BytesIO()
    torch.save({
        "config": vars(model.config),
        "T": model.T,
        "vocabulary": model.vocabulary,
        "state": model.state_dict(),
    }, buf)
    with open(path, "wb") as f:
        f.write(f"{MODEL_CHECKPOINT_MAGIC}\n".encode("utf-8"))
        f.write(buf.getvalue())


def load_model(path: str) -> EditModel:
    with open(path, "rb") as f:
        header = f.readline().decode("utf-8").strip()
        if header != MODEL_CHECKPOINT_MAGIC:
            raise InputError(f"not a model checkpoint: {header!r}")
        payload = torch.load(io.BytesIO(f.read()), weights_only=True)
    model = EditModel(payload["vocabulary"], ModelConfig(**payload["config"]),
                      T=payload["T"])
    # vocabulary already contains the specials in saved order
    model.vocabulary = payload["vocabulary"]
    model._word_ids = {w: i for i, w in enumerate(model.vocabulary)}
    model.load_state_dict(payload["state"])
    model.eval()
    return model
