"""Training loop: one forward edit and one reverse edit per step.

Each step noises the *input* image (never a ground-truth edit), predicts the
forward noise under the edit instruction, recovers the edited image in a
single step, re-noises that estimate, predicts the reverse noise under the
reverse instruction, and recovers the reconstruction. The four losses are
computed from these intermediates and backpropagated once through both
passes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import losses as L
from .datagen import EditSample
from .diffusion import (EditModel, ModelConfig, NoiseSchedule, add_noise, apply,
                        load_model, make_schedule, save_model)
from .embedding import (EmbeddingBackend, InputError, embed_image_batch,
                        embed_text_batch)

Batch = list[tuple[EditSample, np.ndarray]]


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    loss_options: L.LossOptions = field(default_factory=L.LossOptions)
    timestep_policy: str = "random-independent"  # or "shared"
    t_min: int = 20
    t_max: int = 980
    seed: int = 0
    use_sim: bool = True
    use_attn: bool = True
    grad_flow: str = "full"  # or "stop-at-edit"
    cond_dropout: float = 0.05
    validation_interval: int = 200
    schedule_T: int = 1000
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.timestep_policy not in ("random-independent", "shared"):
            raise ConfigError(f"unknown timestep policy {self.timestep_policy!r}")
        if self.grad_flow not in ("full", "stop-at-edit"):
            raise ConfigError(f"unknown grad-flow policy {self.grad_flow!r}")
        if not 1 <= self.t_min <= self.t_max <= self.schedule_T:
            raise ConfigError("need 1 <= t_min <= t_max <= T")

    def effective_weights(self) -> L.LossWeights:
        """Ablation toggles zero out the corresponding weights."""
        w = self.weights
        return L.LossWeights(
            clip_direction=w.clip_direction,
            attn_align=w.attn_align if self.use_attn else 0.0,
            clip_sim=w.clip_sim if self.use_sim else 0.0,
            recon=w.recon)


# flat key-value config file support; CLI overrides win over file values
_CONFIG_KEYS = {
    "iterations": int, "batch_size": int, "lr": float, "weight_decay": float,
    "timestep_policy": str, "t_min": int, "t_max": int, "seed": int,
    "use_sim": lambda s: s.lower() in ("1", "true", "yes"),
    "use_attn": lambda s: s.lower() in ("1", "true", "yes"),
    "grad_flow": str, "cond_dropout": float, "validation_interval": int,
    "schedule_T": int,
    "lambda_clip": float, "lambda_attn": float, "lambda_sim": float,
    "lambda_recon": float,
}


def parse_config_file(path: str) -> dict:
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _CONFIG_KEYS[key](raw)
    return values


def config_from_values(values: dict) -> TrainConfig:
    weights = L.LossWeights(
        clip_direction=values.pop("lambda_clip", 1.0),
        attn_align=values.pop("lambda_attn", 0.5),
        clip_sim=values.pop("lambda_sim", 1.0),
        recon=values.pop("lambda_recon", 1.0))
    return TrainConfig(weights=weights, **values)


@dataclass
class TrainState:
    model: EditModel
    optimizer: torch.optim.Optimizer
    sched: NoiseSchedule
    step: int = 0
    best_step: int = -1
    best_val: float = float("inf")
    generator: torch.Generator = field(default_factory=torch.Generator)


def init_state(config: TrainConfig, vocabulary: list[str]) -> TrainState:
    torch.manual_seed(config.seed)
    model = EditModel(vocabulary, config.model, T=config.schedule_T)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr,
                                  betas=config.betas,
                                  weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    return TrainState(model=model, optimizer=optimizer,
                      sched=make_schedule(config.schedule_T), generator=gen)


def _sample_timesteps(config: TrainConfig, n: int, gen: torch.Generator) -> torch.Tensor:
    return torch.randint(config.t_min, config.t_max + 1, (n,), generator=gen)


def _dropout_conditioning(model: EditModel, cond: torch.Tensor, tokens: torch.Tensor,
                          p: float, gen: torch.Generator
                          ) -> tuple[torch.Tensor, torch.Tensor]:
    """Classifier-free-guidance dropout: text, image, or both, each with prob p."""
    if p <= 0:
        return cond, tokens
    n = cond.shape[0]
    u = torch.rand(n, generator=gen)
    drop_text = (u < p) | ((u >= 2 * p) & (u < 3 * p))
    drop_image = ((u >= p) & (u < 2 * p)) | ((u >= 2 * p) & (u < 3 * p))
    tokens = tokens.clone()
    tokens[drop_text] = model.null_tokens()
    cond = cond.clone()
    cond[drop_image] = 0.0
    return cond, tokens


def erc_losses(model: EditModel, sched: NoiseSchedule, embedding: EmbeddingBackend,
               images: torch.Tensor, forward_tokens: torch.Tensor,
               reverse_tokens: torch.Tensor, input_captions: list[str],
               edited_captions: list[str], t: torch.Tensor, t_hat: torch.Tensor,
               eps_f: torch.Tensor, eps_r: torch.Tensor, config: TrainConfig,
               cond_f: torch.Tensor | None = None,
               cond_tokens_f: torch.Tensor | None = None,
               ) -> tuple[L.LossBreakdown, dict]:
    """Run both edit passes and compute the loss breakdown (batch mean).

    eps_f/eps_r are the pre-drawn noise tensors so callers control randomness.
    Returns the breakdown plus the intermediates for independent recomputation.
    """
    n = images.shape[0]
    cond_f = images if cond_f is None else cond_f
    tok_f = forward_tokens if cond_tokens_f is None else cond_tokens_f

    z_t = add_noise(images, t, eps_f, sched)
    noise_pred_f, attn_f = model(z_t, t, cond_f, tok_f)
    edited = apply(noise_pred_f, z_t, t, sched)

    reverse_input = edited.detach() if config.grad_flow == "stop-at-edit" else edited
    z_th = add_noise(reverse_input, t_hat, eps_r, sched)
    noise_pred_r, attn_r = model(z_th, t_hat, reverse_input, reverse_tokens)
    recon = apply(noise_pred_r, z_th, t_hat, sched)

    e_input = embed_image_batch(images, embedding)
    e_edit = embed_image_batch(edited, embedding)
    e_recon = embed_image_batch(recon, embedding)
    with torch.no_grad():
        e_txt_in = embed_text_batch(input_captions, embedding)
        e_txt_ed = embed_text_batch(edited_captions, embedding)

    direction = torch.stack([
        L.clip_direction_loss(e_input[i], e_edit[i], e_txt_in[i], e_txt_ed[i])
        for i in range(n)]).mean()
    sim = torch.stack([
        L.clip_similarity_loss(e_edit[i], e_txt_ed[i]) for i in range(n)]).mean()
    recon_loss = torch.stack([
        L.reconstruction_loss(images[i], recon[i], e_input[i], e_recon[i],
                              config.loss_options)
        for i in range(n)]).mean()
    attn = L.attention_alignment_loss(attn_f, attn_r, config.loss_options)

    breakdown = L.total_loss(direction, attn, sim, recon_loss,
                             config.effective_weights())
    intermediates = {
        "edited": edited.detach(), "recon": recon.detach(),
        "attn_f": attn_f.detached(), "attn_r": attn_r.detached(),
        "e_input": e_input.detach(), "e_edit": e_edit.detach(),
        "e_recon": e_recon.detach(), "e_txt_in": e_txt_in, "e_txt_ed": e_txt_ed,
    }
    return breakdown, intermediates


def prepare_batch(batch: Batch, model: EditModel
                  ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, list[str], list[str]]:
    for sample, _ in batch:
        if sample.gt_image is not None:
            raise DataError(f"training record {sample.id} carries a ground-truth edit")
    images = torch.stack([torch.as_tensor(img, dtype=torch.float32) for _, img in batch])
    fwd = torch.stack([model.tokenize_instruction(s.edit_instruction) for s, _ in batch])
    rev = torch.stack([model.tokenize_instruction(s.reverse_instruction) for s, _ in batch])
    caps_in = [s.input_caption for s, _ in batch]
    caps_ed = [s.edited_caption for s, _ in batch]
    return images, fwd, rev, caps_in, caps_ed


def train_step(batch: Batch, state: TrainState, embedding: EmbeddingBackend,
               config: TrainConfig, dump_dir: str | None = None
               ) -> L.LossBreakdown:
    model, gen = state.model, state.generator
    model.train()
    images, fwd, rev, caps_in, caps_ed = prepare_batch(batch, model)
    n = images.shape[0]

    t = _sample_timesteps(config, n, gen)
    t_hat = t if config.timestep_policy == "shared" else _sample_timesteps(config, n, gen)
    eps_f = torch.randn(images.shape, generator=gen)
    eps_r = torch.randn(images.shape, generator=gen)
    cond_f, tok_f = _dropout_conditioning(model, images, fwd, config.cond_dropout, gen)

    breakdown, _ = erc_losses(model, state.sched, embedding, images, fwd, rev,
                              caps_in, caps_ed, t, t_hat, eps_f, eps_r, config,
                              cond_f=cond_f, cond_tokens_f=tok_f)
    if not torch.isfinite(breakdown.total):
        dump_path = None
        if dump_dir:
            dump_path = os.path.join(dump_dir, f"diverged_step{state.step}.json")
            with open(dump_path, "w") as f:
                json.dump({"step": state.step, "loss": breakdown.as_dict(),
                           "sample_ids": [s.id for s, _ in batch],
                           "t": t.tolist(), "t_hat": t_hat.tolist()}, f, indent=1)
        raise TrainingDiverged(f"non-finite loss at step {state.step}", dump_path)

    w = config.effective_weights()
    if w.clip_direction + w.attn_align + w.clip_sim + w.recon > 0:
        state.optimizer.zero_grad()
        breakdown.total.backward()
        state.optimizer.step()
    state.step += 1
    return breakdown


@torch.no_grad()
def validation_loss(records: Batch, state: TrainState, embedding: EmbeddingBackend,
                    config: TrainConfig) -> float:
    """Mean total loss with default weights on the validation split.

    Uses a fixed generator seed so successive evaluations see the same noise
    draws and are comparable across checkpoints and ablation settings.
    """
    if not records:
        raise ConfigError("empty validation split")
    model = state.model
    model.eval()
    val_cfg = replace(config, use_sim=True, use_attn=True,
                      weights=L.LossWeights(), cond_dropout=0.0)
    gen = torch.Generator().manual_seed(config.seed + 1)
    totals = []
    bs = config.batch_size
    for start in range(0, len(records), bs):
        chunk = [(replace(s, gt_image=None), img) for s, img in records[start:start + bs]]
        images, fwd, rev, caps_in, caps_ed = prepare_batch(chunk, model)
        n = images.shape[0]
        t = _sample_timesteps(config, n, gen)
        t_hat = _sample_timesteps(config, n, gen)
        eps_f = torch.randn(images.shape, generator=gen)
        eps_r = torch.randn(images.shape, generator=gen)
        breakdown, _ = erc_losses(model, state.sched, embedding, images, fwd, rev,
                                  caps_in, caps_ed, t, t_hat, eps_f, eps_r, val_cfg)
        totals.append(float(breakdown.total) * n)
    model.train()
    return sum(totals) / len(records)


@dataclass
class TrainResult:
    best_checkpoint: str
    best_step: int
    best_val: float
    metrics_log: str
    final_checkpoint: str


def save_checkpoint(state: TrainState, path: str) -> None:
    """Atomic write: model file then sidecar with optimizer and rng state."""
    tmp = path + ".tmp"
    save_model(state.model, tmp)
    os.replace(tmp, path)
    side = {
        "step": state.step, "best_step": state.best_step, "best_val": state.best_val,
        "optimizer": state.optimizer.state_dict(),
        "generator": state.generator.get_state(),
    }
    tmp = path + ".train.tmp"
    torch.save(side, tmp)
    os.replace(tmp, path + ".train")


def load_checkpoint(path: str, config: TrainConfig) -> TrainState:
    model = load_model(path)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr,
                                  betas=config.betas,
                                  weight_decay=config.weight_decay)
    state = TrainState(model=model, optimizer=optimizer,
                       sched=make_schedule(config.schedule_T))
    side_path = path + ".train"
    if os.path.exists(side_path):
        side = torch.load(side_path, weights_only=False)
        state.step = side["step"]
        state.best_step = side["best_step"]
        state.best_val = side["best_val"]
        state.optimizer.load_state_dict(side["optimizer"])
        state.generator.set_state(side["generator"])
    return state


def train(config: TrainConfig, train_records: Batch, val_records: Batch,
          embedding: EmbeddingBackend, out_dir: str,
          vocabulary: list[str] | None = None,
          log_every: int = 1) -> TrainResult:
    """Run the full loop, tracking the validation arg-min checkpoint."""
    if not train_records:
        raise DataError("empty training set")
    if not val_records:
        raise ConfigError("empty validation split")
    train_ids = {s.id for s, _ in train_records}
    if train_ids & {s.id for s, _ in val_records}:
        raise ConfigError("validation split overlaps the training set")

    os.makedirs(out_dir, exist_ok=True)
    vocab = vocabulary or sorted({w for s, _ in train_records
                                  for text in (s.input_caption, s.edit_instruction,
                                               s.edited_caption, s.reverse_instruction)
                                  for w in text.lower().split()})
    state = init_state(config, vocab)
    rng = np.random.default_rng(config.seed)
    best_path = os.path.join(out_dir, "best.ckpt")
    final_path = os.path.join(out_dir, "final.ckpt")
    log_path = os.path.join(out_dir, "metrics.jsonl")

    def validate() -> None:
        val = validation_loss(val_records, state, embedding, config)
        if val < state.best_val:
            state.best_val = val
            state.best_step = state.step
            save_checkpoint(state, best_path)
        with open(log_path, "a") as f:
            f.write(json.dumps({"step": state.step, "val_total": val}) + "\n")

    with open(log_path, "w"):
        pass
    validate()  # iteration-0 baseline
    for _ in range(config.iterations):
        idx = rng.choice(len(train_records), size=config.batch_size,
                         replace=len(train_records) < config.batch_size)
        batch = [train_records[i] for i in idx]
        breakdown = train_step(batch, state, embedding, config, dump_dir=out_dir)
        if state.step % log_every == 0:
            with open(log_path, "a") as f:
                f.write(json.dumps({"step": state.step, **breakdown.as_dict()}) + "\n")
        if state.step % config.validation_interval == 0:
            validate()
    if state.step % config.validation_interval != 0:
        validate()
    save_checkpoint(state, final_path)
    return TrainResult(best_checkpoint=best_path, best_step=state.best_step,
                       best_val=state.best_val, metrics_log=log_path,
                       final_checkpoint=final_path)


def grad_check(model: EditModel, sample: tuple[EditSample, np.ndarray],
               embedding: EmbeddingBackend, config: TrainConfig,
               n_coords: int = 50, fd_step: float = 1e-4, seed: int = 0) -> float:
    """Max relative error of analytic parameter gradients vs central differences.

    Runs the whole two-pass loss in float64 on a tiny model.
    """
    model = model.double()
    emb_img = embedding.image_encoder.double()
    emb_txt = embedding.text_encoder.double()
    del emb_img, emb_txt
    sched = make_schedule(config.schedule_T)
    gen = torch.Generator().manual_seed(seed)
    images, fwd, rev, caps_in, caps_ed = prepare_batch(
        [(replace(sample[0], gt_image=None), sample[1])], model)
    images = images.double()
    t = _sample_timesteps(config, 1, gen)
    t_hat = _sample_timesteps(config, 1, gen)
    eps_f = torch.randn(images.shape, generator=gen, dtype=torch.float64)
    eps_r = torch.randn(images.shape, generator=gen, dtype=torch.float64)

    def loss_value() -> torch.Tensor:
        breakdown, _ = erc_losses(model, sched, embedding, images, fwd, rev,
                                  caps_in, caps_ed, t, t_hat, eps_f, eps_r, config)
        return breakdown.total

    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_value().backward()
    flat_grad = torch.cat([p.grad.flatten() for p in params])
    flat = torch.cat([p.detach().flatten() for p in params])
    n_total = flat.numel()
    rng = np.random.default_rng(seed)
    coords = rng.choice(n_total, size=min(n_coords, n_total), replace=False)

    def perturb(i: int, delta: float) -> None:
        offset = 0
        for p in params:
            if offset <= i < offset + p.numel():
                p.data.flatten()[i - offset] += delta
                return
            offset += p.numel()

    max_rel = 0.0
    for i in coords:
        i = int(i)
        perturb(i, fd_step)
        with torch.no_grad():
            up = float(loss_value())
        perturb(i, -2 * fd_step)
        with torch.no_grad():
            down = float(loss_value())
        perturb(i, fd_step)
        fd = (up - down) / (2 * fd_step)
        analytic = float(flat_grad[i])
        denom = max(abs(fd), abs(analytic), 1e-8)
        max_rel = max(max_rel, abs(fd - analytic) / denom)
    return max_rel
