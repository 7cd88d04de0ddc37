"""Evaluation protocols and metrics.

Pixel metrics (L1, L2) are computed in file space [0, 1] per-element mean.
Embedding metrics use the main contrastive backend (image-image and
image-caption cosine) plus an independently seeded auxiliary backend for a
second opinion on image similarity. Protocols: single-turn, multi-turn
(chained edits scored against the final target), the guidance trade-off
curve, and the inference round trip (forward edit then reverse edit).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .datagen import EditSample
from .diffusion import EditModel, NoiseSchedule, sample_cfg_batch
from .embedding import EmbeddingBackend, cosine, embed_image, embed_text
from .losses import clip_direction_loss


class ProtocolError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class SamplerParams:
    s_T: float = 1.5
    s_I: float = 1.5
    steps: int = 10
    seed: int = 0
    batch_size: int = 64


class GuidedSampler:
    """Wraps a trained model for batched guided editing."""

    def __init__(self, model: EditModel, sched: NoiseSchedule):
        self.model = model
        self.sched = sched

    def edit_batch(self, images: torch.Tensor, instructions: list[str],
                   params: SamplerParams) -> torch.Tensor:
        rng = torch.Generator().manual_seed(params.seed)
        out = []
        bs = params.batch_size
        for start in range(0, images.shape[0], bs):
            out.append(sample_cfg_batch(images[start:start + bs],
                                        instructions[start:start + bs],
                                        params.s_T, params.s_I, params.steps,
                                        self.model, self.sched, rng))
        return torch.cat(out)


class IdentitySampler:
    """Returns inputs unchanged; harness sanity baseline."""

    def edit_batch(self, images: torch.Tensor, instructions: list[str],
                   params: SamplerParams) -> torch.Tensor:
        return images.clone()


def _to_unit(x) -> np.ndarray:
    """Model space [-1, 1] -> file-space scale [0, 1] floats."""
    arr = x.detach().numpy() if torch.is_tensor(x) else np.asarray(x)
    return np.clip((arr + 1.0) / 2.0, 0.0, 1.0)


def metrics(edited, reference, caption: str, emb_main: EmbeddingBackend,
            emb_aux: EmbeddingBackend) -> dict[str, float]:
    """Per-sample metric record against a ground-truth reference render."""
    if reference is None:
        raise ProtocolError("record has no ground-truth edited image")
    e = _to_unit(edited)
    r = _to_unit(reference)
    if e.shape != r.shape:
        raise ProtocolError("image shape mismatch")
    edited_t = torch.as_tensor(np.asarray(edited, dtype=np.float32)) \
        if not torch.is_tensor(edited) else edited.float()
    ref_t = torch.as_tensor(np.asarray(reference, dtype=np.float32)) \
        if not torch.is_tensor(reference) else reference.float()
    return {
        "l1": float(np.abs(e - r).mean()),
        "l2": float(((e - r) ** 2).mean()),
        "clip_i": cosine(embed_image(edited_t, emb_main), embed_image(ref_t, emb_main)),
        "dino_like": cosine(embed_image(edited_t, emb_aux), embed_image(ref_t, emb_aux)),
        "clip_t": cosine(embed_image(edited_t, emb_main), embed_text(caption, emb_main)),
    }


def direction_similarity(input_img, edited_img, input_caption: str,
                         edited_caption: str, emb: EmbeddingBackend) -> float:
    """cos(image-embedding delta, caption-embedding delta); degenerate -> 0."""
    e_ii = embed_image(torch.as_tensor(np.asarray(input_img, dtype=np.float32)), emb)
    e_ie = embed_image(torch.as_tensor(np.asarray(edited_img, dtype=np.float32))
                       if not torch.is_tensor(edited_img) else edited_img.float(), emb)
    e_ti = embed_text(input_caption, emb)
    e_te = embed_text(edited_caption, emb)
    loss = clip_direction_loss(e_ii, e_ie, e_ti, e_te)
    return float(1.0 - loss)


@dataclass
class MetricsReport:
    protocol: str
    model_id: str
    config: dict
    per_sample: list[dict] = field(default_factory=list)
    aggregates: dict[str, float] = field(default_factory=dict)

    def aggregate(self) -> None:
        if not self.per_sample:
            return
        keys = [k for k, v in self.per_sample[0].items()
                if isinstance(v, (int, float)) and k != "id"]
        self.aggregates = {k: float(np.mean([row[k] for row in self.per_sample]))
                           for k in keys}

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"protocol": self.protocol, "model_id": self.model_id,
                                "config": self.config}) + "\n")
            for row in self.per_sample:
                f.write(json.dumps(row) + "\n")
            f.write(json.dumps({"summary": self.aggregates}) + "\n")


EvalRecord = tuple[EditSample, np.ndarray, np.ndarray]  # sample, input, gt edit


def _edit_all(sampler, records: list[EvalRecord], params: SamplerParams,
              instructions: list[str] | None = None) -> torch.Tensor:
    images = torch.stack([torch.as_tensor(img, dtype=torch.float32)
                          for _, img, _ in records])
    instructions = instructions or [s.edit_instruction for s, _, _ in records]
    return sampler.edit_batch(images, instructions, params)


def eval_single_turn(sampler, records: list[EvalRecord], params: SamplerParams,
                     emb_main: EmbeddingBackend, emb_aux: EmbeddingBackend,
                     model_id: str = "model") -> MetricsReport:
    report = MetricsReport("single-turn", model_id, asdict(params))
    edited = _edit_all(sampler, records, params)
    for i, (sample, _, gt) in enumerate(records):
        row = metrics(edited[i], gt, sample.edited_caption, emb_main, emb_aux)
        row["id"] = sample.id
        report.per_sample.append(row)
    report.aggregate()
    return report


def eval_multi_turn(sampler, sessions: list[list[EvalRecord]], params: SamplerParams,
                    emb_main: EmbeddingBackend, emb_aux: EmbeddingBackend,
                    model_id: str = "model") -> MetricsReport:
    """Chained editing: each turn's output feeds the next turn's input."""
    for session in sessions:
        for (_, _, gt), (_, nxt, _) in zip(session, session[1:]):
            if not np.allclose(gt, nxt):
                raise DataError("broken session chain: turn GT != next turn input")
    report = MetricsReport("multi-turn", model_id, asdict(params))
    current = torch.stack([torch.as_tensor(sess[0][1], dtype=torch.float32)
                           for sess in sessions])
    max_len = max(len(s) for s in sessions)
    for turn in range(max_len):
        idx = [i for i, s in enumerate(sessions) if len(s) > turn]
        instructions = [sessions[i][turn][0].edit_instruction for i in idx]
        out = sampler.edit_batch(current[idx], instructions, params)
        for j, i in enumerate(idx):
            current[i] = out[j]
    for i, session in enumerate(sessions):
        final_sample, _, final_gt = session[-1]
        row = metrics(current[i], final_gt, final_sample.edited_caption,
                      emb_main, emb_aux)
        row["id"] = final_sample.id
        row["turns"] = len(session)
        report.per_sample.append(row)
    report.aggregate()
    return report


def tradeoff_curve(sampler, records: list[EvalRecord], image_scales: list[float],
                   s_T: float, params: SamplerParams, emb: EmbeddingBackend
                   ) -> list[dict[str, float]]:
    """Per image-guidance scale: mean similarity to the INPUT image vs mean
    direction similarity. Image similarity is edited-to-input (not to GT)."""
    if len(image_scales) < 2:
        raise ProtocolError("need at least 2 guidance scales")
    points = []
    for s_i in image_scales:
        p = SamplerParams(s_T=s_T, s_I=s_i, steps=params.steps, seed=params.seed,
                          batch_size=params.batch_size)
        edited = _edit_all(sampler, records, p)
        img_sims, dir_sims = [], []
        for i, (sample, inp, _) in enumerate(records):
            inp_t = torch.as_tensor(inp, dtype=torch.float32)
            img_sims.append(cosine(embed_image(edited[i], emb),
                                   embed_image(inp_t, emb)))
            dir_sims.append(direction_similarity(inp, edited[i],
                                                 sample.input_caption,
                                                 sample.edited_caption, emb))
        points.append({"s_I": float(s_i),
                       "image_similarity": float(np.mean(img_sims)),
                       "direction_similarity": float(np.mean(dir_sims))})
    return points


def erc_roundtrip(sampler, records: list[EvalRecord], params: SamplerParams,
                  model_id: str = "model") -> MetricsReport:
    """L1 between the input and reverse(forward(input)), in file space."""
    forward = _edit_all(sampler, records, params)
    reverse_records = [(s, forward[i].numpy(), None)
                       for i, (s, _, _) in enumerate(records)]
    back = _edit_all(sampler, reverse_records, params,
                     instructions=[s.reverse_instruction for s, _, _ in records])
    report = MetricsReport("roundtrip", model_id, asdict(params))
    for i, (sample, inp, _) in enumerate(records):
        l1 = float(np.abs(_to_unit(back[i]) - _to_unit(inp)).mean())
        report.per_sample.append({"id": sample.id, "roundtrip_l1": l1})
    vals = np.array([r["roundtrip_l1"] for r in report.per_sample])
    report.aggregates = {
        "roundtrip_l1": float(vals.mean()),
        "roundtrip_l1_median": float(np.median(vals)),
        "roundtrip_l1_p90": float(np.percentile(vals, 90)),
    }
    return report
