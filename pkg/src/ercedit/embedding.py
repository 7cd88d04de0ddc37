"""Joint text-image embedding space.

A small contrastive model (strided-conv image encoder, bag-of-words text
encoder) trained on the synthetic scene corpus. Once frozen it is used as a
fixed feature extractor by every loss and metric; gradients still flow
through the *image input* so the editing model can be trained against it.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

UNK_TOKEN = "<unk>"
NORM_EPS = 1e-8
CHECKPOINT_MAGIC = "erc-embed v1"


class InputError(ValueError):
    """Raised when an operation receives malformed input."""


@dataclass
class EmbeddingConfig:
    dim: int = 64
    image_size: int = 32
    channels: int = 3
    hidden: int = 128
    temperature: float = 0.07
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 12
    seed: int = 0
    holdout_fraction: float = 0.1


def tokenize(caption: str) -> list[str]:
    """Lowercase whitespace tokenization; punctuation is not expected."""
    return caption.lower().split()


def build_vocab(captions: list[str]) -> list[str]:
    """Ordered vocabulary over a caption corpus, UNK first."""
    words = sorted({w for c in captions for w in tokenize(c)})
    if not words:
        raise InputError("empty corpus: cannot build vocabulary")
    return [UNK_TOKEN] + words


class _ImageEncoder(nn.Module):
    """3 strided conv blocks + linear head."""

    def __init__(self, cfg: EmbeddingConfig):
        super().__init__()
        c = cfg.channels
        self.convs = nn.Sequential(
            nn.Conv2d(c, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.ReLU(),
        )
        spatial = cfg.image_size // 8
        self.head = nn.Linear(128 * spatial * spatial, cfg.dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.convs(x)
        return self.head(h.flatten(1))


class _TextEncoder(nn.Module):
    """Bag of learned word vectors + one hidden layer."""

    def __init__(self, vocab_size: int, cfg: EmbeddingConfig):
        super().__init__()
        self.table = nn.Embedding(vocab_size, cfg.hidden)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.hidden, cfg.hidden), nn.ReLU(),
            nn.Linear(cfg.hidden, cfg.dim),
        )

    def forward(self, token_ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        vecs = self.table(token_ids) * mask.unsqueeze(-1)
        pooled = vecs.sum(1) / mask.sum(1, keepdim=True).clamp(min=1.0)
        return self.mlp(pooled)


@dataclass
class EmbeddingBackend:
    """Paired encoders over a fixed vocabulary.

    When ``frozen`` is True the parameters are immutable and encoding is a
    pure function of the inputs.
    """

    image_encoder: _ImageEncoder
    text_encoder: _TextEncoder
    vocabulary: list[str]
    config: EmbeddingConfig
    frozen: bool = False
    _word_ids: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._word_ids:
            self._word_ids = {w: i for i, w in enumerate(self.vocabulary)}

    @property
    def dim(self) -> int:
        return self.config.dim

    def freeze(self) -> "EmbeddingBackend":
        for p in self.parameters():
            p.requires_grad_(False)
        self.image_encoder.eval()
        self.text_encoder.eval()
        self.frozen = True
        return self

    def parameters(self):
        yield from self.image_encoder.parameters()
        yield from self.text_encoder.parameters()

    def token_ids(self, caption: str) -> list[int]:
        unk = self._word_ids[UNK_TOKEN]
        return [self._word_ids.get(w, unk) for w in tokenize(caption)]


def new_backend(vocabulary: list[str], config: EmbeddingConfig | None = None,
                seed: int = 0) -> EmbeddingBackend:
    cfg = config or EmbeddingConfig()
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)  # nn init uses the global generator
    del gen
    return EmbeddingBackend(_ImageEncoder(cfg), _TextEncoder(len(vocabulary), cfg),
                            list(vocabulary), cfg)


def _as_image_batch(image, cfg: EmbeddingConfig) -> torch.Tensor:
    """Accept HWC or NHWC (numpy or torch) and return NCHW float32."""
    x = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image)
    x = x.float() if not x.is_floating_point() else x
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != cfg.image_size or x.shape[2] != cfg.image_size \
            or x.shape[3] != cfg.channels:
        raise InputError(
            f"expected image of shape ({cfg.image_size},{cfg.image_size},{cfg.channels}), "
            f"got {tuple(x.shape)}")
    return x.permute(0, 3, 1, 2)


def normalize(v: torch.Tensor) -> torch.Tensor:
    return v / v.norm(dim=-1, keepdim=True).clamp(min=NORM_EPS)


def embed_image_batch(images, backend: EmbeddingBackend) -> torch.Tensor:
    x = _as_image_batch(images, backend.config)
    return normalize(backend.image_encoder(x))


def embed_image(image, backend: EmbeddingBackend) -> torch.Tensor:
    """Unit-norm embedding of one HWC image in model space [-1, 1].

    Differentiable with respect to the image even on a frozen backend.
    """
    return embed_image_batch(image, backend)[0]


def embed_text_batch(captions: list[str], backend: EmbeddingBackend) -> torch.Tensor:
    if any(not c.strip() for c in captions):
        raise InputError("empty caption")
    ids = [backend.token_ids(c) for c in captions]
    width = max(len(t) for t in ids)
    tok = torch.zeros(len(ids), width, dtype=torch.long)
    mask = torch.zeros(len(ids), width)
    for i, t in enumerate(ids):
        tok[i, :len(t)] = torch.tensor(t)
        mask[i, :len(t)] = 1.0
    return normalize(backend.text_encoder(tok, mask))


def embed_text(caption: str, backend: EmbeddingBackend) -> torch.Tensor:
    return embed_text_batch([caption], backend)[0]


def cosine(a, b) -> float:
    """Cosine similarity in [-1, 1]; degenerate (near-zero norm) inputs give 0."""
    value, _ = cosine_with_flag(a, b)
    return value


def cosine_with_flag(a, b) -> tuple[float, bool]:
    """Cosine similarity plus a flag marking a near-zero-norm input."""
    ta = torch.as_tensor(a, dtype=torch.float64).flatten()
    tb = torch.as_tensor(b, dtype=torch.float64).flatten()
    if ta.shape != tb.shape:
        raise InputError(f"dimension mismatch: {ta.shape[0]} vs {tb.shape[0]}")
    na, nb = ta.norm(), tb.norm()
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0, True
    return float(torch.clamp(ta @ tb / (na * nb), -1.0, 1.0)), False


def cosine_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable cosine on flattened tensors (no degeneracy guard)."""
    a, b = a.flatten(), b.flatten()
    if a.shape != b.shape:
        raise InputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return (a @ b) / (a.norm() * b.norm()).clamp(min=NORM_EPS)


def retrieval_accuracy(backend: EmbeddingBackend, pairs: list[tuple[np.ndarray, str]],
                       batch_size: int = 16) -> float:
    """Top-1 in-batch image->caption retrieval accuracy."""
    hits, total = 0, 0
    with torch.no_grad():
        for start in range(0, len(pairs) - batch_size + 1, batch_size):
            chunk = pairs[start:start + batch_size]
            imgs = np.stack([p[0] for p in chunk])
            caps = [p[1] for p in chunk]
            ei = embed_image_batch(imgs, backend)
            et = embed_text_batch(caps, backend)
            sims = ei @ et.T
            hits += int((sims.argmax(1) == torch.arange(len(chunk))).sum())
            total += len(chunk)
    return hits / max(total, 1)


def train_contrastive(pairs: list[tuple[np.ndarray, str]],
                      config: EmbeddingConfig | None = None,
                      vocabulary: list[str] | None = None,
                      ) -> tuple[EmbeddingBackend, float]:
    """Train the symmetric in-batch contrastive objective and freeze the result.

    Returns (frozen backend, held-out top-1 retrieval accuracy).
    """
    cfg = config or EmbeddingConfig()
    if len(pairs) < cfg.batch_size:
        raise InputError(f"need at least {cfg.batch_size} pairs, got {len(pairs)}")
    vocab = vocabulary or build_vocab([c for _, c in pairs])
    torch.manual_seed(cfg.seed)
    backend = EmbeddingBackend(_ImageEncoder(cfg),
                               _TextEncoder(len(vocab), cfg), vocab, cfg)
    n_hold = max(cfg.batch_size, int(len(pairs) * cfg.holdout_fraction))
    train_pairs, held = pairs[:-n_hold], pairs[-n_hold:]

    opt = torch.optim.Adam(backend.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    order = np.arange(len(train_pairs))
    for _ in range(cfg.epochs):
        rng.shuffle(order)
        for start in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            imgs = np.stack([train_pairs[i][0] for i in idx])
            caps = [train_pairs[i][1] for i in idx]
            ei = embed_image_batch(imgs, backend)
            et = embed_text_batch(caps, backend)
            logits = ei @ et.T / cfg.temperature
            target = torch.arange(len(idx))
            loss = 0.5 * (F.cross_entropy(logits, target)
                          + F.cross_entropy(logits.T, target))
            opt.zero_grad()
            loss.backward()
            opt.step()

    backend.freeze()
    return backend, retrieval_accuracy(backend, held, cfg.batch_size)


def save_backend(backend: EmbeddingBackend, path: str) -> None:
    """Checkpoint: text header line, UTF-8 vocab block, torch payload."""
    header = f"{CHECKPOINT_MAGIC} d={backend.config.dim} vocab={len(backend.vocabulary)}\n"
    vocab_blob = "\n".join(backend.vocabulary).encode("utf-8")
    buf = io.BytesIO()
    torch.save({
        "config": vars(backend.config),
        "image_encoder": backend.image_encoder.state_dict(),
        "text_encoder": backend.text_encoder.state_dict(),
    }, buf)
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        f.write(struct.pack("<q", len(vocab_blob)))
        f.write(vocab_blob)
        f.write(buf.getvalue())


def load_backend(path: str) -> EmbeddingBackend:
    with open(path, "rb") as f:
        header = f.readline().decode("utf-8").strip()
        if not header.startswith(CHECKPOINT_MAGIC):
            raise InputError(f"not an embedding checkpoint: {header!r}")
        (vlen,) = struct.unpack("<q", f.read(8))
        vocab = f.read(vlen).decode("utf-8").split("\n")
        payload = torch.load(io.BytesIO(f.read()), weights_only=True)
    cfg = EmbeddingConfig(**payload["config"])
    backend = EmbeddingBackend(_ImageEncoder(cfg),
                               _TextEncoder(len(vocab), cfg), vocab, cfg)
    backend.image_encoder.load_state_dict(payload["image_encoder"])
    backend.text_encoder.load_state_dict(payload["text_encoder"])
    return backend.freeze()
