import numpy as np
import pytest
import torch

from ercedit import datagen as dg
from ercedit.diffusion import EditModel, ModelConfig, make_schedule
from ercedit.embedding import EmbeddingConfig, build_vocab, new_backend

TINY_MODEL = ModelConfig(base_channels=4, depth=2, heads=1, attn_dim=8,
                         token_dim=8, time_dim=8)


@pytest.fixture(scope="session")
def vocab():
    return dg.caption_vocabulary()


@pytest.fixture(scope="session")
def backend(vocab):
    cfg = EmbeddingConfig(dim=16, hidden=32)
    return new_backend(build_vocab([" ".join(vocab)]), cfg, seed=0).freeze()


@pytest.fixture(scope="session")
def aux_backend(vocab):
    cfg = EmbeddingConfig(dim=16, hidden=32)
    return new_backend(build_vocab([" ".join(vocab)]), cfg, seed=9).freeze()


@pytest.fixture(scope="session")
def sched():
    return make_schedule(1000)


@pytest.fixture()
def tiny_model(vocab):
    torch.manual_seed(0)
    return EditModel(vocab, TINY_MODEL, T=1000)


def sample_records(n, seed, with_gt=False, split="train"):
    """(EditSample, input render[, gt render]) tuples over distinct scenes."""
    rng = np.random.default_rng(seed)
    out = []
    seen = set()
    while len(out) < n:
        spec = dg.sample_scene(rng)
        key = dg.spec_key(spec)
        if key in seen:
            continue
        try:
            sample, edited = dg.sample_edit(spec, rng)
        except dg.NoApplicableEdit:
            continue
        seen.add(key)
        sample.id = f"r{len(out):05d}"
        sample.split = split
        if with_gt:
            out.append((sample, dg.render_model_space(spec),
                        dg.render_model_space(edited)))
        else:
            out.append((sample, dg.render_model_space(spec)))
    return out
