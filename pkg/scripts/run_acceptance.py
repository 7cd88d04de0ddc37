#!/usr/bin/env python3
"""Produce the training artifacts consumed by the end-to-end test suite.

Generates the fixed dataset, trains the contrastive embedding backends, and
runs the editing-model training variants (full objective, attention-loss
ablation, shared-timestep ablation) over several seeds. Every stage is
resumable: finished outputs are detected and skipped, so the script can be
re-run after an interruption.

Usage:
    python3 scripts/run_acceptance.py                 # everything, full length
    python3 scripts/run_acceptance.py --iterations 400 --variants full --seeds 0
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from ercedit import datagen as dg
from ercedit import trainer as T
from ercedit.diffusion import ModelConfig
from ercedit.embedding import (EmbeddingConfig, build_vocab, load_backend,
                               save_backend, train_contrastive)

DATA_SEED = 7
EMBED_SEED = 11
AUX_EMBED_SEED = 12
N_SAMPLES = 5000
MODEL = ModelConfig(base_channels=8, attn_dim=16)

VARIANTS = {
    "full": {},
    "no-attn": {"use_attn": False},
    "shared-t": {"timestep_policy": "shared"},
}


def log(msg: str) -> None:
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def ensure_dataset(out: str, n: int) -> str:
    data_dir = os.path.join(out, "data")
    if os.path.exists(os.path.join(data_dir, "data.jsonl")):
        log("dataset already present")
        return data_dir
    log(f"generating {n} samples")
    ds = dg.generate_dataset(n, seed=DATA_SEED)
    dg.write_dataset(ds, data_dir)
    log("dataset written")
    return data_dir


def ensure_embedding(out: str, data_dir: str, seed: int, name: str) -> str:
    path = os.path.join(out, name)
    if os.path.exists(path):
        log(f"{name} already present")
        return path
    samples = [s for s in dg.read_dataset(data_dir) if s.split == "train"]
    pairs = [(dg.load_image(data_dir, s.image), s.input_caption) for s in samples]
    vocab = build_vocab([s.input_caption for s in samples]
                        + [" ".join(dg.caption_vocabulary())])
    log(f"training {name} on {len(pairs)} pairs")
    cfg = EmbeddingConfig(epochs=8, batch_size=32, seed=seed)
    backend, acc = train_contrastive(pairs, cfg, vocabulary=vocab)
    save_backend(backend, path)
    log(f"{name} held-out retrieval accuracy {acc:.3f}")
    return path


def train_records(data_dir: str) -> tuple[T.Batch, T.Batch]:
    samples = dg.read_dataset(data_dir)
    train = [(s, dg.load_image(data_dir, s.image)) for s in samples
             if s.split == "train"]
    val = [(s, dg.load_image(data_dir, s.image)) for s in samples
           if s.split == "val"]
    return train, val


def run_variant(out: str, data_dir: str, embed_path: str, variant: str,
                seed: int, iterations: int) -> None:
    run_dir = os.path.join(out, "runs", f"{variant}_s{seed}")
    if os.path.exists(os.path.join(run_dir, "final.ckpt")):
        log(f"{variant}_s{seed} already done")
        return
    os.makedirs(run_dir, exist_ok=True)
    cfg = T.TrainConfig(iterations=iterations, batch_size=16, seed=seed,
                        model=MODEL, **VARIANTS[variant])
    vocab = dg.caption_vocabulary()
    embedding = load_backend(embed_path)

    # snapshot the untrained weights so evaluations can compare against them
    state0 = T.init_state(cfg, vocab)
    T.save_checkpoint(state0, os.path.join(run_dir, "iter0.ckpt"))
    del state0

    tr, val = train_records(data_dir)
    log(f"{variant}_s{seed}: {iterations} iterations on {len(tr)} records")
    t0 = time.time()
    result = T.train(cfg, tr, val, embedding, run_dir, vocabulary=vocab,
                     log_every=10)
    with open(os.path.join(run_dir, "run.json"), "w") as f:
        json.dump({"variant": variant, "seed": seed, "iterations": iterations,
                   "best_step": result.best_step, "best_val": result.best_val,
                   "wall_s": time.time() - t0}, f, indent=1)
    log(f"{variant}_s{seed}: done in {time.time() - t0:.0f}s "
        f"best_val {result.best_val:.3f} at step {result.best_step}")


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(
        os.path.dirname(__file__), "..", "artifacts", "acceptance"))
    ap.add_argument("--n-samples", type=int, default=N_SAMPLES)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--variants", default="full,no-attn,shared-t")
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    out = os.path.abspath(args.out)
    os.makedirs(out, exist_ok=True)

    data_dir = ensure_dataset(out, args.n_samples)
    embed_path = ensure_embedding(out, data_dir, EMBED_SEED, "embed.ckpt")
    ensure_embedding(out, data_dir, AUX_EMBED_SEED, "embed_aux.ckpt")
    for variant in args.variants.split(","):
        for seed in [int(s) for s in args.seeds.split(",")]:
            run_variant(out, data_dir, embed_path, variant, seed,
                        args.iterations)
    log("all requested runs complete")


if __name__ == "__main__":
    main()
