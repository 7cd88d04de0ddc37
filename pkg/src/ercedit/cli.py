"""Command-line entry point: data generation, embedding training, edit-model
training, evaluation protocols, report rendering, and the arena service.

Every command writes a run manifest next to its artifacts so a run can be
reproduced bit-for-bit on one machine. Exit codes: 0 success, 2 config
error, 3 data error.
"""

from __future__ import annotations

import csv
import datetime
import functools
import json
import os
import sys
from dataclasses import asdict, replace

import click

from . import __version__, datagen, evaluator
from . import trainer as trainer_mod
from .embedding import (EmbeddingConfig, InputError, build_vocab, load_backend,
                        save_backend, train_contrastive)
from .trainer import ConfigError, DataError, TrainConfig


def default_home() -> str:
    return os.environ.get("ERC_HOME", os.path.join(os.getcwd(), "artifacts"))


def write_manifest(out_dir: str, command: str, config: dict, seed: int,
                   artifacts: list[str], started: str) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
        "tool_version": __version__,
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, InputError, datagen.LLMError) as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except (DataError, evaluator.DataError, evaluator.ProtocolError) as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(3)
    return wrapper


@click.group()
def main():
    """Unsupervised instruction-based image editing toolkit."""


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


@main.command("gen-data")
@click.option("--out", required=True, type=click.Path())
@click.option("--n", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--llm", type=click.Choice(["off", "fixture", "live"]), default="off",
              show_default=True)
@click.option("--embedding", "embedding_path", type=click.Path(exists=True),
              default=None, help="Backend checkpoint for similarity filtering.")
@click.option("--filter-threshold", default=0.2, show_default=True)
@click.option("--force", is_flag=True)
@handle_errors
def gen_data(out, n, seed, llm, embedding_path, filter_threshold, force):
    """Generate the procedural edit dataset with train/val/test splits."""
    started = _now()
    if os.path.isdir(out) and os.listdir(out) and not force:
        click.echo(f"config error: {out} is not empty (use --force)", err=True)
        sys.exit(2)
    os.makedirs(out, exist_ok=True)
    dataset = datagen.generate_dataset(n, seed)

    report: dict = {"total": n, "kept": n, "dropped": 0, "threshold": None}
    if embedding_path:
        backend = load_backend(embedding_path)
        pairs = [(s, datagen.render_model_space(dataset.specs[s.id][0]))
                 for s in dataset.samples]
        kept, freport = datagen.filter_pairs(pairs, backend, filter_threshold)
        kept_ids = {s.id for s, _ in kept}
        dataset.samples = [s for s in dataset.samples if s.id in kept_ids]
        report = {"total": freport.total, "kept": freport.kept,
                  "dropped": freport.dropped, "threshold": freport.threshold,
                  "histogram": freport.histogram}
    data_path = datagen.write_dataset(dataset, out)
    with open(os.path.join(out, "filter_report.json"), "w") as f:
        json.dump(report, f, indent=1)

    if llm == "fixture":
        client = datagen.FixtureLLMClient()
        checks = [
            datagen.generate_reverse_instruction(
                client, "A man wearing a denim jacket", "make the jacket a rain coat",
                "A man wearing a rain coat"),
            datagen.generate_reverse_instruction(
                client, "A sofa in the living room", "add pillows",
                "A sofa in the living room with pillows"),
        ]
        multi = datagen.generate_multi_edits(client, "A dog sitting on a couch")
        with open(os.path.join(out, "llm_report.json"), "w") as f:
            json.dump({"reverse_instructions": checks,
                       "multi_edit_triples": multi}, f, indent=1)
    elif llm == "live":
        if "ERC_LLM_ENDPOINT" not in os.environ:
            raise ConfigError("--llm live needs ERC_LLM_ENDPOINT")

    write_manifest(out, "gen-data",
                   {"n": n, "llm": llm, "filter_threshold": filter_threshold},
                   seed, [data_path], started)
    click.echo(f"wrote {len(dataset.samples)} records to {out}")


def _load_records(data_dir: str, split: str) -> trainer_mod.Batch:
    samples = [s for s in datagen.read_dataset(data_dir) if s.split == split]
    return [(s, datagen.load_image(data_dir, s.image)) for s in samples]


@main.command("train-embedding")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", default=12, show_default=True)
@click.option("--seed", default=0, show_default=True)
@handle_errors
def train_embedding(data_dir, out, epochs, seed):
    """Train the contrastive text-image backend on the dataset captions."""
    started = _now()
    records = _load_records(data_dir, "train")
    if not records:
        raise DataError("no training records")
    pairs = [(img, s.input_caption) for s, img in records]
    vocab = build_vocab([s.input_caption for s, _ in records]
                        + [" ".join(datagen.caption_vocabulary())])
    cfg = EmbeddingConfig(epochs=epochs, seed=seed)
    backend, accuracy = train_contrastive(pairs, cfg, vocabulary=vocab)
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_backend(backend, out)
    write_manifest(os.path.dirname(os.path.abspath(out)), "train-embedding",
                   {"epochs": epochs, "retrieval_accuracy": accuracy}, seed,
                   [out], started)
    click.echo(f"held-out retrieval accuracy: {accuracy:.3f}")


_TRAIN_FLAGS = [
    ("iterations", int), ("batch_size", int), ("lr", float), ("seed", int),
    ("t_min", int), ("t_max", int), ("timestep_policy", str), ("grad_flow", str),
    ("validation_interval", int),
]


@main.command("train")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--embedding", "embedding_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--iterations", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--t-min", type=int, default=None)
@click.option("--t-max", type=int, default=None)
@click.option("--timestep-policy", type=click.Choice(["random-independent", "shared"]),
              default=None)
@click.option("--grad-flow", type=click.Choice(["full", "stop-at-edit"]), default=None)
@click.option("--validation-interval", type=int, default=None)
@click.option("--no-sim", is_flag=True, help="Ablation: drop the similarity loss.")
@click.option("--no-attn", is_flag=True, help="Ablation: drop the attention loss.")
@handle_errors
def train_cmd(data_dir, embedding_path, out, config_path, no_sim, no_attn, **flags):
    """Run the reversibility training loop."""
    started = _now()
    values = trainer_mod.parse_config_file(config_path) if config_path else {}
    for key, _ in _TRAIN_FLAGS:
        if flags.get(key) is not None:
            values[key] = flags[key]  # flag overrides beat file values
    config = trainer_mod.config_from_values(values)
    if no_sim:
        config = replace(config, use_sim=False)
    if no_attn:
        config = replace(config, use_attn=False)

    backend = load_backend(embedding_path)
    train_records = _load_records(data_dir, "train")
    val_records = _load_records(data_dir, "val")
    result = trainer_mod.train(config, train_records, val_records, backend, out)
    cfg_dict = asdict(config)
    write_manifest(out, "train", cfg_dict, config.seed,
                   [result.best_checkpoint, result.metrics_log], started)
    click.echo(f"best validation loss {result.best_val:.4f} at step {result.best_step}")


def _eval_records(data_dir: str, split: str) -> list[evaluator.EvalRecord]:
    samples = [s for s in datagen.read_dataset(data_dir) if s.split == split]
    records = []
    for s in samples:
        if s.gt_image is None:
            raise evaluator.ProtocolError(f"record {s.id} has no GT edit")
        records.append((s, datagen.load_image(data_dir, s.image),
                        datagen.load_image(data_dir, s.gt_image)))
    return records


@main.command("eval")
@click.option("--protocol", type=click.Choice(["single", "multi", "tradeoff", "roundtrip"]),
              required=True)
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--embedding", "embedding_path", required=True,
              type=click.Path(exists=True))
@click.option("--aux-embedding", "aux_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--split", default="test", show_default=True)
@click.option("--steps", default=10, show_default=True)
@click.option("--s-t", default=1.5, show_default=True)
@click.option("--s-i", default=1.5, show_default=True)
@click.option("--scales", default="1.0,1.4,1.8,2.2", show_default=True)
@click.option("--sessions", default=50, show_default=True)
@click.option("--turns", default=3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@handle_errors
def eval_cmd(protocol, data_dir, model_path, embedding_path, aux_path, out, split,
             steps, s_t, s_i, scales, sessions, turns, seed):
    """Run one evaluation protocol against a checkpoint."""
    from .diffusion import load_model, make_schedule

    started = _now()
    os.makedirs(out, exist_ok=True)
    model = load_model(model_path)
    sampler = evaluator.GuidedSampler(model, make_schedule(model.T))
    emb = load_backend(embedding_path)
    aux = load_backend(aux_path) if aux_path else emb
    params = evaluator.SamplerParams(s_T=s_t, s_I=s_i, steps=steps, seed=seed)
    artifacts = []

    if protocol == "single":
        report = evaluator.eval_single_turn(sampler, _eval_records(data_dir, split),
                                            params, emb, aux, model_id=model_path)
        path = os.path.join(out, "single_turn.jsonl")
        report.write(path)
        artifacts.append(path)
        click.echo(json.dumps(report.aggregates, indent=1))
    elif protocol == "multi":
        sess = datagen.generate_sessions(sessions, turns, seed)
        report = evaluator.eval_multi_turn(sampler, sess, params, emb, aux,
                                           model_id=model_path)
        path = os.path.join(out, "multi_turn.jsonl")
        report.write(path)
        artifacts.append(path)
        click.echo(json.dumps(report.aggregates, indent=1))
    elif protocol == "tradeoff":
        grid = [float(v) for v in scales.split(",")]
        points = evaluator.tradeoff_curve(sampler, _eval_records(data_dir, split),
                                          grid, s_t, params, emb)
        path = os.path.join(out, "tradeoff.csv")
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["s_I", "image_similarity",
                                                   "direction_similarity"])
            writer.writeheader()
            writer.writerows(points)
        artifacts.append(path)
        click.echo(f"wrote {len(points)}-row curve to {path}")
    else:  # roundtrip
        report = evaluator.erc_roundtrip(sampler, _eval_records(data_dir, split),
                                         params, model_id=model_path)
        path = os.path.join(out, "roundtrip.jsonl")
        report.write(path)
        artifacts.append(path)
        click.echo(json.dumps(report.aggregates, indent=1))

    write_manifest(out, f"eval --protocol {protocol}",
                   {"protocol": protocol, "params": asdict(params), "split": split},
                   seed, artifacts, started)


@main.command("report")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@handle_errors
def report_cmd(input_path, out):
    """Render a trade-off CSV to SVG."""
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    started = _now()
    with open(input_path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise DataError(f"no rows in {input_path}")
    xs = [float(r["image_similarity"]) for r in rows]
    ys = [float(r["direction_similarity"]) for r in rows]
    labels = [r["s_I"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(xs, ys, marker="o")
    for x, y, label in zip(xs, ys, labels):
        ax.annotate(label, (x, y), fontsize=7)
    ax.set_xlabel("image-similarity")
    ax.set_ylabel("direction-similarity")
    fig.tight_layout()
    fig.savefig(out, format="svg")
    plt.close(fig)
    write_manifest(os.path.dirname(os.path.abspath(out)) or ".", "report",
                   {"input": input_path}, 0, [out], started)
    click.echo(f"wrote {out}")


@main.command("arena-serve")
@click.option("--port", default=8000, show_default=True)
@click.option("--log", "log_path", required=True, type=click.Path())
@click.option("--token", default="", help="Static bearer token; empty disables auth.")
@click.option("--items", "items_path", required=True, type=click.Path(exists=True),
              help="JSONL of {item_id, instruction, input, candidates}.")
@click.option("--seed", default=0, show_default=True)
@handle_errors
def arena_serve(port, log_path, token, items_path, seed):
    """Serve the pairwise-comparison arena over HTTP."""
    import uvicorn

    from .arena import restore
    from .server import create_app

    store = load_arena_items(items_path)
    state, corrupt = restore(log_path, store.state.models)
    if corrupt is not None:
        click.echo(f"warning: vote log corrupt at byte {corrupt}; "
                   "replayed up to that point", err=True)
    store.state = state
    app = create_app(store, log_path=log_path, token=token, seed=seed)
    uvicorn.run(app, host="0.0.0.0", port=port)


def load_arena_items(items_path: str):
    from .arena import ArenaStore

    store = ArenaStore()
    base = os.path.dirname(os.path.abspath(items_path))
    with open(items_path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            candidates = {m: os.path.join(base, p)
                          for m, p in rec["candidates"].items()}
            input_image = os.path.join(base, rec["input"]) if rec.get("input") else None
            store.add_item(rec["item_id"], rec["instruction"], candidates,
                           input_image=input_image)
    return store


if __name__ == "__main__":
    main()
