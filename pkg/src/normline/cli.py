"""Experiment command line.

Subcommands: ``train`` one model from a config file, ``grid`` a comparison
sweep over embedding/MLP norm axes, ``probe`` activation statistics of a
checkpoint on a dataset, ``synth`` a synthetic dataset, ``ingest`` a
labeled TSV, ``eval`` a checkpoint. Every run directory contains the
resolved config snapshot, the dataset hash, and the seed, so outputs are
reproducible from the directory alone.

Errors go to stderr with stable prefixes: ``config:`` for configuration
problems, ``data:`` for dataset and checkpoint problems, ``train:`` for
everything else. Exit code 0 means no error.
"""

import hashlib
import json
import os
import sys
from concurrent import futures
from pathlib import Path

import click
import numpy as np

from .config import load_config
from .data import generate_synthetic, ingest_tsv, load_dataset, load_schema_file, save_dataset, split_811
from .errors import CheckpointError, ConfigError, DataError, NormlineError
from .features import save_vocab
from .network import build_model, load_checkpoint, save_checkpoint
from .probe import attach_probes, compare_reports, export_stats
from .train import evaluate, fit, history_hash


def _fail(prefix, exc):
    click.echo(f"{prefix}: {exc}", err=True)
    sys.exit(1)


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError as exc:
        _fail("config", exc)
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        _fail("data", exc)
    except NormlineError as exc:
        _fail("train", exc)


def load_splits(cfg):
    """(train, valid, test, dataset_hash) for the configured source."""
    source = cfg.source
    if source == "synthetic":
        full = generate_synthetic(cfg.synthetic_spec())
        ds_hash = full.content_hash()
        train, valid, test = split_811(full, cfg.split_seed)
    elif source.endswith(".npz"):
        full = load_dataset(source)
        ds_hash = full.content_hash()
        train, valid, test = split_811(full, cfg.split_seed)
    elif Path(source).is_dir():
        train = load_dataset(Path(source) / "train.npz")
        valid = load_dataset(Path(source) / "valid.npz")
        test = load_dataset(Path(source) / "test.npz")
        h = hashlib.sha256()
        for part in (train, valid, test):
            h.update(part.content_hash().encode())
        ds_hash = h.hexdigest()
    else:
        raise ConfigError(f"[data] source: {source!r} is not 'synthetic', an .npz file, or an ingest directory")
    return train, valid, test, ds_hash


def run_experiment(cfg, seed, out_dir):
    """Train one model and write a self-describing run directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.set_seed(seed)
    train_ds, valid_ds, test_ds, ds_hash = load_splits(cfg)
    model = build_model(train_ds.schema, cfg.model_config(seed))
    if cfg.probe_layers:
        layers = "all" if cfg.probe_layers == "all" else [s.strip() for s in cfg.probe_layers.split(",")]
        attach_probes(model, layers, every=cfg.probe_every)
    result = fit(model, train_ds, valid_ds, cfg.train_config(seed), history_path=out / "history.csv")
    test_auc, test_loss = evaluate(model, test_ds, cfg.batch_size)
    save_checkpoint(model, out / "checkpoint.nrmd")
    if model.probe is not None:
        export_stats(model.probe.records, out / "stats.csv")
    cfg.write_snapshot(out / "config.resolved.ini")
    summary = {
        "seed": int(seed),
        "config_hash": cfg.config_hash(),
        "dataset_hash": ds_hash,
        "epochs_run": len(result.history),
        "best_epoch": int(result.best_epoch),
        "best_valid_auc": float(result.best_valid_auc),
        "test_auc": float(test_auc),
        "test_loss": float(test_loss),
        "history_hash": history_hash(result.history),
    }
    summary["summary_hash"] = hashlib.sha256(json.dumps(summary, sort_keys=True).encode()).hexdigest()
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


def _grid_cell(args):
    config_path, emb, mlp, seed, cell_dir = args
    cfg = load_config(config_path)
    cfg.set_grid_cell(emb, mlp)
    return emb, mlp, seed, run_experiment(cfg, seed, cell_dir)


def _worker_cap(requested):
    cap = os.environ.get("NORMLINE_THREADS")
    workers = max(1, int(requested))
    if cap:
        workers = min(workers, max(1, int(cap)))
    return workers


@click.group()
def main():
    """Field-wise normalization experiments for CTR-style models."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the [train] seed.")
@click.option("--out", "out_dir", default="run", type=click.Path(), show_default=True)
def train(config_path, seed, out_dir):
    """Train one model from a config file into a run directory."""

    def body():
        cfg = load_config(config_path)
        summary = run_experiment(cfg, cfg.seed if seed is None else seed, out_dir)
        click.echo(f"dataset_hash {summary['dataset_hash']}")
        click.echo(f"best_valid_auc {summary['best_valid_auc']:.6f} (epoch {summary['best_epoch']})")
        click.echo(f"test_auc {summary['test_auc']:.6f}")
        click.echo(f"summary_hash {summary['summary_hash']}")

    _guard(body)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", default="grid", type=click.Path(), show_default=True)
@click.option("--parallel", type=int, default=1, show_default=True, help="Concurrent grid cells.")
@click.option("--format", "fmt", type=click.Choice(["csv", "table"]), default="table", show_default=True)
def grid(config_path, out_dir, parallel, fmt):
    """Run the [grid] comparison sweep; one run per cell per seed.

    Completed cells (existing summary.json) are reused, so partial grids
    resume where they stopped.
    """

    def body():
        cfg = load_config(config_path)
        if not (cfg.grid_emb_norms and cfg.grid_mlp_norms and cfg.grid_seeds):
            raise ConfigError("[grid] emb_norms, mlp_norms, and seeds must be non-empty")
        out = Path(out_dir)
        results = {}
        pending = []
        for emb in cfg.grid_emb_norms:
            for mlp in cfg.grid_mlp_norms:
                for seed in cfg.grid_seeds:
                    cell_dir = out / "cells" / f"emb-{emb}_mlp-{mlp}_seed-{seed}"
                    summary_path = cell_dir / "summary.json"
                    if summary_path.exists():
                        results[(emb, mlp, seed)] = json.loads(summary_path.read_text())
                    else:
                        pending.append((str(config_path), emb, mlp, seed, str(cell_dir)))
        workers = _worker_cap(parallel)
        if workers > 1 and len(pending) > 1:
            with futures.ProcessPoolExecutor(max_workers=workers) as pool:
                for emb, mlp, seed, summary in pool.map(_grid_cell, pending):
                    results[(emb, mlp, seed)] = summary
        else:
            for args in pending:
                emb, mlp, seed, summary = _grid_cell(args)
                results[(emb, mlp, seed)] = summary

        rows = []
        for emb in cfg.grid_emb_norms:
            for mlp in cfg.grid_mlp_norms:
                aucs = [results[(emb, mlp, s)]["test_auc"] for s in cfg.grid_seeds]
                rows.append((emb, mlp, float(np.mean(aucs)), float(np.std(aucs)), len(aucs)))

        csv_lines = ["emb_norm,mlp_norm,mean_auc,std_auc,seeds"]
        csv_lines += [f"{e},{m},{a:.6f},{s:.6f},{n}" for e, m, a, s, n in rows]
        out.mkdir(parents=True, exist_ok=True)
        (out / "grid.csv").write_text("\n".join(csv_lines) + "\n")
        if fmt == "csv":
            click.echo("\n".join(csv_lines))
        else:
            click.echo(f"{'emb_norm':<12} {'mlp_norm':<12} {'mean_auc':>10} {'std_auc':>10} {'seeds':>6}")
            for e, m, a, s, n in rows:
                click.echo(f"{e:<12} {m:<12} {a:>10.6f} {s:>10.6f} {n:>6d}")

    _guard(body)


def probe_dataset(model, dataset, layers, batch_size=1000):
    """Eval-mode pass over a dataset recording one stats row per batch."""
    attach_probes(model, layers, every=1)
    for i, start in enumerate(range(0, len(dataset), batch_size)):
        model.probe.step = i
        model.forward(dataset.values[start:start + batch_size], training=False)
    return model.probe.records


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--data", "data_path", required=True, type=click.Path(), help="Dataset .npz file.")
@click.option("--layers", default="all", show_default=True, help="'all' or comma-separated site names.")
@click.option("--out", "out_path", default="stats.csv", type=click.Path(), show_default=True)
@click.option("--compare", "compare_path", default=None, type=click.Path(), help="Second checkpoint to diff.")
@click.option("--batch-size", type=int, default=1000, show_default=True)
def probe(checkpoint_path, data_path, layers, out_path, compare_path, batch_size):
    """Record activation statistics of a checkpoint over a dataset."""

    def body():
        dataset = load_dataset(data_path)
        selected = "all" if layers == "all" else [s.strip() for s in layers.split(",")]
        model = load_checkpoint(checkpoint_path)
        records = probe_dataset(model, dataset, selected, batch_size)
        export_stats(records, out_path)
        click.echo(f"wrote {len(records)} stats rows to {out_path}")
        if compare_path:
            other = load_checkpoint(compare_path)
            other_records = probe_dataset(other, dataset, selected, batch_size)
            click.echo(compare_reports(records, other_records, label_a="a", label_b="b"))

    _guard(body)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_path", default="dataset.npz", type=click.Path(), show_default=True)
def synth(config_path, out_path):
    """Generate the [data] synthetic dataset and save it as .npz."""

    def body():
        cfg = load_config(config_path)
        ds = generate_synthetic(cfg.synthetic_spec())
        save_dataset(ds, out_path)
        click.echo(f"dataset_hash {ds.content_hash()}")
        click.echo(f"wrote {len(ds)} rows to {out_path}")

    _guard(body)


@main.command()
@click.option("--schema", "schema_path", required=True, type=click.Path())
@click.option("--tsv", "tsv_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--min-freq", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, help="8:1:1 split seed.")
@click.option("--log-transform", is_flag=True, help="log(1+x) on non-negative numericals.")
def ingest(schema_path, tsv_path, out_dir, min_freq, seed, log_transform):
    """Parse a labeled TSV, build vocabularies on the train split, save splits."""

    def body():
        schema = load_schema_file(schema_path)
        result = ingest_tsv(tsv_path, schema, seed=seed, min_freq=min_freq, log_transform=log_transform)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_dataset(result.train, out / "train.npz")
        save_dataset(result.valid, out / "valid.npz")
        save_dataset(result.test, out / "test.npz")
        save_vocab(result.vocabs, out / "vocab.tsv")
        click.echo(f"dataset_hash {result.dataset_hash}")
        click.echo(f"rows {len(result.train)}/{len(result.valid)}/{len(result.test)} (train/valid/test)")
        if result.missing_numerical:
            click.echo(f"imputed {result.missing_numerical} missing numerical values")

    _guard(body)


@main.command("eval")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--data", "data_path", required=True, type=click.Path(), help="Dataset .npz file.")
@click.option("--split", type=click.Choice(["all", "train", "valid", "test"]), default="all", show_default=True)
@click.option("--split-seed", type=int, default=0, show_default=True)
@click.option("--batch-size", type=int, default=1000, show_default=True)
def eval_cmd(checkpoint_path, data_path, split, split_seed, batch_size):
    """AUC and loss of a checkpoint on a dataset (optionally one 8:1:1 split)."""

    def body():
        model = load_checkpoint(checkpoint_path)
        ds = load_dataset(data_path)
        if split != "all":
            parts = dict(zip(("train", "valid", "test"), split_811(ds, split_seed)))
            ds = parts[split]
        auc_value, loss = evaluate(model, ds, batch_size)
        click.echo(f"auc {auc_value:.6f}")
        click.echo(f"loss {loss:.6f}")

    _guard(body)


if __name__ == "__main__":
    main()
