"""Operator command line: dataset preparation, training, evaluation,
standalone selection, heatmap export, ablation, and timing benchmarks.

Exit codes: 0 success, 2 usage or configuration problems, 3 numeric failure.
Every command that writes an output directory drops the fully resolved
configuration there as ``config.json``. The environment variable
``EMIL_SEED`` overrides the default seed; an explicit ``--seed`` flag wins.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import aps as aps_mod
from . import data as data_mod
from . import heatmap as heatmap_mod
from . import metrics as metrics_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ENCODER_KINDS, EncoderConfig, TrainConfig, canonical_strategy
from .errors import EmilError, NumericError
from .training import evaluate_bags, fit, history_to_csv


def _default_seed() -> int:
    return int(os.environ.get("EMIL_SEED", 42))


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NumericError as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(3)
        except EmilError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except FileNotFoundError as exc:
            click.echo(f"error: missing file {exc.filename}", err=True)
            sys.exit(2)
    return wrapper


def _write_run_config(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **resolved}
    (out_dir / "config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_dataset(manifest_path: str) -> tuple[data_mod.DatasetManifest, list[data_mod.Bag]]:
    path = Path(manifest_path)
    manifest = data_mod.read_manifest(path)
    return manifest, data_mod.load_bags(manifest, base_dir=path.parent)


def _train_config_from_flags(kind_flags: dict) -> TrainConfig:
    config = TrainConfig()
    config = replace(config, **{k: v for k, v in kind_flags.items() if v is not None})
    config.validate()
    return config


train_options = [
    click.option("--lr", type=float, default=None, help="base learning rate"),
    click.option("--epochs", type=int, default=None),
    click.option("--patience", type=int, default=None),
    click.option("--ratio", "split_ratio", type=float, default=None, help="train fraction"),
    click.option("--lambda", "big_lambda", type=int, default=None, help="patches kept by selection"),
    click.option("--strategy", type=str, default=None,
                 help="selection strategy: aps, topk, random"),
    click.option("--aps-weights", type=str, default=None,
                 help="comma-separated w_rel,w_div,w_unc"),
    click.option("--feature-scaling", type=click.Choice(["none", "zscore"]), default=None),
    click.option("--instance-term", type=click.Choice(["all", "selected"]), default=None),
    click.option("--seed", type=int, default=None, help="run seed (default EMIL_SEED or 42)"),
]


def add_options(options):
    def wrap(fn):
        for option in reversed(options):
            fn = option(fn)
        return fn
    return wrap


def _resolve_train_flags(seed, strategy, aps_weights, **rest) -> TrainConfig:
    flags = dict(rest)
    flags["seed"] = seed if seed is not None else _default_seed()
    if strategy is not None:
        flags["strategy"] = canonical_strategy(strategy)
    if aps_weights is not None:
        parts = [float(x) for x in aps_weights.split(",")]
        if len(parts) != 3:
            raise click.UsageError("--aps-weights needs exactly three values")
        flags["aps_weights"] = tuple(parts)
    return _train_config_from_flags(flags)


@click.group()
def main():
    """Linear-complexity multiple instance learning on precomputed features."""


@main.command()
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--bags", "n_bags", type=int, default=200)
@click.option("--instances", type=int, default=50)
@click.option("--dim", "d", type=int, default=32)
@click.option("--witnesses", type=str, default="3,10", help="min,max witnesses per positive bag")
@click.option("--mu", type=float, default=2.5, help="class separation")
@click.option("--seed", type=int, default=None)
@handle_errors
def synth(out_dir, n_bags, instances, d, witnesses, mu, seed):
    """Generate the synthetic witness dataset as bag files plus a manifest."""
    seed = seed if seed is not None else _default_seed()
    lo, hi = (int(x) for x in witnesses.split(","))
    spec = data_mod.WitnessSpec(n_bags=n_bags, instances_per_bag=instances, d=d,
                                witness_range=(lo, hi), mu=mu, seed=seed)
    generated = data_mod.synth_witness(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for bag in generated.bags:
        rel = f"{bag.id}.emil"
        data_mod.write_bag(bag, out / rel)
        entries.append((rel, bag.label))
    manifest = data_mod.DatasetManifest(
        name="synthetic-witness", class_names=["negative", "positive"],
        entries=entries, d=d,
        notes=f"witness range [{lo},{hi}], mu={mu}, seed={seed}")
    data_mod.write_manifest(manifest, out / "manifest.json")
    (out / "witness_indices.json").write_text(
        json.dumps(generated.witness_indices, indent=2, sort_keys=True) + "\n")
    _write_run_config(out, "synth", {"bags": n_bags, "instances": instances, "dim": d,
                                     "witnesses": [lo, hi], "mu": mu, "seed": seed})
    click.echo(f"wrote {len(entries)} bags to {out}")


@main.command("ingest-musk")
@click.option("--csv", "csv_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--name", type=str, default="musk-style")
@click.option("--bag-column", type=int, default=1)
@click.option("--label-column", type=int, default=0)
@click.option("--instance-labels", is_flag=True,
              help="derive bag labels with the any-positive rule")
@handle_errors
def ingest_musk(csv_path, out_dir, name, bag_column, label_column, instance_labels):
    """Convert a MUSK-style per-instance CSV into bag files plus a manifest."""
    bags = data_mod.load_musk_style(csv_path, bag_column, label_column, instance_labels)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for bag in bags:
        rel = f"{bag.id}.emil"
        data_mod.write_bag(bag, out / rel)
        entries.append((rel, bag.label))
    manifest = data_mod.DatasetManifest(
        name=name, class_names=["negative", "positive"], entries=entries,
        d=bags[0].d, notes=f"ingested from {Path(csv_path).name}")
    data_mod.write_manifest(manifest, out / "manifest.json")
    _write_run_config(out, "ingest-musk", {
        "csv": str(csv_path), "bag_column": bag_column, "label_column": label_column,
        "instance_labels": instance_labels})
    positives = sum(label for _, label in entries)
    click.echo(f"{len(entries)} bags (d={bags[0].d}, {positives} positive) -> {out}")


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--ratio", type=float, default=0.8)
@click.option("--seed", type=int, default=None)
@handle_errors
def split(manifest_path, out_path, ratio, seed):
    """Write a stratified seeded train/val assignment for a manifest."""
    seed = seed if seed is not None else _default_seed()
    if not Path(manifest_path).exists():
        click.echo(f"error: manifest not found: {manifest_path}", err=True)
        sys.exit(2)
    _, bags = _load_dataset(manifest_path)
    spec = data_mod.split_bags(bags, ratio, seed)
    data_mod.write_split(spec, out_path)
    click.echo(f"split {len(spec.train_ids())} train / {len(spec.val_ids())} val -> {out_path}")


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--model", "kind", type=click.Choice(ENCODER_KINDS), default="gru")
@click.option("--hidden", type=int, default=None, help="per-direction hidden size (default d//2)")
@click.option("--layers", type=int, default=None)
@click.option("--dropout", type=float, default=None)
@click.option("--split", "split_path", type=click.Path(exists=True), default=None,
              help="reuse an existing split assignment")
@add_options(train_options)
@handle_errors
def train(manifest_path, out_dir, kind, hidden, layers, dropout, split_path, **flags):
    """Train a model with the published defaults unless overridden."""
    config = _resolve_train_flags(**flags)
    enc = EncoderConfig(kind=kind)
    if hidden is not None:
        enc = replace(enc, hidden=hidden)
    if layers is not None:
        enc = replace(enc, layers=layers)
    if dropout is not None:
        enc = replace(enc, dropout=dropout)
    enc.validate()

    _, bags = _load_dataset(manifest_path)
    split_spec = data_mod.read_split(split_path) if split_path else \
        data_mod.split_bags(bags, config.split_ratio, config.seed)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = fit(bags, enc, config, split_spec)

    save_checkpoint(out / "checkpoint.emil", result.params, enc, config, config.seed)
    (out / "history.csv").write_text(history_to_csv(result.history))
    data_mod.write_split(split_spec, out / "split.json")
    _write_run_config(out, "train", {
        "manifest": str(manifest_path), "model": enc.to_dict(), "train": config.to_dict()})
    click.echo(f"best val AUC {result.best_val_auc:.4f} at epoch {result.best_epoch} "
               f"({len(result.history)} epochs run) -> {out}")


@main.command("eval")
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--split", "split_path", type=click.Path(exists=True), default=None)
@click.option("--subset", type=click.Choice(["val", "train", "all"]), default="val")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--bench", is_flag=True, help="measure post-warm-up inference latency")
@click.option("--bench-runs", type=int, default=100)
@handle_errors
def eval_cmd(ckpt_path, manifest_path, split_path, subset, out_dir, bench, bench_runs):
    """Evaluate a checkpoint; prints AUC/ACC and writes the per-bag report."""
    params, enc, train_config, seed = load_checkpoint(ckpt_path)
    if train_config is None:
        train_config = TrainConfig(seed=seed)
    _, bags = _load_dataset(manifest_path)
    if subset != "all":
        if split_path is None:
            raise click.UsageError("--subset train/val requires --split")
        spec = data_mod.read_split(split_path)
        train_bags, val_bags = data_mod.apply_split(bags, spec)
        bags = val_bags if subset == "val" else train_bags
    report = metrics_mod.evaluate(bags, params, enc, train_config,
                                  bench=bench, bench_runs=bench_runs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.csv").write_text(report.to_csv())
    summary = {"auc": report.auc, "acc": report.acc, "n_bags": report.n_bags}
    if bench:
        summary.update({"mean_ms": report.mean_ms, "p95_ms": report.p95_ms,
                        "timing_runs": report.timing_runs})
        (out / "timing.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_run_config(out, "eval", {
        "checkpoint": str(ckpt_path), "manifest": str(manifest_path),
        "subset": subset, "bench": bench})
    click.echo(f"AUC {report.auc!r}  ACC {report.acc!r}  ({report.n_bags} bags)")
    if bench:
        click.echo(f"inference mean {report.mean_ms:.3f} ms, p95 {report.p95_ms:.3f} ms "
                   f"over {report.timing_runs} runs")


@main.command()
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--bag", "bag_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--strategy", type=str, default="aps")
@click.option("--lambda", "big_lambda", type=int, default=None)
@click.option("--seed", type=int, default=None)
@handle_errors
def select(ckpt_path, bag_path, out_path, strategy, big_lambda, seed):
    """Score one bag and export per-instance selection scores as CSV."""
    params, enc, train_config, ckpt_seed = load_checkpoint(ckpt_path)
    if train_config is None:
        train_config = TrainConfig(seed=ckpt_seed)
    seed = seed if seed is not None else train_config.seed
    lam = big_lambda if big_lambda is not None else train_config.big_lambda
    strategy = canonical_strategy(strategy)
    bag = data_mod.read_bag(bag_path)

    from .encoders import Tensor, apply_feature_scaling, instance_logits
    from .seeding import RANDOM_K, derive_rng, stable_id_hash

    feats = apply_feature_scaling(bag.features, params)
    logits = instance_logits(Tensor(feats), params).data
    rng = derive_rng(seed, RANDOM_K, stable_id_hash(bag.id)) if strategy == "random_k" else None
    result = aps_mod.select_with_strategy(feats, logits, aps_mod.APSWeights(*train_config.aps_weights),
                                          lam, strategy, rng)
    Path(out_path).write_text(aps_mod.to_csv(result, bag.coords))
    click.echo(f"{bag.n} instances scored, {len(result.selected)} selected -> {out_path}")


@main.command()
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--bag", "bag_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@handle_errors
def heatmap(ckpt_path, bag_path, out_path):
    """Export per-patch probabilities and selection scores with coordinates."""
    params, enc, train_config, seed = load_checkpoint(ckpt_path)
    if train_config is None:
        train_config = TrainConfig(seed=seed)
    bag = data_mod.read_bag(bag_path)
    records = heatmap_mod.export_heatmap(params, enc, train_config, bag)
    Path(out_path).write_text(heatmap_mod.records_to_csv(records))
    click.echo(f"{len(records)} patch records -> {out_path}")


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--model", "kind", type=click.Choice(ENCODER_KINDS), default="gru")
@click.option("--strategies", type=str, default="aps,topk,random")
@click.option("--lambdas", type=str, default="512")
@click.option("--seeds", "n_seeds", type=int, default=5, help="number of seeds, base..base+n-1")
@click.option("--jobs", type=int, default=1)
@add_options(train_options)
@handle_errors
def ablate(manifest_path, out_dir, kind, strategies, lambdas, n_seeds, jobs, **flags):
    """Train/eval every (strategy, lambda, seed) cell and tabulate AUC/ACC."""
    base_config = _resolve_train_flags(**flags)
    enc = EncoderConfig(kind=kind)
    _, bags = _load_dataset(manifest_path)
    strategy_list = [s.strip() for s in strategies.split(",") if s.strip()]
    lambda_list = [int(x) for x in lambdas.split(",")]
    seed_list = [base_config.seed + i for i in range(n_seeds)]
    rows = metrics_mod.ablation_run(bags, strategy_list, lambda_list, seed_list,
                                    enc, base_config, jobs=jobs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(metrics_mod.ablation_table_csv(rows))
    _write_run_config(out, "ablate", {
        "manifest": str(manifest_path), "model": enc.to_dict(),
        "strategies": strategy_list, "lambdas": lambda_list, "seeds": seed_list,
        "train": base_config.to_dict()})
    click.echo(f"{len(rows)} ablation rows -> {out / 'ablation.csv'}")


@main.command()
@click.option("--model", "kind", type=click.Choice(ENCODER_KINDS), default="gru")
@click.option("--dim", "d", type=int, default=32)
@click.option("--lambdas", type=str, default="128,256,512,1024")
@click.option("--runs", type=int, default=100)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None)
@handle_errors
def bench(kind, d, lambdas, runs, out_dir, seed):
    """Time bare encoder forwards across sequence lengths and fit a line."""
    seed = seed if seed is not None else _default_seed()
    enc = EncoderConfig(kind=kind)
    lambda_list = [int(x) for x in lambdas.split(",")]
    means = []
    lines = ["big_lambda,mean_ms,p95_ms,analytic_encoder_flops"]
    for lam in lambda_list:
        times = metrics_mod.time_encoder_forward(enc, d, lam, runs=runs, seed=seed)
        mean_ms = float(np.mean(times))
        means.append(mean_ms)
        flops = metrics_mod.count_flops(enc, d, 1, lam, lam).encoder
        lines.append(f"{lam},{mean_ms:.4f},{float(np.percentile(times, 95)):.4f},{flops:.0f}")
        click.echo(f"lambda={lam:5d}  mean {mean_ms:8.3f} ms over {runs} runs")
    slope, intercept, r2 = metrics_mod.linear_fit_r2(lambda_list, means)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text("\n".join(lines) + "\n")
    (out / "bench_fit.json").write_text(json.dumps(
        {"slope_ms_per_step": slope, "intercept_ms": intercept, "r_squared": r2,
         "model": kind, "dim": d, "runs": runs}, indent=2, sort_keys=True) + "\n")
    _write_run_config(out, "bench", {"model": kind, "dim": d, "lambdas": lambda_list,
                                     "runs": runs, "seed": seed})
    click.echo(f"linear fit R^2 = {r2:.4f}")


if __name__ == "__main__":
    main()
