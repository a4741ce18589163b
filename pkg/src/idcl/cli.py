"""Experiment command line: prepare data, train variants, evaluate, analyze.

Run layout: ``<out>/<dataset>/data/`` holds the canonical files and split
manifest; ``<out>/<dataset>/<variant>/<seed>/`` holds one training run
(checkpoint, training log, metrics, analysis tables, manifest). Outputs are
keyed by config hash and seed and are never silently overwritten.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, datasets
from .config import ConfigError, TrainConfig, VARIANTS, apply_variant
from .data import (
    GraphBuildError,
    ParseError,
    build_graph,
    load_interactions,
    load_item_concepts,
    normalized_adjacency,
    read_split_manifest,
    split_heldout_users,
    split_holdout,
    write_split_manifest,
)
from .encoder import adjacency_tensor
from .evaluator import MetricsReport, evaluate, format_metrics, read_metrics_kv, write_metrics
from .model import IntentModel
from .trainer import CheckpointError, Trainer, load_checkpoint, save_checkpoint


class CliError(RuntimeError):
    pass


def code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


@dataclasses.dataclass
class RunManifest:
    """What produced a directory of outputs and what is in it."""

    kind: str
    dataset: str
    dataset_hash: str
    config: dict
    config_hash: str
    variant: str
    seeds: list
    code_version: str
    outputs: list
    extra: dict

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))

    def add_outputs(self, *names) -> None:
        for name in names:
            if name not in self.outputs:
                self.outputs.append(name)


# -- prepare -----------------------------------------------------------------


def _materialize_raw(args, data_dir: Path):
    """Place canonical interactions/concepts TSVs into the dataset dir."""
    interactions = data_dir / "interactions.tsv"
    concepts = data_dir / "item_concepts.tsv"
    if args.interactions:
        if not args.concepts:
            raise CliError("--interactions needs --concepts (item \\t concept rows)")
        src_i, src_c = Path(args.interactions), Path(args.concepts)
        if not src_i.exists():
            raise CliError(f"interaction file not found: {src_i}")
        if not src_c.exists():
            raise CliError(f"concept file not found: {src_c}")
        shutil.copyfile(src_i, interactions)
        shutil.copyfile(src_c, concepts)
    elif args.dataset == "synthetic":
        datasets.generate_synthetic(interactions, concepts, seed=args.seed)
    elif args.dataset in datasets.ARCHIVES:
        raw_root = Path(args.data_dir)
        raw_dir = raw_root / datasets.ARCHIVES[args.dataset]["subdir"]
        if not raw_dir.is_dir():
            if not args.fetch:
                raise CliError(
                    f"raw {args.dataset} not found at {raw_dir}; pass --fetch to download "
                    f"or place the extracted archive there"
                )
            raw_dir = datasets.fetch_archive(args.dataset, raw_root)
        if args.dataset == "ml-100k":
            datasets.convert_ml100k(
                raw_dir, interactions, concepts,
                include_unknown_genre=args.keep_unknown_genre,
            )
        else:
            datasets.convert_ml1m(raw_dir, interactions, concepts)
    else:
        raise CliError(f"unknown dataset {args.dataset!r} and no --interactions given")
    return interactions, concepts


def cmd_prepare(args) -> int:
    data_dir = Path(args.out) / args.dataset / "data"
    params = {
        "rating_threshold": args.rating_threshold,
        "val_frac": args.val_frac,
        "test_frac": args.test_frac,
        "heldout_users": args.heldout_users,
        "holdout_frac": args.holdout_frac,
        "seed": args.seed,
    }
    manifest_path = data_dir / "manifest.json"
    if manifest_path.exists():
        existing = RunManifest.read(manifest_path)
        if existing.extra.get("params") != params and not args.force:
            raise CliError(
                f"{data_dir} was prepared with different parameters; rerun with --force"
            )
    data_dir.mkdir(parents=True, exist_ok=True)
    interactions_path, concepts_path = _materialize_raw(args, data_dir)

    pairs = load_interactions(interactions_path, rating_threshold=args.rating_threshold)
    memberships = load_item_concepts(concepts_path)
    graph = build_graph(pairs, memberships)
    if args.heldout_users:
        split = split_heldout_users(
            graph, args.heldout_users, holdout_frac=args.holdout_frac, seed=args.seed
        )
    else:
        split = split_holdout(graph, args.val_frac, args.test_frac, args.seed)
    write_split_manifest(data_dir / "split.tsv", split)

    manifest = RunManifest(
        kind="prepare",
        dataset=args.dataset,
        dataset_hash=graph.dataset_hash(),
        config={},
        config_hash="",
        variant="",
        seeds=[args.seed],
        code_version=code_version(),
        outputs=["interactions.tsv", "item_concepts.tsv", "split.tsv", "manifest.json"],
        extra={
            "params": params,
            "num_users": graph.num_users,
            "num_items": graph.num_items,
            "num_concepts": graph.num_concepts,
            "num_behaviors": graph.num_behaviors,
            "split_mode": split.mode,
        },
    )
    manifest.write(manifest_path)
    print(
        f"prepared {args.dataset}: {graph.num_users} users, {graph.num_items} items, "
        f"{graph.num_concepts} concepts, {graph.num_behaviors} behaviors -> {data_dir}"
    )
    return 0


def load_prepared(data_dir):
    """Rebuild (graph, split, manifest) from a prepared dataset directory."""
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise CliError(f"{data_dir} is not a prepared dataset (no manifest.json)")
    manifest = RunManifest.read(manifest_path)
    threshold = manifest.extra["params"]["rating_threshold"]
    pairs = load_interactions(data_dir / "interactions.tsv", rating_threshold=threshold)
    memberships = load_item_concepts(data_dir / "item_concepts.tsv")
    graph = build_graph(pairs, memberships)
    if graph.dataset_hash() != manifest.dataset_hash:
        raise CliError(f"{data_dir}: data files changed since prepare (hash mismatch)")
    split = read_split_manifest(
        data_dir / "split.tsv", graph,
        seed=manifest.extra["params"]["seed"], mode=manifest.extra["split_mode"],
    )
    return graph, split, manifest


# -- train -------------------------------------------------------------------


def _parse_seeds(args) -> list:
    if args.seeds:
        return [int(s) for s in args.seeds.split(",")]
    return [args.seed]


def cmd_train(args) -> int:
    data_dir = Path(args.data) if args.data else Path(args.out) / args.dataset / "data"
    graph, split, data_manifest = load_prepared(data_dir)
    base = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.deterministic:
        base = base.with_overrides(deterministic=True)
    if args.strict_eq9:
        base = base.with_overrides(strict_eq9=True)
    for seed in _parse_seeds(args):
        config = apply_variant(base.with_overrides(seed=seed), args.variant)
        run_dir = Path(args.out) / data_manifest.dataset / args.variant / str(seed)
        manifest_path = run_dir / "manifest.json"
        if manifest_path.exists():
            existing = RunManifest.read(manifest_path)
            clash = "identical" if existing.config_hash == config.config_hash() else "different"
            if not args.force:
                raise CliError(
                    f"{run_dir} already holds a run with a {clash} config; "
                    f"rerun with --force or choose another --out"
                )
        run_dir.mkdir(parents=True, exist_ok=True)

        model = IntentModel(
            graph.num_users, graph.num_items, graph.num_concepts, config,
            variant=args.variant, seed=seed,
        )
        trainer = Trainer(model, split, config, log_path=run_dir / "train_log.csv")
        history = trainer.fit()
        save_checkpoint(
            model, config, run_dir / "checkpoint.pt",
            dataset_hash=graph.dataset_hash(),
            extra={"seed": seed, "best_epoch": history.best_epoch},
        )
        report = evaluate(
            model, trainer.adjacency, split, ks=args.ks, part="test",
            plain_denominator=config.plain_recall_denominator,
        )
        write_metrics(report, run_dir / "metrics.txt", run_dir / "metrics.kv")
        val_report = evaluate(
            model, trainer.adjacency, split, ks=args.ks, part="val",
            plain_denominator=config.plain_recall_denominator,
        )
        write_metrics(val_report, run_dir / "metrics_val.txt", run_dir / "metrics_val.kv")

        manifest = RunManifest(
            kind="train",
            dataset=data_manifest.dataset,
            dataset_hash=graph.dataset_hash(),
            config=config.to_flat_dict(),
            config_hash=config.config_hash(),
            variant=args.variant,
            seeds=[seed],
            code_version=code_version(),
            outputs=[
                "checkpoint.pt", "train_log.csv", "metrics.txt", "metrics.kv",
                "metrics_val.txt", "metrics_val.kv", "manifest.json",
            ],
            extra={
                "data_dir": str(data_dir),
                "best_epoch": history.best_epoch,
                "best_val_metric": history.best_metric,
                "epochs_run": len(history.epochs),
                "aborted": history.aborted,
            },
        )
        manifest.write(manifest_path)
        print(
            f"{args.variant} seed {seed}: best epoch {history.best_epoch}, "
            f"val recall@{config.early_stop_k} {history.best_metric:.4f}, "
            f"test recall@{report.ks[0]} {report.mean[f'recall@{report.ks[0]}']:.4f}"
        )
    return 0


# -- evaluate ----------------------------------------------------------------


def _load_run(run_dir):
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise CliError(f"{run_dir} is not a run directory (no manifest.json)")
    manifest = RunManifest.read(manifest_path)
    if manifest.kind != "train":
        raise CliError(f"{run_dir} is a {manifest.kind!r} directory, not a training run")
    return run_dir, manifest


def cmd_evaluate(args) -> int:
    reports = []
    hashes = set()
    shared = None
    for run in args.runs:
        run_dir, manifest = _load_run(run)
        hashes.add(manifest.dataset_hash)
        if len(hashes) > 1:
            raise CliError("refusing to aggregate runs trained on different datasets")
        if shared is None or shared[0] != manifest.extra["data_dir"]:
            graph, split, _ = load_prepared(manifest.extra["data_dir"])
            adjacency = adjacency_tensor(normalized_adjacency(graph))
            shared = (manifest.extra["data_dir"], graph, split, adjacency)
        _, graph, split, adjacency = shared
        model, _ = load_checkpoint(
            run_dir / "checkpoint.pt", expected_dataset_hash=manifest.dataset_hash
        )
        report = evaluate(model, adjacency, split, ks=args.ks, part=args.part)
        reports.append(report)
    combined = MetricsReport.aggregate(reports)
    text = format_metrics(combined)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_metrics(combined, out, out.with_suffix(out.suffix + ".kv"))
    return 0


# -- analyze -----------------------------------------------------------------


def _checkpoint_tag(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:10]


def cmd_analyze(args) -> int:
    run_dir, manifest = _load_run(args.run)
    graph, split, _ = load_prepared(manifest.extra["data_dir"])
    adjacency = adjacency_tensor(normalized_adjacency(graph))
    model, _ = load_checkpoint(
        run_dir / "checkpoint.pt", expected_dataset_hash=manifest.dataset_hash
    )
    if not model.has_disentangler:
        raise CliError(f"variant {model.variant!r} has no intent structure to analyze")
    out_dir = run_dir / "analysis"
    out_dir.mkdir(exist_ok=True)
    tag = f"{_checkpoint_tag(run_dir / 'checkpoint.pt')}.seed{args.seed}"
    written = []

    block = analysis.intent_block_similarity(model, adjacency, split, args.samples, args.seed)
    sample_ids = np.repeat(np.arange(len(block.group_sizes)), block.group_sizes)
    analysis.write_table(out_dir / f"behavior_similarity.{tag}.csv",
                         sample_ids, block.matrix, id_column="intent")
    analysis.write_table(out_dir / f"behavior_block_means.{tag}.csv",
                         np.arange(block.block_means.shape[0]), block.block_means,
                         id_column="intent")
    written += [f"behavior_similarity.{tag}.csv", f"behavior_block_means.{tag}.csv"]
    if block.omitted_groups:
        print(f"note: empty intent groups omitted: {block.omitted_groups}")

    ublock = analysis.user_block_similarity(model, adjacency, args.samples, args.seed)
    analysis.write_table(out_dir / f"user_block_means.{tag}.csv",
                         np.arange(ublock.block_means.shape[0]), ublock.block_means,
                         id_column="intent")
    written.append(f"user_block_means.{tag}.csv")

    proportions = analysis.intent_proportions(model, adjacency, split)
    analysis.write_table(out_dir / f"intent_proportions.{tag}.csv",
                         ["fraction"], proportions.reshape(1, -1), id_column="row")
    written.append(f"intent_proportions.{tag}.csv")

    confidence = analysis.behavior_confidences(model, adjacency, split.train_pairs)
    labels = np.stack(
        [analysis.top_m_labels(confidence, k, m=args.top_m) for k in range(model.num_intents)],
        axis=1,
    )
    analysis.write_table(out_dir / f"intent_top{args.top_m}_labels.{tag}.csv",
                         np.arange(labels.shape[0]), labels, id_column="behavior")
    written.append(f"intent_top{args.top_m}_labels.{tag}.csv")

    user_raw = args.user
    if user_raw is None:
        counts = np.bincount(split.train_pairs[:, 0], minlength=graph.num_users)
        user_idx = int(counts.argmax())
    else:
        if user_raw not in graph.user_index:
            raise CliError(f"unknown user id {user_raw!r}")
        user_idx = graph.user_index[user_raw]
    if args.items:
        try:
            item_idx = [graph.item_index[i] for i in args.items.split(",")]
        except KeyError as err:
            raise CliError(f"unknown item id {err.args[0]!r}") from err
    else:
        item_idx = [int(i) for i in split.train_item_sets[user_idx]][:3]
    distribution = analysis.behavior_distribution(model, adjacency, user_idx, item_idx)
    analysis.write_table(out_dir / f"behavior_distribution.{tag}.csv",
                         [graph.item_ids[i] for i in item_idx], distribution,
                         id_column="item")
    written.append(f"behavior_distribution.{tag}.csv")

    for which in args.export:
        kind, _, intent = which.partition(":")
        ids, matrix = analysis.export_embeddings(
            model, adjacency, kind,
            intent=int(intent) if intent else None, split=split,
        )
        name = f"embeddings_{which.replace(':', '_')}.{tag}.csv"
        analysis.write_table(out_dir / name, ids, matrix)
        written.append(name)

    manifest.add_outputs(*[f"analysis/{name}" for name in written])
    manifest.write(run_dir / "manifest.json")
    print(f"wrote {len(written)} tables to {out_dir}")
    return 0


# -- compare -----------------------------------------------------------------


def _collect_runs(paths):
    runs = []
    for path in paths:
        path = Path(path)
        if (path / "manifest.json").exists():
            runs.append(_load_run(path))
            continue
        found = sorted(path.glob("*/*/manifest.json")) + sorted(path.glob("*/manifest.json"))
        for manifest_path in found:
            try:
                runs.append(_load_run(manifest_path.parent))
            except CliError:
                continue
    if not runs:
        raise CliError("no training runs found under the given paths")
    return runs


def cmd_compare(args) -> int:
    runs = _collect_runs(args.runs)
    hashes = {manifest.dataset_hash for _, manifest in runs}
    if len(hashes) > 1:
        raise CliError("refusing to compare runs trained on different datasets")
    by_variant: dict = {}
    for run_dir, manifest in runs:
        by_variant.setdefault(manifest.variant, []).append((run_dir, manifest))

    ks = [int(k) for k in args.ks]
    metric_keys = [f"recall@{k}" for k in ks] + [f"ndcg@{k}" for k in ks]
    width = max(len(k) for k in metric_keys)
    header = "method".ljust(12) + "  " + "  ".join(k.rjust(width + 9) for k in metric_keys)
    lines = [header]
    for variant in sorted(by_variant):
        cells = []
        values = {key: [] for key in metric_keys}
        for run_dir, _ in by_variant[variant]:
            kv = read_metrics_kv(run_dir / "metrics.kv")
            for key in metric_keys:
                if key in kv:
                    values[key].append(kv[key])
        for key in metric_keys:
            if values[key]:
                arr = np.asarray(values[key])
                cells.append(f"{arr.mean():.4f}±{arr.std():.4f}".rjust(width + 9))
            else:
                cells.append("-".rjust(width + 9))
        lines.append(variant.ljust(12) + "  " + "  ".join(cells))
    print("\n".join(lines))

    ablation = [v for v in ("idcl", "no-icl", "no-cr") if v in by_variant]
    if len(ablation) > 1:
        print("\nablation (validation recall@20):")
        for variant in ablation:
            vals = []
            for run_dir, _ in by_variant[variant]:
                kv = read_metrics_kv(run_dir / "metrics_val.kv")
                if "recall@20" in kv:
                    vals.append(kv["recall@20"])
            if vals:
                arr = np.asarray(vals)
                print(f"  {variant.ljust(8)} {arr.mean():.4f}±{arr.std():.4f}  (n={len(vals)})")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return 0


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idcl",
        description="Train and analyze the intent-disentangled contrastive recommender.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="materialize a dataset and its split")
    p.add_argument("--dataset", default="synthetic",
                   help="ml-100k, ml-1m, synthetic, or a name for custom files")
    p.add_argument("--interactions", help="custom interaction TSV")
    p.add_argument("--concepts", help="custom item-concept TSV")
    p.add_argument("--data-dir", default="data", help="where raw archives live")
    p.add_argument("--fetch", action="store_true", help="download missing archives")
    p.add_argument("--keep-unknown-genre", action="store_true")
    p.add_argument("--rating-threshold", type=float, default=1.0)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--test-frac", type=float, default=0.2)
    p.add_argument("--heldout-users", type=int, default=0,
                   help="hold out whole users instead of per-user interactions")
    p.add_argument("--holdout-frac", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one variant over one or more seeds")
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--data", help="prepared data dir (default <out>/<dataset>/data)")
    p.add_argument("--config", help="flat key-value config file")
    p.add_argument("--variant", default="idcl", choices=VARIANTS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", help="comma-separated list overriding --seed")
    p.add_argument("--ks", type=int, nargs="+", default=[20, 50, 100])
    p.add_argument("--out", default="runs")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--strict-eq9", action="store_true",
                   help="drop the positive pair from each contrastive denominator")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="re-evaluate checkpoints and aggregate")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--ks", type=int, nargs="+", default=[20, 50, 100])
    p.add_argument("--part", default="test", choices=("val", "test"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="export interpretability tables for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--user", help="raw user id for the distribution export")
    p.add_argument("--items", help="comma-separated raw item ids")
    p.add_argument("--top-m", type=int, default=3,
                   help="rank cutoff for the per-intent membership labels")
    p.add_argument("--export", nargs="*", default=["user", "item"],
                   help="embedding tables: user item concept behavior-slice:<k>")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare", help="grid of metrics across runs and variants")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--ks", type=int, nargs="+", default=[20, 50, 100])
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, ParseError, GraphBuildError, CheckpointError,
            FileNotFoundError, datasets.ChecksumError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
