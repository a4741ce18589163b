"""All-ranking top-K evaluation: Recall@K and NDCG@K with train masking.

Every non-training item is a candidate for every evaluable user. Ties are
broken by ascending item id so rankings are reproducible. The recall
denominator is ``min(K, |relevant|)`` by default, with the plain
``|relevant|`` form behind a flag.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

logger = logging.getLogger(__name__)


def rank_items(scores: np.ndarray, train_mask: np.ndarray, k: int) -> np.ndarray:
    """Top-k item ids by descending score, training items excluded.

    Ties break by ascending item id. If fewer than k items are unmasked, all
    of them are returned (and the short result is logged).
    """
    if scores.ndim != 1 or train_mask.shape != scores.shape:
        raise ValueError(
            f"scores {scores.shape} and mask {train_mask.shape} must be equal-length vectors"
        )
    masked = np.where(train_mask, -np.inf, scores.astype(np.float64))
    order = np.argsort(-masked, kind="stable")
    unmasked = int((~train_mask).sum())
    if k > unmasked:
        logger.warning("asked for top-%d but only %d unmasked items", k, unmasked)
        k = unmasked
    return order[:k]


def recall_at_k(topk, relevant, *, k: int | None = None, plain_denominator: bool = False) -> float:
    """Fraction of relevant items retrieved, denominator capped at k by default."""
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    if k is None:
        k = len(topk)
    hits = sum(1 for item in topk if int(item) in relevant)
    denom = len(relevant) if plain_denominator else min(k, len(relevant))
    return hits / denom


def ndcg_at_k(topk, relevant, *, k: int | None = None) -> float:
    """Binary-gain DCG at rank cut k over the ideal ordering."""
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    if k is None:
        k = len(topk)
    dcg = 0.0
    for rank, item in enumerate(topk, start=1):
        if int(item) in relevant:
            dcg += 1.0 / np.log2(rank + 1)
    ideal = sum(1.0 / np.log2(r + 1) for r in range(1, min(k, len(relevant)) + 1))
    return dcg / ideal


@dataclass
class MetricsReport:
    """Per-run metric values plus their mean and standard deviation."""

    ks: tuple
    runs: list  # one {"recall@20": ..., "ndcg@20": ...} dict per run
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    num_users: int = 0

    def __post_init__(self):
        if self.runs and not self.mean:
            keys = self.runs[0].keys()
            for key in keys:
                values = np.asarray([run[key] for run in self.runs], dtype=np.float64)
                self.mean[key] = float(values.mean())
                self.std[key] = float(values.std())

    @classmethod
    def aggregate(cls, reports) -> "MetricsReport":
        reports = list(reports)
        if not reports:
            raise ValueError("nothing to aggregate")
        ks = reports[0].ks
        runs = [run for report in reports for run in report.runs]
        return cls(ks=ks, runs=runs, num_users=reports[0].num_users)


def evaluate(
    model,
    adjacency: torch.Tensor,
    split,
    ks=(20, 50, 100),
    *,
    part: str = "test",
    plain_denominator: bool = False,
    user_chunk: int = 512,
) -> MetricsReport:
    """Score every user against every non-training item and average metrics.

    Users without held-out items in ``part`` are skipped; an empty evaluable
    set is an error.
    """
    ks = tuple(int(k) for k in ks)
    if not ks:
        raise ValueError("need at least one cutoff")
    with torch.no_grad():
        embeddings = model.encode(adjacency)
        z_users, z_items, _ = model.split_nodes(embeddings)
        z_users = z_users.detach().cpu().numpy().astype(np.float64)
        z_items = z_items.detach().cpu().numpy().astype(np.float64)

    eval_items = split.user_items(part)
    train_items = split.user_items("train")
    evaluable = [u for u in range(split.graph.num_users) if len(eval_items[u]) > 0]
    if not evaluable:
        raise ValueError(f"no users have held-out items in part {part!r}")

    kmax = max(ks)
    num_items = split.graph.num_items
    totals = {f"recall@{k}": 0.0 for k in ks}
    totals.update({f"ndcg@{k}": 0.0 for k in ks})
    for start in range(0, len(evaluable), user_chunk):
        chunk = evaluable[start : start + user_chunk]
        scores = z_users[chunk] @ z_items.T
        for row, user in enumerate(chunk):
            mask = np.zeros(num_items, dtype=bool)
            mask[train_items[user]] = True
            top = rank_items(scores[row], mask, kmax)
            relevant = eval_items[user]
            for k in ks:
                prefix = top[:k]
                totals[f"recall@{k}"] += recall_at_k(
                    prefix, relevant, k=k, plain_denominator=plain_denominator
                )
                totals[f"ndcg@{k}"] += ndcg_at_k(prefix, relevant, k=k)
    run = {key: value / len(evaluable) for key, value in totals.items()}
    return MetricsReport(ks=ks, runs=[run], num_users=len(evaluable))


def format_metrics(report: MetricsReport) -> str:
    """Human-readable table: one row per metric, mean +/- std over runs."""
    lines = [f"users evaluated: {report.num_users}", f"runs: {len(report.runs)}"]
    for key in sorted(report.mean, key=_metric_order):
        lines.append(f"{key:<12} {report.mean[key]:.4f} ± {report.std[key]:.4f}")
    return "\n".join(lines) + "\n"


def write_metrics(report: MetricsReport, text_path, kv_path) -> None:
    """Emit the structured text report and a machine-readable key-value file."""
    with open(text_path, "w", encoding="utf-8") as handle:
        handle.write(format_metrics(report))
    with open(kv_path, "w", encoding="utf-8") as handle:
        handle.write(f"num_users = {report.num_users}\n")
        handle.write(f"num_runs = {len(report.runs)}\n")
        for key in sorted(report.mean, key=_metric_order):
            handle.write(f"{key} = {report.mean[key]:.10g}\n")
            handle.write(f"{key}.std = {report.std[key]:.10g}\n")
        for idx, run in enumerate(report.runs):
            for key in sorted(run, key=_metric_order):
                handle.write(f"run{idx}.{key} = {run[key]:.10g}\n")


def read_metrics_kv(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, value = line.split("=", 1)
            out[key.strip()] = float(value)
    return out


def _metric_order(key: str):
    name, _, cut = key.partition("@")
    return (name, int(cut.split(".")[0]) if cut else 0)
