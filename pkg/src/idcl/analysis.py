"""Interpretability exports: block similarities, intent distributions,
intent proportions, and raw embedding tables.

Everything here is read-only over a trained model and deterministic given
(checkpoint, seed). Outputs are plain numpy arrays plus CSV writers so that
plotting stays external.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from .contrastive import intent_confidence
from .encoder import behavior_embedding

NORM_FLOOR = 1e-12


@dataclass
class BlockSimilarity:
    """Pairwise cosines over per-intent samples plus K x K block means.

    ``matrix`` stacks the sampled slices group by group; ``group_sizes[k]``
    rows belong to intent k (0 when that group was empty and omitted).
    Same-group block means exclude the unit diagonal.
    """

    matrix: np.ndarray
    block_means: np.ndarray
    group_sizes: list
    omitted_groups: list

    def within_mean(self) -> float:
        diag = np.diagonal(self.block_means)
        return float(np.nanmean(diag))

    def cross_mean(self) -> float:
        k = self.block_means.shape[0]
        off = self.block_means[~np.eye(k, dtype=bool)]
        return float(np.nanmean(off))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.clip(norms, NORM_FLOOR, None)


def _block_similarity(samples_per_group) -> BlockSimilarity:
    sizes = [len(s) for s in samples_per_group]
    omitted = [k for k, n in enumerate(sizes) if n == 0]
    stacked = np.vstack([s for s in samples_per_group if len(s)])
    cosine = _unit_rows(stacked) @ _unit_rows(stacked).T
    k = len(samples_per_group)
    block_means = np.full((k, k), np.nan)
    offsets = np.cumsum([0] + sizes)
    for a in range(k):
        if sizes[a] == 0:
            continue
        for b in range(k):
            if sizes[b] == 0:
                continue
            block = cosine[offsets[a] : offsets[a + 1], offsets[b] : offsets[b + 1]]
            if a == b:
                if sizes[a] < 2:
                    continue
                mask = ~np.eye(sizes[a], dtype=bool)
                block_means[a, b] = block[mask].mean()
            else:
                block_means[a, b] = block.mean()
    return BlockSimilarity(
        matrix=cosine, block_means=block_means, group_sizes=sizes, omitted_groups=omitted
    )


def _behavior_slices(model, adjacency, behavior_pairs, chunk: int = 4096):
    """Slices and confidences for the given (user, item) pairs, chunked."""
    with torch.no_grad():
        embeddings = model.encode(adjacency)
        z_users, z_items, z_concepts = model.split_nodes(embeddings)
        _, bases = model.dis.bases(z_concepts)
        all_slices = []
        all_confidence = []
        for start in range(0, len(behavior_pairs), chunk):
            block = behavior_pairs[start : start + chunk]
            users = torch.from_numpy(block[:, 0])
            items = torch.from_numpy(block[:, 1])
            z_e = behavior_embedding(z_users[users], z_items[items])
            out = model.dis.slices(z_e, bases)
            all_slices.append(out.slices)
            all_confidence.append(intent_confidence(out.slices, bases, model.tau))
    return torch.cat(all_slices).numpy(), torch.cat(all_confidence).numpy()


def intent_block_similarity(model, adjacency, split, n_samples: int, seed: int) -> BlockSimilarity:
    """Sample training behaviors per argmax-intent group and compare slices.

    Empty groups are omitted from the matrix and reported in
    ``omitted_groups``.
    """
    if not model.has_disentangler:
        raise ValueError("this model variant has no intent slices")
    pairs = split.train_pairs
    slices, confidence = _behavior_slices(model, adjacency, pairs)
    groups = confidence.argmax(axis=1)
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(model.num_intents):
        members = np.flatnonzero(groups == k)
        if len(members) == 0:
            samples.append(np.empty((0, model.dim // model.num_intents)))
            continue
        take = min(n_samples, len(members))
        chosen = rng.choice(members, size=take, replace=False)
        samples.append(slices[chosen, k, :])
    return _block_similarity(samples)


def user_block_similarity(model, adjacency, n_samples: int, seed: int) -> BlockSimilarity:
    """Same comparison over users, slicing readout embeddings into K blocks."""
    with torch.no_grad():
        embeddings = model.encode(adjacency)
        z_users, _, _ = model.split_nodes(embeddings)
    z = z_users.numpy()
    k = model.num_intents
    dd = model.dim // k
    rng = np.random.default_rng(seed)
    samples = []
    for block in range(k):
        take = min(n_samples, z.shape[0])
        chosen = rng.choice(z.shape[0], size=take, replace=False)
        samples.append(z[chosen, block * dd : (block + 1) * dd])
    return _block_similarity(samples)


def behavior_distribution(model, adjacency, user: int, items) -> np.ndarray:
    """Rows of the intent distribution for (user, item) pairs, for radar plots."""
    if not model.has_disentangler:
        raise ValueError("this model variant has no intent distribution")
    if not 0 <= user < model.num_users:
        raise ValueError(f"unknown user index {user}")
    items = np.asarray(items, dtype=np.int64)
    if items.size == 0 or items.min() < 0 or items.max() >= model.num_items:
        raise ValueError(f"item indices out of range: {items.tolist()}")
    pairs = np.stack([np.full_like(items, user), items], axis=1)
    _, confidence = _behavior_slices(model, adjacency, pairs)
    return confidence


def behavior_confidences(model, adjacency, pairs) -> np.ndarray:
    """Intent-distribution rows for arbitrary (user, item) index pairs."""
    if not model.has_disentangler:
        raise ValueError("this model variant has no intent distribution")
    _, confidence = _behavior_slices(model, adjacency, np.asarray(pairs, dtype=np.int64))
    return confidence


def intent_proportions(model, adjacency, split) -> np.ndarray:
    """Fraction of training behaviors whose argmax intent is k; sums to 1."""
    if not model.has_disentangler:
        raise ValueError("this model variant has no intent distribution")
    _, confidence = _behavior_slices(model, adjacency, split.train_pairs)
    groups = confidence.argmax(axis=1)
    counts = np.bincount(groups, minlength=model.num_intents)
    return counts / counts.sum()


def distribution_entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats with the 0 log 0 = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    nonzero = p[p > 0]
    return float(-(nonzero * np.log(nonzero)).sum())


def top_m_labels(confidence: np.ndarray, intent: int, m: int = 3) -> np.ndarray:
    """1 where ``intent`` ranks in the top-m confidences of a row, else 0."""
    order = np.argsort(-confidence, axis=1)
    return (order[:, :m] == intent).any(axis=1).astype(np.int64)


def export_embeddings(model, adjacency, which: str, *, intent: int | None = None, split=None):
    """(ids, matrix) table for external projection.

    ``which`` is one of ``user``, ``item``, ``concept``, or
    ``behavior-slice`` (the latter needs ``intent`` and ``split``).
    """
    with torch.no_grad():
        embeddings = model.encode(adjacency)
        z_users, z_items, z_concepts = model.split_nodes(embeddings)
    if which == "user":
        matrix = z_users.numpy()
    elif which == "item":
        matrix = z_items.numpy()
    elif which == "concept":
        matrix = z_concepts.numpy()
    elif which == "behavior-slice":
        if intent is None or split is None:
            raise ValueError("behavior-slice export needs an intent index and a split")
        if not 0 <= intent < model.num_intents:
            raise ValueError(f"intent index {intent} out of range")
        slices, _ = _behavior_slices(model, adjacency, split.train_pairs)
        matrix = slices[:, intent, :]
    else:
        raise ValueError(f"unknown export kind {which!r}")
    return np.arange(matrix.shape[0]), matrix


def write_table(path, ids, matrix, *, id_column: str = "id") -> None:
    """Comma-separated table with a one-line header."""
    matrix = np.asarray(matrix)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([id_column] + [f"v{j}" for j in range(matrix.shape[1])])
        for row_id, row in zip(ids, matrix):
            writer.writerow([row_id] + [f"{v:.9g}" for v in row])


def read_table(path):
    """Inverse of :func:`write_table`; returns (ids, matrix)."""
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        next(reader)
        ids, rows = [], []
        for record in reader:
            ids.append(record[0])
            rows.append([float(v) for v in record[1:]])
    return ids, np.asarray(rows)
