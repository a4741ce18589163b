"""Tripartite interaction graph: ingestion, splits, sampling, augmentation.

File formats
------------
* interactions: ``user \\t item \\t rating \\t timestamp`` per line, UTF-8.
* item concepts: ``item \\t concept_name`` per line, one row per membership.
* split manifest: ``user \\t item \\t {train|val|test}`` per line, written in
  behavior order so identical splits serialize byte-identically.

All randomized operations take an explicit seed and are pure functions of
their inputs, so they are reproducible and safe to call concurrently.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .config import ConfigError

SPLIT_PARTS = ("train", "val", "test")


class ParseError(ValueError):
    pass


class GraphBuildError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    """Users, items, and concepts with behavior and affiliation edges.

    Node indices are contiguous per class. The joint node layout used by the
    adjacency is users ``[0, N)``, items ``[N, N+M)``, concepts
    ``[N+M, N+M+R)``.
    """

    num_users: int
    num_items: int
    num_concepts: int
    user_item_edges: np.ndarray  # (F, 2) int64 rows of (user, item)
    item_concept_edges: np.ndarray  # (P, 2) int64 rows of (item, concept)
    user_index: dict
    item_index: dict
    concept_index: dict

    @property
    def num_behaviors(self) -> int:
        return len(self.user_item_edges)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items + self.num_concepts

    @cached_property
    def user_ids(self) -> list:
        return _inverse(self.user_index)

    @cached_property
    def item_ids(self) -> list:
        return _inverse(self.item_index)

    @cached_property
    def concept_ids(self) -> list:
        return _inverse(self.concept_index)

    @cached_property
    def edge_lookup(self) -> dict:
        """(user, item) -> behavior index."""
        return {(int(u), int(i)): e for e, (u, i) in enumerate(self.user_item_edges)}

    def dataset_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(
            np.asarray(
                [self.num_users, self.num_items, self.num_concepts], dtype=np.int64
            ).tobytes()
        )
        digest.update(np.ascontiguousarray(self.user_item_edges).tobytes())
        digest.update(np.ascontiguousarray(self.item_concept_edges).tobytes())
        return digest.hexdigest()[:16]


def _inverse(index: dict) -> list:
    out = [None] * len(index)
    for raw, idx in index.items():
        out[idx] = raw
    return out


def load_interactions(path, fmt: str = "movielens-tsv", rating_threshold: float = 1.0):
    """Read an interaction file into deduplicated implicit-feedback pairs.

    Rows whose rating falls below ``rating_threshold`` are dropped. The first
    occurrence of each (user, item) pair is kept, preserving file order.
    """
    if fmt != "movielens-tsv":
        raise ParseError(f"unsupported interaction format: {fmt!r}")
    pairs = []
    seen = set()
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(
                    f"{path}: line {lineno}: expected 4 tab-separated fields, got {len(parts)}"
                )
            user, item, rating_raw, _timestamp = parts
            try:
                rating = float(rating_raw)
            except ValueError as err:
                raise ParseError(
                    f"{path}: line {lineno}: rating {rating_raw!r} is not a number"
                ) from err
            if rating < rating_threshold:
                continue
            key = (user, item)
            if key in seen:
                continue
            seen.add(key)
            pairs.append(key)
    if not pairs:
        raise ParseError(f"{path}: no interactions at or above rating {rating_threshold}")
    return pairs


def load_item_concepts(path):
    """Read ``item \\t concept`` membership rows, deduplicated in file order."""
    rows = []
    seen = set()
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(
                    f"{path}: line {lineno}: expected 2 tab-separated fields, got {len(parts)}"
                )
            key = (parts[0], parts[1])
            if key in seen:
                continue
            seen.add(key)
            rows.append(key)
    return rows


def build_graph(
    interactions,
    item_concepts,
    *,
    drop_unknown_items: bool = True,
    known_concepts=None,
) -> InteractionGraph:
    """Assemble the tripartite graph with contiguous node indices.

    Indices are assigned by first appearance in ``interactions`` (users,
    items) and in ``item_concepts`` (concepts), or by ``known_concepts``
    order when an explicit concept vocabulary is supplied. Concept rows for
    items absent from the interactions are dropped when
    ``drop_unknown_items`` is set, otherwise they are an error.
    """
    if not interactions:
        raise GraphBuildError("no interactions given")
    user_index: dict = {}
    item_index: dict = {}
    ui = np.empty((len(interactions), 2), dtype=np.int64)
    for row, (user, item) in enumerate(interactions):
        ui[row, 0] = user_index.setdefault(user, len(user_index))
        ui[row, 1] = item_index.setdefault(item, len(item_index))

    concept_index: dict = {}
    if known_concepts is not None:
        for name in known_concepts:
            if name in concept_index:
                raise GraphBuildError(f"duplicate concept in vocabulary: {name!r}")
            concept_index[name] = len(concept_index)

    ic_rows = []
    for item, concept in item_concepts:
        if item not in item_index:
            if drop_unknown_items:
                continue
            raise GraphBuildError(f"concept row references unknown item {item!r}")
        if concept not in concept_index:
            if known_concepts is not None:
                raise GraphBuildError(f"unknown concept {concept!r}")
            concept_index[concept] = len(concept_index)
        ic_rows.append((item_index[item], concept_index[concept]))
    ic = np.asarray(ic_rows, dtype=np.int64).reshape(len(ic_rows), 2)

    covered = set(ic[:, 1].tolist())
    for concept, idx in concept_index.items():
        if idx not in covered:
            raise GraphBuildError(
                f"concept {concept!r} has no items after filtering; remove it or its source rows"
            )

    return InteractionGraph(
        num_users=len(user_index),
        num_items=len(item_index),
        num_concepts=len(concept_index),
        user_item_edges=ui,
        item_concept_edges=ic,
        user_index=user_index,
        item_index=item_index,
        concept_index=concept_index,
    )


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    """Partition of the behavior edges into train/val/test index sets."""

    graph: InteractionGraph
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    seed: int
    mode: str = "holdout-interactions"

    def __post_init__(self):
        total = len(self.train_idx) + len(self.val_idx) + len(self.test_idx)
        if total != self.graph.num_behaviors:
            raise GraphBuildError(
                f"split covers {total} of {self.graph.num_behaviors} behaviors"
            )

    @cached_property
    def train_pairs(self) -> np.ndarray:
        return self.graph.user_item_edges[self.train_idx]

    @cached_property
    def train_item_sets(self) -> list:
        """Per-user sets of training items, for negative rejection/masking."""
        sets = [set() for _ in range(self.graph.num_users)]
        for user, item in self.train_pairs:
            sets[user].add(int(item))
        return sets

    def user_items(self, part: str) -> list:
        """Per-user sorted item arrays for one split part."""
        if part not in SPLIT_PARTS:
            raise ValueError(f"unknown split part {part!r}")
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[part]
        per_user = [[] for _ in range(self.graph.num_users)]
        for user, item in self.graph.user_item_edges[idx]:
            per_user[user].append(int(item))
        return [np.asarray(sorted(items), dtype=np.int64) for items in per_user]


def split_holdout(graph: InteractionGraph, val_frac: float, test_frac: float, seed: int) -> DatasetSplit:
    """Hold out a fraction of each user's behaviors for validation and test.

    Held-out counts are floored per user, so users with too few behaviors
    keep everything in train. Deterministic for a given seed.
    """
    if val_frac < 0 or test_frac < 0 or val_frac + test_frac >= 1.0:
        raise ConfigError(
            f"need val_frac + test_frac < 1 and both >= 0, got {val_frac}, {test_frac}"
        )
    rng = np.random.default_rng(seed)
    order = np.argsort(graph.user_item_edges[:, 0], kind="stable")
    bounds = np.searchsorted(
        graph.user_item_edges[order, 0], np.arange(graph.num_users + 1)
    )
    train, val, test = [], [], []
    for user in range(graph.num_users):
        edges = order[bounds[user] : bounds[user + 1]]
        deg = len(edges)
        if deg == 0:
            continue
        shuffled = rng.permutation(edges)
        n_val = int(val_frac * deg + 1e-9)
        n_test = int(test_frac * deg + 1e-9)
        test.extend(shuffled[:n_test])
        val.extend(shuffled[n_test : n_test + n_val])
        train.extend(shuffled[n_test + n_val :])
    return DatasetSplit(
        graph=graph,
        train_idx=np.asarray(sorted(train), dtype=np.int64),
        val_idx=np.asarray(sorted(val), dtype=np.int64),
        test_idx=np.asarray(sorted(test), dtype=np.int64),
        seed=seed,
        mode="holdout-interactions",
    )


def split_heldout_users(
    graph: InteractionGraph,
    num_heldout: int,
    *,
    holdout_frac: float = 0.5,
    val_user_frac: float = 0.5,
    seed: int = 0,
) -> DatasetSplit:
    """Hold out whole users; half of each held-out user's behaviors stay in
    train as fold-in context and the rest are scored.

    Held-out users are drawn from those with at least two behaviors and are
    split between validation and test by ``val_user_frac``.
    """
    if not 0 < holdout_frac < 1:
        raise ConfigError(f"holdout_frac must be in (0, 1), got {holdout_frac}")
    if not 0 <= val_user_frac <= 1:
        raise ConfigError(f"val_user_frac must be in [0, 1], got {val_user_frac}")
    rng = np.random.default_rng(seed)
    order = np.argsort(graph.user_item_edges[:, 0], kind="stable")
    bounds = np.searchsorted(
        graph.user_item_edges[order, 0], np.arange(graph.num_users + 1)
    )
    degrees = bounds[1:] - bounds[:-1]
    eligible = np.flatnonzero(degrees >= 2)
    if num_heldout > len(eligible):
        raise ConfigError(
            f"cannot hold out {num_heldout} users; only {len(eligible)} have >= 2 behaviors"
        )
    chosen = rng.permutation(eligible)[:num_heldout]
    n_val_users = int(round(val_user_frac * num_heldout))
    val_users = set(chosen[:n_val_users].tolist())
    test_users = set(chosen[n_val_users:].tolist())

    train, val, test = [], [], []
    for user in range(graph.num_users):
        edges = order[bounds[user] : bounds[user + 1]]
        deg = len(edges)
        if deg == 0:
            continue
        if user in val_users or user in test_users:
            shuffled = rng.permutation(edges)
            n_held = min(max(int(holdout_frac * deg), 1), deg - 1)
            bucket = val if user in val_users else test
            bucket.extend(shuffled[:n_held])
            train.extend(shuffled[n_held:])
        else:
            train.extend(edges)
    return DatasetSplit(
        graph=graph,
        train_idx=np.asarray(sorted(train), dtype=np.int64),
        val_idx=np.asarray(sorted(val), dtype=np.int64),
        test_idx=np.asarray(sorted(test), dtype=np.int64),
        seed=seed,
        mode="heldout-users",
    )


@dataclass(frozen=True, eq=False)
class BprBatch:
    """Triples (user, positive item, negative item) plus behavior indices."""

    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray
    behavior_idx: np.ndarray  # indices into graph.user_item_edges

    def __len__(self) -> int:
        return len(self.users)


def sample_bpr_batch(
    split: DatasetSplit, batch_size: int, seed: int, max_tries: int = 1000
) -> BprBatch:
    """Sample training behaviors uniformly and one rejected-uniform negative each.

    Negatives are uniform over items outside the user's training positives;
    rejection is bounded by ``max_tries`` rounds before erroring.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if len(split.train_idx) == 0:
        raise SamplingError("split has no training behaviors")
    rng = np.random.default_rng(seed)
    num_items = split.graph.num_items
    pick = rng.integers(0, len(split.train_idx), size=batch_size)
    behavior_idx = split.train_idx[pick]
    users = split.graph.user_item_edges[behavior_idx, 0]
    pos_items = split.graph.user_item_edges[behavior_idx, 1]

    pos_sets = split.train_item_sets
    neg_items = rng.integers(0, num_items, size=batch_size)
    pending = [b for b in range(batch_size) if int(neg_items[b]) in pos_sets[users[b]]]
    tries = 0
    while pending:
        tries += 1
        if tries > max_tries:
            user = users[pending[0]]
            raise SamplingError(
                f"could not sample a negative for user {int(user)} after {max_tries} rounds"
            )
        draws = rng.integers(0, num_items, size=len(pending))
        still = []
        for draw, b in zip(draws, pending):
            if int(draw) in pos_sets[users[b]]:
                still.append(b)
            else:
                neg_items[b] = draw
        pending = still
    return BprBatch(
        users=users.astype(np.int64),
        pos_items=pos_items.astype(np.int64),
        neg_items=neg_items.astype(np.int64),
        behavior_idx=behavior_idx.astype(np.int64),
    )


@dataclass(frozen=True, eq=False)
class AugmentedGraph:
    """Edge-dropout view: a keep-mask over the stacked behavior and
    affiliation edges of the base graph."""

    graph: InteractionGraph
    edge_mask: np.ndarray  # bool over [user_item_edges; item_concept_edges]
    rho: float
    seed: int

    @property
    def surviving_user_item(self) -> np.ndarray:
        f = self.graph.num_behaviors
        return self.graph.user_item_edges[self.edge_mask[:f]]

    @property
    def surviving_item_concept(self) -> np.ndarray:
        f = self.graph.num_behaviors
        return self.graph.item_concept_edges[self.edge_mask[f:]]


def edge_dropout(graph: InteractionGraph, rho: float, seed: int) -> AugmentedGraph:
    """Keep each edge independently with probability ``1 - rho``."""
    if not 0.0 <= rho < 1.0:
        raise ConfigError(f"dropout ratio must be in [0, 1), got {rho}")
    total = graph.num_behaviors + len(graph.item_concept_edges)
    rng = np.random.default_rng(seed)
    mask = rng.random(total) >= rho
    return AugmentedGraph(graph=graph, edge_mask=mask, rho=rho, seed=seed)


def normalized_adjacency(graph) -> sp.csr_matrix:
    """Symmetric-normalized adjacency over the joint node set.

    Entry (a, b) is ``1/sqrt(deg(a) * deg(b))`` for every surviving edge in
    both directions; no self-loops. Isolated nodes yield zero rows.
    """
    if isinstance(graph, AugmentedGraph):
        base = graph.graph
        ui = graph.surviving_user_item
        ic = graph.surviving_item_concept
    else:
        base = graph
        ui = graph.user_item_edges
        ic = graph.item_concept_edges
    n = base.num_nodes
    if n == 0:
        raise GraphBuildError("graph has no nodes")
    rows = np.concatenate([ui[:, 0], ic[:, 0] + base.num_users])
    cols = np.concatenate(
        [ui[:, 1] + base.num_users, ic[:, 1] + base.num_users + base.num_items]
    )
    degree = np.bincount(rows, minlength=n) + np.bincount(cols, minlength=n)
    inv_sqrt = np.zeros(n, dtype=np.float64)
    nonzero = degree > 0
    inv_sqrt[nonzero] = 1.0 / np.sqrt(degree[nonzero])
    values = inv_sqrt[rows] * inv_sqrt[cols]
    adj = sp.coo_matrix(
        (
            np.concatenate([values, values]),
            (np.concatenate([rows, cols]), np.concatenate([cols, rows])),
        ),
        shape=(n, n),
    )
    return adj.tocsr()


def write_split_manifest(path, split: DatasetSplit) -> None:
    """Write ``user \\t item \\t part`` lines in behavior order (raw ids)."""
    graph = split.graph
    labels = np.empty(graph.num_behaviors, dtype=np.int8)
    labels[split.train_idx] = 0
    labels[split.val_idx] = 1
    labels[split.test_idx] = 2
    users = graph.user_ids
    items = graph.item_ids
    with open(path, "w", encoding="utf-8") as handle:
        for e, (u, i) in enumerate(graph.user_item_edges):
            handle.write(f"{users[u]}\t{items[i]}\t{SPLIT_PARTS[labels[e]]}\n")


def read_split_manifest(path, graph: InteractionGraph, seed: int = -1, mode: str = "from-manifest") -> DatasetSplit:
    """Rebuild a split from its manifest; every behavior must appear once."""
    buckets = {part: [] for part in SPLIT_PARTS}
    seen = np.zeros(graph.num_behaviors, dtype=bool)
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in SPLIT_PARTS:
                raise ParseError(f"{path}: line {lineno}: malformed manifest row {line!r}")
            user, item, part = parts
            try:
                edge = graph.edge_lookup[(graph.user_index[user], graph.item_index[item])]
            except KeyError as err:
                raise ParseError(
                    f"{path}: line {lineno}: ({user!r}, {item!r}) is not a behavior of this graph"
                ) from err
            if seen[edge]:
                raise ParseError(f"{path}: line {lineno}: duplicate behavior row")
            seen[edge] = True
            buckets[part].append(edge)
    if not seen.all():
        raise ParseError(f"{path}: manifest misses {int((~seen).sum())} behaviors")
    return DatasetSplit(
        graph=graph,
        train_idx=np.asarray(sorted(buckets["train"]), dtype=np.int64),
        val_idx=np.asarray(sorted(buckets["val"]), dtype=np.int64),
        test_idx=np.asarray(sorted(buckets["test"]), dtype=np.int64),
        seed=seed,
        mode=mode,
    )
