import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from idcl.config import ConfigError
from idcl.data import (
    GraphBuildError,
    ParseError,
    SamplingError,
    build_graph,
    edge_dropout,
    load_interactions,
    load_item_concepts,
    normalized_adjacency,
    read_split_manifest,
    sample_bpr_batch,
    split_heldout_users,
    split_holdout,
    write_split_manifest,
)

from conftest import make_graph, write_interactions


# -- load_interactions ---------------------------------------------------------


def test_load_three_rows(tmp_path):
    path = tmp_path / "inter.tsv"
    write_interactions(path, [("u1", "i1", 5, 1), ("u1", "i2", 4, 2), ("u2", "i1", 3, 3)])
    assert load_interactions(path) == [("u1", "i1"), ("u1", "i2"), ("u2", "i1")]


def test_load_dedups_pairs(tmp_path):
    path = tmp_path / "inter.tsv"
    write_interactions(path, [("u1", "i1", 5, 1), ("u1", "i1", 2, 9)])
    assert load_interactions(path) == [("u1", "i1")]


def test_load_missing_fields_names_line(tmp_path):
    path = tmp_path / "inter.tsv"
    path.write_text("a\tb\n")
    with pytest.raises(ParseError, match="line 1"):
        load_interactions(path)


def test_load_empty_file_errors(tmp_path):
    path = tmp_path / "inter.tsv"
    path.write_text("")
    with pytest.raises(ParseError):
        load_interactions(path)


def test_load_applies_rating_threshold(tmp_path):
    path = tmp_path / "inter.tsv"
    write_interactions(path, [("u1", "i1", 5, 1), ("u1", "i2", 2, 2)])
    assert load_interactions(path, rating_threshold=3.0) == [("u1", "i1")]


def test_load_bad_rating_errors(tmp_path):
    path = tmp_path / "inter.tsv"
    path.write_text("u1\ti1\thigh\t0\n")
    with pytest.raises(ParseError, match="line 1"):
        load_interactions(path)


def test_load_item_concepts_rejects_bad_rows(tmp_path):
    path = tmp_path / "con.tsv"
    path.write_text("i1\tc1\textra\n")
    with pytest.raises(ParseError, match="line 1"):
        load_item_concepts(path)


# -- build_graph -----------------------------------------------------------------


def test_build_counts_direct():
    pairs = [("u1", "i1"), ("u1", "i2"), ("u2", "i2")]
    graph = build_graph(pairs, [("i1", "c0"), ("i2", "c0")])
    assert (graph.num_users, graph.num_items, graph.num_concepts) == (2, 2, 1)
    assert graph.num_behaviors == 3


def test_build_rejects_unknown_concept_with_vocabulary():
    pairs = [("u1", "i1")]
    with pytest.raises(GraphBuildError, match="mystery"):
        build_graph(pairs, [("i1", "mystery")], known_concepts=["c0"])


def test_build_rejects_concept_without_items():
    pairs = [("u1", "i1")]
    with pytest.raises(GraphBuildError, match="lonely"):
        build_graph(pairs, [("i1", "c0")], known_concepts=["c0", "lonely"])


def test_build_drops_or_rejects_unknown_items():
    pairs = [("u1", "i1")]
    memberships = [("i1", "c0"), ("ghost", "c0")]
    graph = build_graph(pairs, memberships, drop_unknown_items=True)
    assert len(graph.item_concept_edges) == 1
    with pytest.raises(GraphBuildError, match="ghost"):
        build_graph(pairs, memberships, drop_unknown_items=False)


def test_build_indices_in_range_and_unique(tiny_graph):
    ui = tiny_graph.user_item_edges
    ic = tiny_graph.item_concept_edges
    assert ui[:, 0].max() < tiny_graph.num_users
    assert ui[:, 1].max() < tiny_graph.num_items
    assert ic[:, 1].max() < tiny_graph.num_concepts
    assert len({tuple(r) for r in ui}) == len(ui)
    assert len({tuple(r) for r in ic}) == len(ic)


# -- split_holdout -----------------------------------------------------------------


def _one_user_graph(num_items=10):
    pairs = [("u0", f"i{i}") for i in range(num_items)]
    return build_graph(pairs, [("i0", "c0")])


def test_split_counts_ten_edges():
    graph = _one_user_graph(10)
    split = split_holdout(graph, val_frac=0.2, test_frac=0.2, seed=3)
    assert (len(split.train_idx), len(split.val_idx), len(split.test_idx)) == (6, 2, 2)


def test_split_zero_fracs_all_train(tiny_graph):
    split = split_holdout(tiny_graph, 0.0, 0.0, seed=0)
    assert len(split.train_idx) == tiny_graph.num_behaviors
    assert len(split.val_idx) == len(split.test_idx) == 0


def test_split_deterministic(tiny_graph):
    a = split_holdout(tiny_graph, 0.2, 0.2, seed=9)
    b = split_holdout(tiny_graph, 0.2, 0.2, seed=9)
    assert np.array_equal(a.train_idx, b.train_idx)
    assert np.array_equal(a.val_idx, b.val_idx)
    assert np.array_equal(a.test_idx, b.test_idx)


def test_split_single_interaction_stays_in_train():
    pairs = [("u0", "i0"), ("u1", "i0"), ("u1", "i1"), ("u1", "i2"), ("u1", "i3"), ("u1", "i4")]
    graph = build_graph(pairs, [("i0", "c0")])
    split = split_holdout(graph, 0.3, 0.3, seed=0)
    u0_edges = [e for e, (u, _) in enumerate(graph.user_item_edges) if u == 0]
    assert set(u0_edges) <= set(split.train_idx.tolist())


def test_split_rejects_bad_fracs(tiny_graph):
    with pytest.raises(ConfigError):
        split_holdout(tiny_graph, 0.5, 0.5, seed=0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), val=st.floats(0, 0.4), test=st.floats(0, 0.4))
def test_split_partitions_behaviors(seed, val, test):
    graph = make_graph(num_users=5, num_items=8, seed=1)
    split = split_holdout(graph, val, test, seed=seed)
    merged = np.concatenate([split.train_idx, split.val_idx, split.test_idx])
    assert sorted(merged.tolist()) == list(range(graph.num_behaviors))


def test_split_evaluable_users_keep_train_edges(tiny_graph):
    split = split_holdout(tiny_graph, 0.2, 0.2, seed=5)
    train_items = split.user_items("train")
    for part in ("val", "test"):
        for user, items in enumerate(split.user_items(part)):
            if len(items):
                assert len(train_items[user]) >= 1


def test_split_heldout_users_mode():
    graph = make_graph(num_users=10, num_items=12, seed=2)
    split = split_heldout_users(graph, num_heldout=4, seed=0)
    assert split.mode == "heldout-users"
    merged = np.concatenate([split.train_idx, split.val_idx, split.test_idx])
    assert sorted(merged.tolist()) == list(range(graph.num_behaviors))
    # every held-out user keeps fold-in context in train
    for part in ("val", "test"):
        train_items = split.user_items("train")
        for user, items in enumerate(split.user_items(part)):
            if len(items):
                assert len(train_items[user]) >= 1


# -- sample_bpr_batch -----------------------------------------------------------


def _two_user_two_item_graph():
    pairs = [("u0", "i0"), ("u1", "i1")]
    return build_graph(pairs, [("i0", "c0")])


def test_bpr_forced_negative():
    split = split_holdout(_two_user_two_item_graph(), 0, 0, seed=0)
    batch = sample_bpr_batch(split, 64, seed=1)
    for user, neg in zip(batch.users, batch.neg_items):
        assert neg == (1 - user)  # the only non-positive item


def test_bpr_batch_size():
    split = split_holdout(_two_user_two_item_graph(), 0, 0, seed=0)
    assert len(sample_bpr_batch(split, 256, seed=0)) == 256


def test_bpr_triples_respect_train_edges(tiny_split):
    batch = sample_bpr_batch(tiny_split, 512, seed=7)
    train_pairs = {tuple(p) for p in tiny_split.train_pairs}
    for u, i, j, e in zip(batch.users, batch.pos_items, batch.neg_items, batch.behavior_idx):
        assert (u, i) in train_pairs
        assert (u, j) not in train_pairs
        assert tuple(tiny_split.graph.user_item_edges[e]) == (u, i)


def test_bpr_deterministic(tiny_split):
    a = sample_bpr_batch(tiny_split, 128, seed=11)
    b = sample_bpr_batch(tiny_split, 128, seed=11)
    assert np.array_equal(a.users, b.users)
    assert np.array_equal(a.pos_items, b.pos_items)
    assert np.array_equal(a.neg_items, b.neg_items)


def test_bpr_negative_frequency_uniform():
    # one user with a single positive among 5 items; negatives should be
    # uniform over the other 4
    pairs = [("u0", "i0")] + [("u1", f"i{i}") for i in range(1, 5)]
    graph = build_graph(pairs, [("i0", "c0")])
    split = split_holdout(graph, 0, 0, seed=0)
    batch = sample_bpr_batch(split, 100_000, seed=3)
    negs = batch.neg_items[batch.users == 0]
    counts = np.bincount(negs, minlength=5)[1:]
    assert counts.sum() > 10_000
    result = scipy.stats.chisquare(counts)
    assert result.pvalue > 1e-3


def test_bpr_errors_when_user_covers_all_items():
    pairs = [("u0", "i0"), ("u0", "i1"), ("u1", "i0")]
    graph = build_graph(pairs, [("i0", "c0")])
    split = split_holdout(graph, 0, 0, seed=0)
    with pytest.raises(SamplingError, match="user 0"):
        sample_bpr_batch(split, 32, seed=0, max_tries=20)


# -- edge_dropout -----------------------------------------------------------------


def _grid_graph(num_users=100, num_items=100):
    pairs = [(f"u{u}", f"i{i}") for u in range(num_users) for i in range(num_items)]
    memberships = [(f"i{i}", "c0") for i in range(num_items)]
    return build_graph(pairs, memberships)


def test_dropout_zero_keeps_everything(tiny_graph):
    aug = edge_dropout(tiny_graph, 0.0, seed=0)
    assert aug.edge_mask.all()
    assert np.array_equal(aug.surviving_user_item, tiny_graph.user_item_edges)


def test_dropout_binomial_interval():
    graph = _grid_graph()  # 10^4 behavior edges
    aug = edge_dropout(graph, 0.1, seed=42)
    survivors = int(aug.edge_mask[: graph.num_behaviors].sum())
    low, high = scipy.stats.binom.interval(0.99, graph.num_behaviors, 0.9)
    assert low <= survivors <= high


def test_dropout_deterministic(tiny_graph):
    a = edge_dropout(tiny_graph, 0.3, seed=5)
    b = edge_dropout(tiny_graph, 0.3, seed=5)
    assert np.array_equal(a.edge_mask, b.edge_mask)


def test_dropout_mean_over_seeds():
    graph = _grid_graph()
    rho = 0.25
    fractions = [
        edge_dropout(graph, rho, seed=s).edge_mask[: graph.num_behaviors].mean()
        for s in range(100)
    ]
    assert abs(np.mean(fractions) - (1 - rho)) < 0.01


def test_dropout_rejects_rho_one(tiny_graph):
    with pytest.raises(ConfigError):
        edge_dropout(tiny_graph, 1.0, seed=0)


def test_dropout_applies_to_concept_edges_too():
    graph = _grid_graph()
    aug = edge_dropout(graph, 0.5, seed=1)
    concept_part = aug.edge_mask[graph.num_behaviors :]
    assert 0 < concept_part.sum() < len(concept_part)


# -- normalized_adjacency --------------------------------------------------------


def test_adjacency_single_edge_unit_weight():
    graph = build_graph([("u0", "i0")], [])
    adj = normalized_adjacency(graph)
    assert adj[0, 1] == 1.0
    assert adj[1, 0] == 1.0


def test_adjacency_degree_four_times_degree_one():
    pairs = [("u0", f"i{i}") for i in range(4)]
    graph = build_graph(pairs, [("i3", "c0")])
    adj = normalized_adjacency(graph)
    # u0 has degree 4; i0 has degree 1
    assert adj[0, 1] == pytest.approx(0.5, abs=1e-12)


def test_adjacency_exactly_symmetric(tiny_graph):
    adj = normalized_adjacency(tiny_graph)
    assert (adj != adj.T).nnz == 0


def test_adjacency_matches_dense_construction():
    for seed in range(5):
        graph = make_graph(num_users=6, num_items=7, num_concepts=3, seed=seed)
        n = graph.num_nodes
        assert n <= 50
        dense = np.zeros((n, n))
        for u, i in graph.user_item_edges:
            dense[u, graph.num_users + i] = 1
            dense[graph.num_users + i, u] = 1
        for i, c in graph.item_concept_edges:
            a, b = graph.num_users + i, graph.num_users + graph.num_items + c
            dense[a, b] = dense[b, a] = 1
        deg = dense.sum(1)
        inv = np.divide(1.0, np.sqrt(deg), out=np.zeros(n), where=deg > 0)
        expected = inv[:, None] * dense * inv[None, :]
        np.testing.assert_allclose(
            normalized_adjacency(graph).toarray(), expected, atol=1e-12
        )


def test_adjacency_survives_dropout_with_recomputed_degrees(tiny_graph):
    aug = edge_dropout(tiny_graph, 0.5, seed=2)
    adj = normalized_adjacency(aug)
    surviving = len(aug.surviving_user_item) + len(aug.surviving_item_concept)
    assert adj.nnz == 2 * surviving


# -- split manifest ---------------------------------------------------------------


def test_split_manifest_round_trip(tmp_path, tiny_graph):
    split = split_holdout(tiny_graph, 0.2, 0.2, seed=4)
    path = tmp_path / "split.tsv"
    write_split_manifest(path, split)
    loaded = read_split_manifest(path, tiny_graph)
    assert np.array_equal(loaded.train_idx, split.train_idx)
    assert np.array_equal(loaded.val_idx, split.val_idx)
    assert np.array_equal(loaded.test_idx, split.test_idx)


def test_split_manifest_byte_identical(tmp_path, tiny_graph):
    split = split_holdout(tiny_graph, 0.2, 0.2, seed=4)
    p1, p2 = tmp_path / "a.tsv", tmp_path / "b.tsv"
    write_split_manifest(p1, split)
    write_split_manifest(p2, split_holdout(tiny_graph, 0.2, 0.2, seed=4))
    assert p1.read_bytes() == p2.read_bytes()


def test_split_manifest_rejects_foreign_pairs(tmp_path, tiny_graph):
    path = tmp_path / "split.tsv"
    path.write_text("nobody\tnothing\ttrain\n")
    with pytest.raises(ParseError):
        read_split_manifest(path, tiny_graph)
