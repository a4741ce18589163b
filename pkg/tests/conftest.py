import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from idcl.config import TrainConfig
from idcl.data import build_graph, normalized_adjacency, split_holdout
from idcl.encoder import adjacency_tensor
from idcl.model import IntentModel


def make_graph(num_users=4, num_items=5, num_concepts=2, seed=0, density=0.6):
    """Small random tripartite graph; every concept covers some items."""
    rng = np.random.default_rng(seed)
    pairs = []
    for u in range(num_users):
        items = rng.choice(num_items, size=max(2, int(density * num_items)), replace=False)
        pairs.extend((f"u{u}", f"i{i}") for i in sorted(items))
    memberships = [(f"i{i}", f"c{i % num_concepts}") for i in range(num_items)]
    return build_graph(pairs, memberships)


@pytest.fixture
def tiny_graph():
    return make_graph()


@pytest.fixture
def tiny_split(tiny_graph):
    return split_holdout(tiny_graph, val_frac=0.2, test_frac=0.2, seed=1)


def tiny_config(**overrides):
    defaults = dict(
        d=8, k=2, layers=2, tau=0.5, epsilon=0.5, rho=0.2,
        lambda1=0.1, lambda2=0.01, lambda3=1e-5,
        lr=0.01, batch_size=8, max_epochs=3, patience=2,
        icl_batch=8, eval_every=1, early_stop_k=3, seed=0,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


def make_model(graph, config=None, variant="idcl", dtype=torch.float64, seed=0):
    config = config or tiny_config()
    return IntentModel(
        graph.num_users, graph.num_items, graph.num_concepts, config,
        variant=variant, dtype=dtype, seed=seed,
    )


@pytest.fixture
def tiny_model(tiny_graph):
    return make_model(tiny_graph)


@pytest.fixture
def tiny_adjacency(tiny_graph):
    return adjacency_tensor(normalized_adjacency(tiny_graph), torch.float64)


def write_interactions(path, rows):
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write("\t".join(str(x) for x in row) + "\n")
