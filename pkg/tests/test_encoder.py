import numpy as np
import pytest
import torch

from idcl.data import build_graph, edge_dropout, normalized_adjacency
from idcl.encoder import adjacency_tensor, behavior_embedding, propagate, readout

from conftest import make_graph, make_model
from oracles import gradient_relative_error, naive_mean

torch.manual_seed(0)


def _adj64(graph_or_aug):
    return adjacency_tensor(normalized_adjacency(graph_or_aug), torch.float64)


def test_propagate_single_edge_swaps_embeddings():
    graph = build_graph([("u0", "i0")], [])
    adj = _adj64(graph)
    layer0 = torch.tensor([[1.0, 2.0], [3.0, -1.0]], dtype=torch.float64)
    layers = propagate(adj, layer0, 1)
    torch.testing.assert_close(layers[1][0], layer0[1])  # z_u^(1) = z_i^(0)
    torch.testing.assert_close(layers[1][1], layer0[0])


def test_propagate_zero_adjacency_zeroes_later_layers():
    adj = torch.zeros((3, 3), dtype=torch.float64)
    layer0 = torch.randn(3, 4, dtype=torch.float64)
    layers = propagate(adj, layer0, 3)
    torch.testing.assert_close(layers[0], layer0)
    for layer in layers[1:]:
        assert torch.count_nonzero(layer) == 0


def test_propagate_components_are_independent():
    # two disjoint user-item pairs; perturbing one component's rows leaves
    # the other component's propagated embeddings untouched
    graph = build_graph([("u0", "i0"), ("u1", "i1")], [])
    adj = _adj64(graph)
    layer0 = torch.randn(4, 3, dtype=torch.float64)
    base = propagate(adj, layer0, 2)
    perturbed = layer0.clone()
    perturbed[graph.user_index["u1"]] += 5.0
    perturbed[2 + graph.item_index["i1"]] -= 3.0
    other = propagate(adj, perturbed, 2)
    rows = [graph.user_index["u0"], 2 + graph.item_index["i0"]]
    for l in range(3):
        torch.testing.assert_close(base[l][rows], other[l][rows])


def test_propagate_requires_at_least_one_layer(tiny_adjacency):
    with pytest.raises(ValueError):
        propagate(tiny_adjacency, torch.randn(tiny_adjacency.shape[0], 2, dtype=torch.float64), 0)


def test_propagate_shape_mismatch(tiny_adjacency):
    with pytest.raises(ValueError):
        propagate(tiny_adjacency, torch.randn(3, 2, dtype=torch.float64), 1)


def test_propagate_is_linear(tiny_adjacency):
    n = tiny_adjacency.shape[0]
    x = torch.randn(n, 5, dtype=torch.float64)
    y = torch.randn(n, 5, dtype=torch.float64)
    alpha, beta = 0.7, -2.5
    combined = propagate(tiny_adjacency, alpha * x + beta * y, 3)
    from_x = propagate(tiny_adjacency, x, 3)
    from_y = propagate(tiny_adjacency, y, 3)
    for l in range(4):
        torch.testing.assert_close(
            combined[l], alpha * from_x[l] + beta * from_y[l], atol=1e-6, rtol=1e-6
        )


def test_readout_identical_layers_is_identity():
    x = torch.randn(4, 3, dtype=torch.float64)
    torch.testing.assert_close(readout([x, x, x]), x)


def test_readout_mean_of_zero_and_double():
    x = torch.randn(4, 3, dtype=torch.float64)
    torch.testing.assert_close(readout([torch.zeros_like(x), 2 * x]), x)


def test_readout_matches_naive_mean():
    layers = [torch.randn(6, 4, dtype=torch.float64) for _ in range(4)]
    expected = naive_mean([l.numpy() for l in layers])
    np.testing.assert_allclose(readout(layers).numpy(), expected, atol=1e-7)


def test_readout_rejects_empty():
    with pytest.raises(ValueError):
        readout([])


def test_behavior_embedding_identity_and_zero():
    z_i = torch.randn(5, 3, dtype=torch.float64)
    torch.testing.assert_close(behavior_embedding(torch.ones_like(z_i), z_i), z_i)
    assert torch.count_nonzero(behavior_embedding(torch.zeros_like(z_i), z_i)) == 0


def test_behavior_embedding_hand_value():
    out = behavior_embedding(
        torch.tensor([1.0, 2.0], dtype=torch.float64),
        torch.tensor([3.0, -1.0], dtype=torch.float64),
    )
    torch.testing.assert_close(out, torch.tensor([3.0, -2.0], dtype=torch.float64))


def test_behavior_embedding_shape_mismatch():
    with pytest.raises(ValueError):
        behavior_embedding(torch.zeros(2, 3), torch.zeros(2, 4))


def test_readout_gradient_matches_finite_differences():
    graph = make_graph(num_users=4, num_items=5, num_concepts=2, seed=3)
    assert graph.num_nodes <= 20
    adj = _adj64(graph)
    layer0 = torch.randn(graph.num_nodes, 3, dtype=torch.float64, requires_grad=True)
    target = torch.randn(graph.num_nodes, 3, dtype=torch.float64)

    def loss():
        return (readout(propagate(adj, layer0, 2)) * target).sum()

    assert gradient_relative_error(loss, [layer0]) < 1e-4


def test_shared_encoder_uses_one_parameter_table(tiny_graph):
    model = make_model(tiny_graph)
    adj = _adj64(tiny_graph)
    adj_aug = _adj64(edge_dropout(tiny_graph, 0.5, seed=0))
    layer0 = model.emb.layer0
    assert model.emb.layer0 is layer0
    loss = model.encode(adj).sum() + model.encode(adj_aug).sum()
    grad = torch.autograd.grad(loss, layer0)[0]
    # both views contribute gradient to the same table
    assert torch.count_nonzero(grad) > 0
    single = torch.autograd.grad(model.encode(adj).sum(), layer0)[0]
    assert not torch.allclose(grad, single)
