"""Parameter-free graph propagation over the joint user/item/concept nodes.

Propagation is a plain sparse multiply by the symmetric-normalized adjacency
(no self-loops, no feature transform, no nonlinearity); the readout averages
all layers including layer 0.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn


def adjacency_tensor(adjacency, dtype=torch.float32) -> torch.Tensor:
    """Convert a scipy sparse adjacency to a coalesced torch COO tensor."""
    coo = adjacency.tocoo()
    indices = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
    values = torch.from_numpy(coo.data).to(dtype)
    return torch.sparse_coo_tensor(
        indices, values, size=coo.shape, check_invariants=False
    ).coalesce()


def propagate(adjacency: torch.Tensor, layer0: torch.Tensor, num_layers: int):
    """Return the [layer0, A @ layer0, ..., A^L @ layer0] stack."""
    if num_layers < 1:
        raise ValueError(f"num_layers must be >= 1, got {num_layers}")
    if adjacency.shape[1] != layer0.shape[0]:
        raise ValueError(
            f"adjacency is {tuple(adjacency.shape)} but embeddings have {layer0.shape[0]} rows"
        )
    layers = [layer0]
    x = layer0
    for _ in range(num_layers):
        x = torch.sparse.mm(adjacency, x) if adjacency.is_sparse else adjacency @ x
        layers.append(x)
    return layers


def readout(layers) -> torch.Tensor:
    """Elementwise mean over all propagation layers."""
    if len(layers) == 0:
        raise ValueError("empty layer list")
    return torch.stack(tuple(layers), dim=0).mean(dim=0)


def behavior_embedding(z_user: torch.Tensor, z_item: torch.Tensor) -> torch.Tensor:
    """Entangled behavior vector: elementwise product of user and item."""
    if z_user.shape != z_item.shape:
        raise ValueError(
            f"user and item embeddings differ in shape: {tuple(z_user.shape)} vs {tuple(z_item.shape)}"
        )
    return z_user * z_item


class NodeEmbedding(nn.Module):
    """Learnable layer-0 table for the stacked user/item/concept nodes."""

    def __init__(self, num_nodes: int, dim: int, *, init_std: float = 0.1,
                 generator: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        weight = torch.empty(num_nodes, dim, dtype=dtype)
        with torch.no_grad():
            weight.normal_(0.0, init_std, generator=generator)
        self.layer0 = nn.Parameter(weight)
