"""Joint model: node embeddings, propagation, and optional disentangling.

The ``lightgcn`` variant carries only the embedding table; every other
variant adds the disentangler (whose losses the variant may disable via
its loss weights).
"""

from __future__ import annotations

import torch
from torch import nn

from .config import ConfigError, TrainConfig, VARIANTS
from .disentangler import Disentangler
from .encoder import NodeEmbedding, propagate, readout


class IntentModel(nn.Module):
    def __init__(
        self,
        num_users: int,
        num_items: int,
        num_concepts: int,
        config: TrainConfig,
        *,
        variant: str = "idcl",
        dtype=torch.float32,
        seed: int | None = None,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.num_users = num_users
        self.num_items = num_items
        self.num_concepts = num_concepts
        self.dim = config.d
        self.num_intents = config.k
        self.layers = config.layers
        self.tau = config.tau
        self.variant = variant
        generator = torch.Generator()
        generator.manual_seed(config.seed if seed is None else seed)
        total = num_users + num_items + num_concepts
        self.emb = NodeEmbedding(total, config.d, generator=generator, dtype=dtype)
        if variant == "lightgcn":
            self.dis = None
        else:
            self.dis = Disentangler(
                config.d,
                config.k,
                two_layer_heads=config.two_layer_heads,
                column_normalize=config.column_normalize_bases,
                generator=generator,
                dtype=dtype,
            )

    @property
    def has_disentangler(self) -> bool:
        return self.dis is not None

    def encode(self, adjacency: torch.Tensor) -> torch.Tensor:
        """Propagate layer-0 embeddings and average all layers."""
        return readout(propagate(adjacency, self.emb.layer0, self.layers))

    def split_nodes(self, embeddings: torch.Tensor):
        """Slice a joint (N+M+R, d) matrix into user/item/concept blocks."""
        n, m = self.num_users, self.num_items
        return embeddings[:n], embeddings[n : n + m], embeddings[n + m :]
