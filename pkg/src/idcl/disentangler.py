"""Concept-derived semantic bases and per-intent behavior projection.

Concept embeddings are softly clustered into K bases; each behavior is then
projected into K intent slices of width d/K by separate heads, one per
intent, conditioned on that intent's basis.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import nn

from .config import ConfigError


class DisentangledBehavior(NamedTuple):
    slices: torch.Tensor  # (batch, K, d/K)
    concat: torch.Tensor  # (batch, d), slice k at columns [k*dd, (k+1)*dd)


def concept_assignment(z_concept: torch.Tensor, w1: torch.Tensor) -> torch.Tensor:
    """Row-stochastic soft assignment of each concept to the K intents."""
    if z_concept.dim() != 2 or w1.dim() != 2 or z_concept.shape[1] != w1.shape[0]:
        raise ValueError(
            f"incompatible shapes {tuple(z_concept.shape)} x {tuple(w1.shape)}"
        )
    return torch.softmax(z_concept @ w1, dim=1)


def aggregate_concepts(
    assignment: torch.Tensor, z_concept: torch.Tensor, *, column_normalize: bool = False
) -> torch.Tensor:
    """Assignment-weighted concept sums, one d-vector per intent."""
    if assignment.shape[0] != z_concept.shape[0]:
        raise ValueError(
            f"{assignment.shape[0]} assignment rows vs {z_concept.shape[0]} concepts"
        )
    agg = assignment.T @ z_concept
    if column_normalize:
        mass = assignment.sum(dim=0).clamp_min(1e-12).unsqueeze(1)
        agg = agg / mass
    return agg


def semantic_bases(
    assignment: torch.Tensor,
    z_concept: torch.Tensor,
    projection,
    *,
    column_normalize: bool = False,
) -> torch.Tensor:
    """Project the aggregated cluster embeddings into K basis vectors."""
    return projection(aggregate_concepts(assignment, z_concept, column_normalize=column_normalize))


def disentangle_behavior(z_behavior: torch.Tensor, bases: torch.Tensor, heads) -> DisentangledBehavior:
    """Apply head k to (behavior || basis_k) for every intent k."""
    num_intents, delta_d = bases.shape
    if len(heads) != num_intents:
        raise ConfigError(f"{len(heads)} heads for {num_intents} bases")
    batch = z_behavior.shape[0]
    slices = []
    for k, head in enumerate(heads):
        basis = bases[k].unsqueeze(0).expand(batch, delta_d)
        slices.append(head(torch.cat([z_behavior, basis], dim=1)))
    stacked = torch.stack(slices, dim=1)
    return DisentangledBehavior(slices=stacked, concat=stacked.reshape(batch, -1))


def _init_affine(linear: nn.Linear, generator) -> None:
    # uniform fan-in scaling, same bound for weight and bias
    bound = 1.0 / math.sqrt(linear.in_features)
    with torch.no_grad():
        linear.weight.uniform_(-bound, bound, generator=generator)
        linear.bias.uniform_(-bound, bound, generator=generator)


class ProjectionHead(nn.Module):
    """Affine map squashed by tanh; optional extra hidden layer."""

    def __init__(self, in_dim: int, out_dim: int, *, two_layer: bool = False,
                 generator: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        layers = []
        if two_layer:
            layers.append(nn.Linear(in_dim, in_dim, dtype=dtype))
        layers.append(nn.Linear(in_dim, out_dim, dtype=dtype))
        for lin in layers:
            _init_affine(lin, generator)
        self.layers = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for lin in self.layers:
            x = torch.tanh(lin(x))
        return x


class Disentangler(nn.Module):
    """Holds the assignment matrix parameter and all projection heads."""

    def __init__(self, dim: int, num_intents: int, *, two_layer_heads: bool = False,
                 column_normalize: bool = False,
                 generator: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        if dim % num_intents != 0:
            raise ConfigError(f"d={dim} is not divisible by K={num_intents}")
        delta_d = dim // num_intents
        self.num_intents = num_intents
        self.delta_d = delta_d
        self.column_normalize = column_normalize
        w1 = torch.empty(dim, num_intents, dtype=dtype)
        bound = 1.0 / math.sqrt(dim)
        with torch.no_grad():
            w1.uniform_(-bound, bound, generator=generator)
        self.W1 = nn.Parameter(w1)
        self.gs = ProjectionHead(dim, delta_d, two_layer=two_layer_heads,
                                 generator=generator, dtype=dtype)
        self.gb = nn.ModuleList(
            ProjectionHead(dim + delta_d, delta_d, two_layer=two_layer_heads,
                           generator=generator, dtype=dtype)
            for _ in range(num_intents)
        )

    def bases(self, z_concept: torch.Tensor):
        """Return (assignment, bases) for the given concept embeddings."""
        assignment = concept_assignment(z_concept, self.W1)
        return assignment, semantic_bases(
            assignment, z_concept, self.gs, column_normalize=self.column_normalize
        )

    def slices(self, z_behavior: torch.Tensor, bases: torch.Tensor) -> DisentangledBehavior:
        return disentangle_behavior(z_behavior, bases, self.gb)
