"""Inner-product preference scores and the pairwise ranking loss."""

from __future__ import annotations

import torch
import torch.nn.functional as F


def predict_scores(z_user: torch.Tensor, z_item: torch.Tensor) -> torch.Tensor:
    """Paired inner products; (batch,) for matching 2-D inputs, scalar for vectors."""
    if z_user.shape != z_item.shape:
        raise ValueError(
            f"user and item embeddings differ in shape: {tuple(z_user.shape)} vs {tuple(z_item.shape)}"
        )
    return (z_user * z_item).sum(dim=-1)


def score_matrix(z_users: torch.Tensor, z_items: torch.Tensor) -> torch.Tensor:
    """Dense (users, items) score grid for ranking evaluation."""
    if z_users.shape[-1] != z_items.shape[-1]:
        raise ValueError(
            f"embedding widths differ: {z_users.shape[-1]} vs {z_items.shape[-1]}"
        )
    return z_users @ z_items.T


def bpr_loss(pos_scores: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    """Mean -log sigmoid(pos - neg), in the numerically stable softplus form."""
    if pos_scores.shape != neg_scores.shape:
        raise ValueError(
            f"score vectors differ in shape: {tuple(pos_scores.shape)} vs {tuple(neg_scores.shape)}"
        )
    return F.softplus(neg_scores - pos_scores).mean()
