"""Log-determinant coding-rate regularizer with soft group memberships.

The loss is minus the whole-batch coding rate plus the membership-weighted
sum of per-group coding rates; minimizing it expands the overall feature
volume while compacting each intent group. Log-determinants are always
evaluated in float64 to protect conditioning, then cast back to the input
dtype.
"""

from __future__ import annotations

import logging

import torch

logger = logging.getLogger(__name__)

DEGENERATE_TRACE = 1e-8


def _check_features(z: torch.Tensor, epsilon: float) -> None:
    if z.dim() != 2 or z.shape[0] < 1:
        raise ValueError(f"expected a (batch, dim) matrix, got {tuple(z.shape)}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if not torch.isfinite(z).all():
        raise ValueError("features contain non-finite entries")


def _half_logdet(gram: torch.Tensor) -> torch.Tensor:
    sym = 0.5 * (gram + gram.T)
    chol = torch.linalg.cholesky(sym)
    return torch.log(torch.diagonal(chol)).sum()


def _weighted_rate(z64: torch.Tensor, weights: torch.Tensor, epsilon: float) -> torch.Tensor:
    # (tr/(2F)) * logdet(I + d/(tr eps^2) Z^T diag(w) Z); the full-batch rate
    # is the w = ones special case, so both loss terms share this exact path.
    batch, dim = z64.shape
    trace = weights.sum()
    scale = dim / (trace * epsilon**2)
    eye = torch.eye(dim, dtype=torch.float64, device=z64.device)
    gram = eye + scale * (z64.T @ (z64 * weights.unsqueeze(1)))
    return (trace / (2 * batch)) * (2.0 * _half_logdet(gram))


def coding_rate(z: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Average coding length (nats) of the rows of ``z`` at distortion ``epsilon``."""
    _check_features(z, epsilon)
    z64 = z.to(torch.float64)
    ones = torch.ones(z64.shape[0], dtype=torch.float64, device=z64.device)
    return _weighted_rate(z64, ones, epsilon).to(z.dtype)


def group_compactness(z: torch.Tensor, memberships: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Membership-weighted sum of per-group coding rates (nats).

    ``memberships`` is (batch, K) with rows summing to 1; column k holds the
    diagonal of that group's membership matrix. Groups with vanishing mass
    contribute zero and are logged as degenerate.
    """
    _check_features(z, epsilon)
    if memberships.dim() != 2 or memberships.shape[0] != z.shape[0]:
        raise ValueError(
            f"memberships {tuple(memberships.shape)} do not match features {tuple(z.shape)}"
        )
    if not torch.isfinite(memberships).all():
        raise ValueError("memberships contain non-finite entries")
    z64 = z.to(torch.float64)
    pi64 = memberships.to(torch.float64)
    total = torch.zeros((), dtype=torch.float64, device=z64.device)
    for k in range(pi64.shape[1]):
        trace = float(pi64[:, k].detach().sum())
        if trace < DEGENERATE_TRACE:
            logger.warning("intent group %d has vanishing mass (tr=%.3e); skipped", k, trace)
            continue
        total = total + _weighted_rate(z64, pi64[:, k], epsilon)
    return total.to(z.dtype)


def rate_reduction_loss(z: torch.Tensor, memberships: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Negative rate reduction: group compactness minus the whole-batch rate.

    The subtraction happens in float64 before the cast back; near-uniform
    memberships make the difference orders of magnitude smaller than either
    term, and a low-precision subtraction would flush it to zero.
    """
    z64 = z.to(torch.float64)
    pi64 = memberships.to(torch.float64)
    value = -coding_rate(z64, epsilon) + group_compactness(z64, pi64, epsilon)
    return value.to(z.dtype)
