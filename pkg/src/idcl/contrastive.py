"""Intent-wise contrastive objective over paired graph views.

Each behavior carries a confidence distribution over the K intents, scored
by cosine similarity between its intent slice and that intent's semantic
basis. Per intent, an in-batch NT-Xent subtask contrasts original-view
slices against augmented-view slices; the loss is the confidence-weighted
sum of subtask losses (or the exact -log of the confidence-weighted
expectation when requested).
"""

from __future__ import annotations

import torch

NORM_FLOOR = 1e-12


def _unit(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(NORM_FLOOR)


def intent_confidence(slices: torch.Tensor, bases: torch.Tensor, tau: float) -> torch.Tensor:
    """Row-stochastic (batch, K) confidences from slice/basis cosines.

    Zero-norm slices or bases are guarded by a norm floor instead of raising.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if slices.dim() != 3 or bases.dim() != 2 or slices.shape[1:] != bases.shape:
        raise ValueError(
            f"slices {tuple(slices.shape)} do not match bases {tuple(bases.shape)}"
        )
    cosine = (_unit(slices) * _unit(bases).unsqueeze(0)).sum(dim=-1)
    return torch.softmax(cosine / tau, dim=1)


def subtask_logprob(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    tau: float,
    *,
    include_positive: bool = True,
) -> torch.Tensor:
    """Per-behavior log-probability of its augmented positive within the batch.

    Similarities are cosines over one intent's slices divided by ``tau``;
    the positive pair sits on the diagonal. ``include_positive=False`` drops
    the positive from the denominator.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if anchors.shape != positives.shape or anchors.dim() != 2:
        raise ValueError(
            f"anchors {tuple(anchors.shape)} vs positives {tuple(positives.shape)}"
        )
    batch = anchors.shape[0]
    if batch < 2:
        raise ValueError("contrastive subtask needs a batch of >= 2 behaviors")
    sim = (_unit(anchors) @ _unit(positives).T) / tau
    diagonal = sim.diagonal()
    if include_positive:
        return diagonal - torch.logsumexp(sim, dim=1)
    masked = sim.masked_fill(torch.eye(batch, dtype=torch.bool, device=sim.device), float("-inf"))
    return diagonal - torch.logsumexp(masked, dim=1)


def intent_subtask_logprobs(
    slices: torch.Tensor,
    positive_slices: torch.Tensor,
    tau: float,
    *,
    include_positive: bool = True,
) -> torch.Tensor:
    """Stack subtask log-probabilities for all K intents into (batch, K)."""
    if slices.shape != positive_slices.shape or slices.dim() != 3:
        raise ValueError(
            f"slices {tuple(slices.shape)} vs positives {tuple(positive_slices.shape)}"
        )
    cols = [
        subtask_logprob(slices[:, k, :], positive_slices[:, k, :], tau,
                        include_positive=include_positive)
        for k in range(slices.shape[1])
    ]
    return torch.stack(cols, dim=1)


def icl_loss(
    confidence: torch.Tensor,
    subtask_logprobs: torch.Tensor,
    *,
    exact_log_expectation: bool = False,
) -> torch.Tensor:
    """Batch-mean contrastive loss.

    Default form is the confidence-weighted sum of subtask negative
    log-probabilities (an upper bound on the exact objective); the exact
    form is ``-log sum_k p(k|e) * p(e'|e,k)`` per behavior.
    """
    if confidence.shape != subtask_logprobs.shape or confidence.dim() != 2:
        raise ValueError(
            f"confidence {tuple(confidence.shape)} vs logprobs {tuple(subtask_logprobs.shape)}"
        )
    if exact_log_expectation:
        per_behavior = -torch.logsumexp(
            confidence.clamp_min(NORM_FLOOR).log() + subtask_logprobs, dim=1
        )
    else:
        per_behavior = -(confidence * subtask_logprobs).sum(dim=1)
    return per_behavior.mean()
