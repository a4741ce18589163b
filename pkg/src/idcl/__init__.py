"""Intent-disentangled graph contrastive recommender (IDCL).

A tripartite user-item-concept graph encoder with per-intent behavior
disentangling, intent-wise contrastive learning, and a coding-rate-reduction
regularizer, plus the experiment surface to train, evaluate, and analyze it.
"""

__version__ = "0.1.0"
