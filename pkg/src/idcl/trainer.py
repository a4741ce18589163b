"""Multi-task training loop: paired-view forward, loss assembly, early stop.

Each epoch draws a fresh edge-dropout view of the graph; each step samples a
ranking batch, forwards the original (and, when the contrastive term is
active, the augmented) view, and takes one optimizer step on

    total = bpr + lambda1 * icl + lambda2 * rate_reduction + lambda3 * l2

All randomness is derived from the run seed. Bitwise reproducibility
additionally needs deterministic mode (which pins the thread count):
multithreaded reduction order injects float-level noise that training
dynamics then amplify.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .coding_rate import rate_reduction_loss
from .config import ConfigError, TrainConfig
from .contrastive import icl_loss, intent_confidence, intent_subtask_logprobs
from .data import DatasetSplit, edge_dropout, normalized_adjacency, sample_bpr_batch
from .encoder import adjacency_tensor, behavior_embedding
from .evaluator import evaluate
from .model import IntentModel
from .ranking import bpr_loss, predict_scores

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "bpr", "icl", "dR", "total", "val_recall@20")

# purpose tags for deriving independent random streams from the run seed
_STREAM_DROPOUT = 1
_STREAM_BATCH = 2
_STREAM_SUBSET = 3


class NonFiniteLossError(RuntimeError):
    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component!r} is non-finite ({value})")
        self.component = component


class CheckpointError(ValueError):
    pass


@dataclass
class LossBreakdown:
    """The four loss terms and their weighted total for one step or epoch."""

    bpr: float
    icl: float
    rate_reduction: float
    l2: float
    total: float


def total_loss(bpr, icl, rate_reduction, l2, lambda1, lambda2, lambda3):
    """Weighted multi-task sum; any non-finite component aborts with its name."""
    components = {"bpr": bpr, "icl": icl, "rate_reduction": rate_reduction, "l2": l2}
    for name, value in components.items():
        scalar = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(scalar):
            raise NonFiniteLossError(name, scalar)
    total = bpr + lambda1 * icl + lambda2 * rate_reduction + lambda3 * l2
    return LossBreakdown(bpr=bpr, icl=icl, rate_reduction=rate_reduction, l2=l2, total=total)


def l2_penalty(model) -> torch.Tensor:
    """Squared Euclidean norm of every trainable parameter."""
    total = None
    for param in model.parameters():
        term = param.pow(2).sum()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("model has no trainable parameters")
    return total


def derive_seed(base_seed: int, *key) -> int:
    """Stable per-purpose seed stream derived from the run seed."""
    ss = np.random.SeedSequence([base_seed, *key])
    return int(ss.generate_state(1)[0])


@dataclass
class TrainHistory:
    epochs: list
    best_epoch: int = -1
    best_metric: float = float("-inf")
    aborted: str = ""

    def metric_values(self):
        return [row["val_metric"] for row in self.epochs if row["val_metric"] is not None]


class Trainer:
    def __init__(
        self,
        model: IntentModel,
        split: DatasetSplit,
        config: TrainConfig,
        *,
        log_path=None,
    ):
        self.model = model
        self.split = split
        self.config = config
        self.log_path = log_path
        if config.deterministic:
            torch.set_num_threads(1)
        self.dtype = model.emb.layer0.dtype
        self.adjacency = adjacency_tensor(normalized_adjacency(split.graph), self.dtype)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
        self._needs_icl = config.lambda1 > 0 and model.has_disentangler
        self._needs_cr = config.lambda2 > 0 and model.has_disentangler
        if self._needs_icl and config.batch_size < 2:
            raise ConfigError("contrastive term needs batch_size >= 2")
        self._log_handle = None
        if log_path is not None:
            columns = LOG_COLUMNS[:-1] + (f"val_recall@{config.early_stop_k}",)
            self._log_handle = open(log_path, "w", encoding="utf-8")
            self._log_handle.write(", ".join(columns) + "\n")

    def close(self):
        if self._log_handle is not None:
            self._log_handle.close()
            self._log_handle = None

    # -- one optimization step -------------------------------------------------

    def _zero(self) -> torch.Tensor:
        return torch.zeros((), dtype=self.dtype)

    def _step(self, batch, adj_aug, subset_seed: int) -> LossBreakdown:
        cfg = self.config
        model = self.model
        embeddings = model.encode(self.adjacency)
        z_users, z_items, z_concepts = model.split_nodes(embeddings)
        users = torch.from_numpy(batch.users)
        pos_items = torch.from_numpy(batch.pos_items)
        neg_items = torch.from_numpy(batch.neg_items)
        z_u = z_users[users]
        z_pos = z_items[pos_items]
        bpr = bpr_loss(
            predict_scores(z_u, z_pos), predict_scores(z_u, z_items[neg_items])
        )

        icl = self._zero()
        rate = self._zero()
        if self._needs_icl or self._needs_cr:
            _, bases = model.dis.bases(z_concepts)
            z_e = behavior_embedding(z_u, z_pos)
            dis_out = model.dis.slices(z_e, bases)
            confidence = intent_confidence(dis_out.slices, bases, cfg.tau)
            if self._needs_icl:
                aug_embeddings = model.encode(adj_aug)
                zu_aug, zi_aug, zc_aug = model.split_nodes(aug_embeddings)
                _, bases_aug = model.dis.bases(zc_aug)
                size = min(cfg.icl_batch, len(batch))
                rng = np.random.default_rng(subset_seed)
                subset = torch.from_numpy(
                    rng.choice(len(batch), size=size, replace=False)
                )
                z_e_aug = behavior_embedding(
                    zu_aug[users[subset]], zi_aug[pos_items[subset]]
                )
                dis_aug = model.dis.slices(z_e_aug, bases_aug)
                logprobs = intent_subtask_logprobs(
                    dis_out.slices[subset],
                    dis_aug.slices,
                    cfg.tau,
                    include_positive=not cfg.strict_eq9,
                )
                weights = confidence[subset]
                if cfg.stop_grad_confidence:
                    weights = weights.detach()
                icl = icl_loss(
                    weights, logprobs, exact_log_expectation=cfg.exact_log_expectation
                )
            if self._needs_cr:
                pi = confidence.detach() if cfg.stop_grad_pi else confidence
                rate = rate_reduction_loss(dis_out.concat, pi, cfg.epsilon)

        breakdown = total_loss(
            bpr, icl, rate, l2_penalty(model), cfg.lambda1, cfg.lambda2, cfg.lambda3
        )
        self.optimizer.zero_grad()
        breakdown.total.backward()
        self.optimizer.step()
        return LossBreakdown(
            bpr=float(breakdown.bpr.detach()),
            icl=float(breakdown.icl.detach()),
            rate_reduction=float(breakdown.rate_reduction.detach()),
            l2=float(breakdown.l2.detach()),
            total=float(breakdown.total.detach()),
        )

    # -- epoch and fit loops ---------------------------------------------------

    def train_epoch(self, epoch: int) -> LossBreakdown:
        """One pass over the training behaviors; returns mean loss terms."""
        cfg = self.config
        self.model.train()
        adj_aug = None
        if self._needs_icl:
            aug = edge_dropout(
                self.split.graph, cfg.rho, derive_seed(cfg.seed, _STREAM_DROPOUT, epoch)
            )
            adj_aug = adjacency_tensor(normalized_adjacency(aug), self.dtype)
        steps = max(1, math.ceil(len(self.split.train_idx) / cfg.batch_size))
        sums = np.zeros(5)
        for step in range(steps):
            batch = sample_bpr_batch(
                self.split, cfg.batch_size, derive_seed(cfg.seed, _STREAM_BATCH, epoch, step)
            )
            stats = self._step(
                batch, adj_aug, derive_seed(cfg.seed, _STREAM_SUBSET, epoch, step)
            )
            sums += (stats.bpr, stats.icl, stats.rate_reduction, stats.l2, stats.total)
        means = sums / steps
        return LossBreakdown(*means)

    def validate(self) -> float:
        report = evaluate(
            self.model,
            self.adjacency,
            self.split,
            ks=(self.config.early_stop_k,),
            part="val",
            plain_denominator=self.config.plain_recall_denominator,
        )
        return report.mean[f"recall@{self.config.early_stop_k}"]

    def _log_epoch(self, epoch, stats: LossBreakdown, val_metric):
        if self._log_handle is None:
            return
        val = "" if val_metric is None else f"{val_metric:.6f}"
        self._log_handle.write(
            f"{epoch}, {stats.bpr:.6f}, {stats.icl:.6f}, {stats.rate_reduction:.6f}, "
            f"{stats.total:.6f}, {val}\n"
        )
        self._log_handle.flush()

    def fit(self) -> TrainHistory:
        """Train until validation Recall stalls for ``patience`` evaluations.

        The best-validation parameters are restored before returning; a
        non-finite loss aborts the run with the best state retained.
        """
        cfg = self.config
        if len(self.split.val_idx) == 0:
            raise ConfigError("early stopping needs a nonempty validation split")
        history = TrainHistory(epochs=[])
        best_state = copy.deepcopy(self.model.state_dict())
        bad_evals = 0
        for epoch in range(1, cfg.max_epochs + 1):
            try:
                stats = self.train_epoch(epoch)
            except NonFiniteLossError as err:
                logger.error("aborting at epoch %d: %s", epoch, err)
                history.aborted = str(err)
                break
            val_metric = None
            if epoch % cfg.eval_every == 0:
                val_metric = self.validate()
            history.epochs.append(
                {
                    "epoch": epoch,
                    "bpr": stats.bpr,
                    "icl": stats.icl,
                    "rate_reduction": stats.rate_reduction,
                    "l2": stats.l2,
                    "total": stats.total,
                    "val_metric": val_metric,
                }
            )
            self._log_epoch(epoch, stats, val_metric)
            if val_metric is not None:
                if val_metric > history.best_metric:
                    history.best_metric = val_metric
                    history.best_epoch = epoch
                    best_state = copy.deepcopy(self.model.state_dict())
                    bad_evals = 0
                else:
                    bad_evals += 1
                    if bad_evals >= cfg.patience:
                        break
        self.model.load_state_dict(best_state)
        self.close()
        return history


def fit(model, split, config, *, log_path=None) -> TrainHistory:
    return Trainer(model, split, config, log_path=log_path).fit()


# -- checkpointing ---------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: IntentModel, config: TrainConfig, path, *, dataset_hash: str = "", extra: dict | None = None) -> None:
    """Single-archive checkpoint: metadata block plus named tensors."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "variant": model.variant,
        "num_users": model.num_users,
        "num_items": model.num_items,
        "num_concepts": model.num_concepts,
        "dataset_hash": dataset_hash,
        "config": config.to_flat_dict(),
    }
    if extra:
        meta.update(extra)
    torch.save({"meta": meta, "tensors": model.state_dict()}, path)


def load_checkpoint(
    path,
    *,
    expected_config: TrainConfig | None = None,
    expected_dataset_hash: str | None = None,
):
    """Rebuild the model from a checkpoint; returns (model, meta).

    Refuses to load when the stored sizes disagree with ``expected_config``
    or the stored dataset hash disagrees with ``expected_dataset_hash``.
    """
    payload = torch.load(path, map_location="cpu", weights_only=True)
    meta = payload["meta"]
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')!r}")
    config = TrainConfig.from_flat_dict(meta["config"])
    if expected_config is not None:
        for name in ("d", "k", "layers"):
            have, want = getattr(config, name), getattr(expected_config, name)
            if have != want:
                raise CheckpointError(
                    f"checkpoint has {name}={have} but the requested config says {name}={want}"
                )
    if expected_dataset_hash is not None and meta["dataset_hash"] != expected_dataset_hash:
        raise CheckpointError(
            f"checkpoint was trained on dataset {meta['dataset_hash']!r}, "
            f"not {expected_dataset_hash!r}"
        )
    dtype = payload["tensors"]["emb.layer0"].dtype
    model = IntentModel(
        meta["num_users"],
        meta["num_items"],
        meta["num_concepts"],
        config,
        variant=meta["variant"],
        dtype=dtype,
    )
    model.load_state_dict(payload["tensors"])
    return model, meta
