"""
Mini-batch SGD over mined triplets.

Each epoch shuffles the training records into batches, embeds every batch
fresh, mines triplets inside it and takes one plain SGD step on the mean
triplet loss. Gradients reach the encoder through all three embeddings of
every triplet.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np
import pandas as pd

from .encoder import backward, embed, forward
from .errors import ConfigError, MiningError, PairConstructionError, SingleClassError, TrainingError
from .evaluation import RandomNegatives, auroc, build_pairs, count_eligible_pairs, score_pairs
from .metric import DEFAULT_MARGIN, MiningStrategy, mine_triplets, triplet_embedding_grads, triplet_losses
from .storage import atomic_output

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimisation settings

    Attributes:
    - alpha: triplet margin
    - learning_rate: initial SGD step size (0 makes training a no-op)
    - batch_size: records per mini-batch
    - epochs: passes over the training records
    - triplets_per_batch: triplets mined in each batch
    - mining: negative selection strategy
    - seed: shuffling and mining seed
    - lr_decay: learning-rate factor applied after every epoch
    - val_pairs: cap on validation pairs per label for the AUROC column
    - val_triplets: random triplets for the validation loss column
    """
    alpha: float = DEFAULT_MARGIN
    learning_rate: float = 0.05
    batch_size: int = 64
    epochs: int = 20
    triplets_per_batch: int = 64
    mining: MiningStrategy = MiningStrategy.SEMI_HARD
    seed: int = 0
    lr_decay: float = 1.0
    val_pairs: int = 200
    val_triplets: int = 200

    def __post_init__(self):
        try:
            object.__setattr__(self, 'mining', MiningStrategy(self.mining))
        except ValueError as e:
            raise ConfigError(f"train.mining must be one of {[m.value for m in MiningStrategy]}") from e

    def validate(self):
        if not self.alpha >= 0:
            raise ConfigError(f"train.alpha must be >= 0, got {self.alpha}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"train.learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ConfigError(f"train.batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.triplets_per_batch <= 0 or self.val_pairs <= 0 or self.val_triplets <= 0:
            raise ConfigError("train.triplets_per_batch, val_pairs and val_triplets must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"train.lr_decay must lie in (0, 1], got {self.lr_decay}")
        return self


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_auroc: List[float] = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def to_frame(self):
        return pd.DataFrame({
            'epoch': np.arange(1, len(self) + 1),
            'train_loss': self.train_loss,
            'val_loss': self.val_loss,
            'val_auroc': self.val_auroc,
        })

    def save_csv(self, path):
        with atomic_output(path) as handle:
            self.to_frame().to_csv(handle, index=False, lineterminator='\n')


def batch_gradients(params, embeddings, trace, triplets, alpha):
    """
    Mean triplet loss of one batch and its parameter gradients

    Args:
        params (EncoderParams): Encoder that produced ``embeddings``
        embeddings (np.ndarray): batch embeddings from ``forward``
        trace (ForwardTrace): trace of the same forward call
        triplets (list): Triplet indices into the batch rows
        alpha (float): margin

    Returns:
        tuple: (mean loss, ParamGrads)
    """
    losses = triplet_losses(embeddings, triplets, alpha)
    grad_embeddings = triplet_embedding_grads(embeddings, triplets, alpha) / len(triplets)
    grads, _ = backward(params, trace, grad_embeddings)
    return float(np.mean(losses)), grads


def sgd_step(params, features, triplets, alpha, learning_rate):
    """One update theta <- theta - lr * mean-triplet-loss gradient."""
    embeddings, trace = forward(params, features)
    loss, grads = batch_gradients(params, embeddings, trace, triplets, alpha)
    return params.apply_gradients(grads, learning_rate), loss


def _minable(labels):
    """At least two identities and one repeated identity."""
    distinct = set(labels)
    return len(distinct) >= 2 and len(distinct) < len(labels)


def evaluate_mean_loss(params, dataset, alpha, seed, count):
    """Mean triplet loss over ``count`` randomly mined triplets of ``dataset``."""
    embeddings = embed(params, dataset.features)
    triplets = mine_triplets(embeddings, dataset.patient_ids, MiningStrategy.RANDOM, count, seed, alpha)
    return float(np.mean(triplet_losses(embeddings, triplets, alpha)))


def _validation_auroc(params, dataset, max_pairs, seed):
    setting = RandomNegatives()
    available_pos, available_neg = count_eligible_pairs(dataset, setting)
    pairs = build_pairs(dataset, setting, min(max_pairs, available_pos), min(max_pairs, available_neg), seed)
    return auroc(score_pairs(params, dataset, pairs))


def train(config, params, train_set, val_set=None):
    """
    Train the encoder on triplets mined from patient identities

    Args:
        config (TrainConfig): Optimisation settings
        params (EncoderParams): Initial parameters (not modified)
        train_set (DataSet): >= 2 patients, at least one with >= 2 records
        val_set (DataSet, optional): Patient-disjoint validation records

    Returns:
        tuple: (trained EncoderParams, TrainHistory)
    """
    config.validate()
    labels = train_set.patient_ids
    if not _minable(labels):
        raise TrainingError("training set needs >= 2 patients and at least one patient with >= 2 records")
    if val_set is not None:
        overlap = set(labels) & set(val_set.patient_ids)
        if overlap:
            raise TrainingError(f"validation set shares {len(overlap)} patients with the training set")
    if train_set.ambient_dim != params.config.input_dim:
        raise TrainingError(
            f"encoder input_dim {params.config.input_dim} does not match dataset ambient_dim {train_set.ambient_dim}"
        )

    features = train_set.features
    shuffle_rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    learning_rate = config.learning_rate

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_set))
        epoch_losses = []
        for batch, start in enumerate(range(0, len(order), config.batch_size)):
            rows = order[start:start + config.batch_size]
            batch_labels = [labels[i] for i in rows]
            if not _minable(batch_labels):
                logger.debug(f"epoch {epoch + 1} batch {batch + 1}: no anchor-positive pair, skipped")
                continue
            embeddings, trace = forward(params, features[rows])
            triplets = mine_triplets(
                embeddings, batch_labels, config.mining, config.triplets_per_batch,
                seed=[config.seed, epoch, batch], alpha=config.alpha,
            )
            loss, grads = batch_gradients(params, embeddings, trace, triplets, config.alpha)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch + 1}, batch {batch + 1}",
                                    epoch=epoch + 1, batch=batch + 1)
            params = params.apply_gradients(grads, learning_rate)
            epoch_losses.append(loss)

        if not epoch_losses:
            raise TrainingError(
                f"epoch {epoch + 1}: no batch contained an anchor-positive pair; increase train.batch_size",
                epoch=epoch + 1,
            )
        history.train_loss.append(float(np.mean(epoch_losses)))

        val_loss = val_auc = float('nan')
        if val_set is not None:
            try:
                val_loss = evaluate_mean_loss(params, val_set, config.alpha, config.seed, config.val_triplets)
                val_auc = _validation_auroc(params, val_set, config.val_pairs, config.seed)
            except (MiningError, PairConstructionError, SingleClassError) as e:
                logger.warning(f"Validation metrics unavailable at epoch {epoch + 1}: {str(e)}")
        history.val_loss.append(val_loss)
        history.val_auroc.append(val_auc)
        logger.info(
            f"epoch {epoch + 1}/{config.epochs}: train_loss={history.train_loss[-1]:.5f} "
            f"val_loss={val_loss:.5f} val_auroc={val_auc:.4f} lr={learning_rate:.5g}"
        )
        learning_rate *= config.lr_decay

    return params, history
