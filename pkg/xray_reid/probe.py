"""
Linear probing of frozen embeddings.

A single softmax layer is trained per attribute on embeddings of a frozen
encoder, then scored on patient-disjoint held-out records against the
majority-class baseline. The same classifier trained on raw features doubles
as the attribute-classifier baseline for verification.
"""

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from .encoder import EncoderConfig, EncoderParams, embed, identity_params
from .errors import ConfigError, DimensionMismatchError, ProbeError
from .evaluation import rank_auc
from .models import NUMERIC

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeConfig:
    """
    Probe task and optimiser

    Attributes:
    - task_attribute: attribute to predict
    - bucket_boundaries: class edges for numeric attributes (strictly increasing)
    - learning_rate / epochs: full-batch gradient descent schedule
    - seed: initialisation seed
    - l2_penalty: weight on ||W||^2
    - holdout_fraction: patients held out when no test manifest is given
    """
    task_attribute: str
    bucket_boundaries: Optional[Tuple[float, ...]] = None
    learning_rate: float = 0.5
    epochs: int = 500
    seed: int = 0
    l2_penalty: float = 1e-4
    holdout_fraction: float = 0.3

    def __post_init__(self):
        if self.bucket_boundaries is not None:
            object.__setattr__(self, 'bucket_boundaries', tuple(float(b) for b in self.bucket_boundaries))

    def validate(self):
        if self.bucket_boundaries is not None:
            edges = self.bucket_boundaries
            if not edges or any(b >= a for b, a in zip(edges, edges[1:])):
                raise ConfigError(f"probe.bucket_boundaries must be strictly increasing, got {list(edges)}")
        if not self.learning_rate > 0 or self.epochs < 0 or not self.l2_penalty >= 0:
            raise ConfigError("probe.learning_rate must be > 0, epochs >= 0 and l2_penalty >= 0")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError(f"probe.holdout_fraction must lie in (0, 1), got {self.holdout_fraction}")
        return self


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    embeddings: np.ndarray
    labels: Tuple


def extract_embeddings(params, dataset, attribute):
    """
    Embed every record with a frozen encoder

    Returns:
        EmbeddingTable: rows in record order, labels from ``attribute``
    """
    if dataset.ambient_dim != params.config.input_dim:
        raise DimensionMismatchError(
            f"dataset ambient_dim {dataset.ambient_dim} does not match encoder input_dim {params.config.input_dim}"
        )
    labels = tuple(dataset.labels(attribute))
    return EmbeddingTable(embeddings=embed(params, dataset.features), labels=labels)


def bucket_label(value, boundaries):
    k = int(np.searchsorted(boundaries, value, side='right'))
    if k == 0:
        return f'<{boundaries[0]!r}'
    if k == len(boundaries):
        return f'>={boundaries[-1]!r}'
    return f'[{boundaries[k - 1]!r},{boundaries[k]!r})'


def class_labels(values, schema, boundaries=None):
    """Map raw attribute values to class labels (numeric values are bucketed)."""
    if schema.kind == NUMERIC:
        if boundaries is None:
            raise ProbeError("numeric attribute needs probe.bucket_boundaries")
        return [bucket_label(float(v), boundaries) for v in values]
    return [str(v) for v in values]


@dataclass(frozen=True, eq=False)
class LinearProbe:
    """Softmax layer: weights (classes x d), biases (classes), class labels."""
    weights: np.ndarray
    biases: np.ndarray
    classes: Tuple[str, ...]

    def __post_init__(self):
        if self.weights.shape[0] != len(self.classes) or self.biases.shape != (len(self.classes),):
            raise DimensionMismatchError(
                f"probe weights {self.weights.shape} / biases {self.biases.shape} do not match {len(self.classes)} classes"
            )

    def logits(self, embeddings):
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.ndim != 2 or embeddings.shape[1] != self.weights.shape[1]:
            raise DimensionMismatchError(
                f"probe expects embeddings of width {self.weights.shape[1]}, got shape {embeddings.shape}"
            )
        return embeddings @ self.weights.T + self.biases

    def probabilities(self, embeddings):
        return softmax(self.logits(embeddings), axis=1)

    def predict(self, embeddings):
        return [self.classes[k] for k in np.argmax(self.logits(embeddings), axis=1)]


def _one_hot(labels, classes):
    index = {c: k for k, c in enumerate(classes)}
    targets = np.zeros((len(labels), len(classes)))
    targets[np.arange(len(labels)), [index[str(l)] for l in labels]] = 1.0
    return targets


def probe_loss_and_grad(weights, biases, embeddings, targets, l2_penalty):
    """
    Mean cross-entropy + l2_penalty * ||W||^2 and its gradients

    Returns:
        tuple: (loss, grad_weights, grad_biases)
    """
    logits = embeddings @ weights.T + biases
    log_probs = log_softmax(logits, axis=1)
    n = embeddings.shape[0]
    loss = -np.sum(targets * log_probs) / n + l2_penalty * np.sum(weights ** 2)
    residual = (np.exp(log_probs) - targets) / n
    return float(loss), residual.T @ embeddings + 2.0 * l2_penalty * weights, residual.sum(axis=0)


def train_probe(embeddings, labels, config):
    """
    Multinomial logistic regression by full-batch gradient descent

    The L2 term is applied as an implicit (proximal) step, which keeps large
    penalties stable and shrinks W toward zero.

    Args:
        embeddings (np.ndarray): n x d frozen embeddings
        labels (Sequence): class label per row
        config (ProbeConfig): schedule and penalty

    Returns:
        LinearProbe: trained layer
    """
    config.validate()
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = [str(l) for l in labels]
    if embeddings.ndim != 2 or embeddings.shape[0] != len(labels):
        raise DimensionMismatchError(f"embeddings shape {embeddings.shape} does not match {len(labels)} labels")
    classes = tuple(sorted(set(labels)))
    if len(classes) < 2:
        raise ProbeError(f"probe needs at least two classes, got {list(classes)}")

    rng = np.random.default_rng(config.seed)
    weights = rng.standard_normal((len(classes), embeddings.shape[1])) * 0.01
    biases = np.zeros(len(classes))
    targets = _one_hot(labels, classes)
    shrink = 1.0 + 2.0 * config.learning_rate * config.l2_penalty

    loss = float('nan')
    for epoch in range(config.epochs):
        loss, grad_w, grad_b = probe_loss_and_grad(weights, biases, embeddings, targets, config.l2_penalty)
        if not np.isfinite(loss):
            raise ProbeError(f"non-finite probe loss at epoch {epoch + 1}")
        grad_w_data = grad_w - 2.0 * config.l2_penalty * weights
        weights = (weights - config.learning_rate * grad_w_data) / shrink
        biases = biases - config.learning_rate * grad_b
    logger.debug(f"Probe for '{config.task_attribute}' trained, final loss {loss:.5f}")
    return LinearProbe(weights=weights, biases=biases, classes=classes)


@dataclass
class ProbeReport:
    task: str
    task_kind: str
    accuracy: float
    majority_baseline: float
    per_class_auroc: Dict[str, float]
    n_train: int = 0
    n_test: int = 0

    def to_dict(self):
        return {
            'task': self.task,
            'task_kind': self.task_kind,
            'accuracy': self.accuracy,
            'majority_baseline': self.majority_baseline,
            'per_class_auroc': dict(self.per_class_auroc),
            'n_train': self.n_train,
            'n_test': self.n_test,
        }


def majority_baseline(labels):
    counts = Counter(str(l) for l in labels)
    return max(counts.values()) / len(labels)


def probe_metrics(probe, embeddings, labels, task=''):
    """Accuracy, one-vs-rest AUROC per class and the majority-class baseline."""
    labels = [str(l) for l in labels]
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] != len(labels):
        raise DimensionMismatchError(f"embeddings shape {embeddings.shape} does not match {len(labels)} labels")
    probabilities = probe.probabilities(embeddings)
    predicted = [probe.classes[k] for k in np.argmax(probabilities, axis=1)]
    truth = np.asarray(labels)
    per_class = {}
    for k, name in enumerate(probe.classes):
        positive = truth == name
        if positive.any() and not positive.all():
            per_class[name] = rank_auc(probabilities[:, k], positive, lower_is_positive=False)
    return ProbeReport(
        task=task,
        task_kind='binary' if len(probe.classes) == 2 else 'multiclass',
        accuracy=float(np.mean(np.asarray(predicted) == truth)),
        majority_baseline=majority_baseline(labels),
        per_class_auroc=per_class,
        n_test=len(labels),
    )


def run_probe(params, train_set, test_set, config):
    """
    Train on ``train_set`` embeddings and report on patient-disjoint ``test_set``.

    The encoder digest is checked before and after; any change is an error.
    """
    config.validate()
    schema = train_set.require_attribute(config.task_attribute)
    test_set.require_attribute(config.task_attribute)
    overlap = set(train_set.patient_ids) & set(test_set.patient_ids)
    if overlap:
        raise ProbeError(f"probe train and test sets share {len(overlap)} patients")
    digest = params.digest()

    train_table = extract_embeddings(params, train_set, config.task_attribute)
    test_table = extract_embeddings(params, test_set, config.task_attribute)
    train_labels = class_labels(train_table.labels, schema, config.bucket_boundaries)
    test_labels = class_labels(test_table.labels, schema, config.bucket_boundaries)
    probe = train_probe(train_table.embeddings, train_labels, config)
    report = probe_metrics(probe, test_table.embeddings, test_labels, task=config.task_attribute)
    report.n_train = len(train_labels)

    if params.digest() != digest:
        raise ProbeError("encoder parameters changed during probing")
    logger.info(
        f"Probe '{config.task_attribute}': accuracy={report.accuracy:.4f} "
        f"majority_baseline={report.majority_baseline:.4f}"
    )
    return report


def attribute_baseline_encoder(dataset, attribute, config):
    """
    Attribute classifier on raw features, packaged as a one-layer encoder

    Its logits are the embedding, so verification code scores it exactly
    like the recognition encoder.
    """
    schema = dataset.require_attribute(attribute)
    table = extract_embeddings(identity_params(dataset.ambient_dim), dataset, attribute)
    labels = class_labels(table.labels, schema, config.bucket_boundaries)
    probe = train_probe(table.embeddings, labels, config)
    encoder_config = EncoderConfig(
        input_dim=dataset.ambient_dim,
        hidden_dims=(),
        output_dim=len(probe.classes),
        normalize_output=False,
        init_seed=config.seed,
    )
    return EncoderParams(config=encoder_config, weights=(probe.weights,), biases=(probe.biases,))
