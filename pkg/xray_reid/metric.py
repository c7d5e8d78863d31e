"""
Triplet loss, its gradients, the squared-distance score and triplet mining.
"""

import logging
import math
from enum import Enum
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DimensionMismatchError, MiningError

logger = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.2


class MiningStrategy(str, Enum):
    RANDOM = 'random'
    SEMI_HARD = 'semi_hard'
    HARDEST = 'hardest'


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


def _vectors(*vectors):
    arrays = [np.asarray(v, dtype=np.float64) for v in vectors]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1 or arrays[0].ndim != 1:
        raise DimensionMismatchError(f"vectors must be 1-D with equal lengths, got shapes {[a.shape for a in arrays]}")
    return arrays


def squared_l2(a, b):
    """Score S = ||a - b||^2."""
    a, b = _vectors(a, b)
    diff = a - b
    return float(diff @ diff)


def pairwise_squared_l2(x, y=None):
    """Matrix of squared distances between the rows of x and y (default x)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = x if y is None else np.atleast_2d(np.asarray(y, dtype=np.float64))
    return cdist(x, y, metric='sqeuclidean')


def triplet_loss(e_a, e_p, e_n, alpha=DEFAULT_MARGIN):
    """max(||e_a - e_p||^2 - ||e_a - e_n||^2 + alpha, 0)"""
    e_a, e_p, e_n = _vectors(e_a, e_p, e_n)
    if alpha < 0:
        raise ValueError(f"margin must be >= 0, got {alpha}")
    d_ap = e_a - e_p
    d_an = e_a - e_n
    return max(float(d_ap @ d_ap) - float(d_an @ d_an) + alpha, 0.0)


def triplet_loss_grad(e_a, e_p, e_n, alpha=DEFAULT_MARGIN):
    """
    Gradients of ``triplet_loss`` with respect to e_a, e_p and e_n.

    All three are zero when the hinge argument is <= 0.
    """
    e_a, e_p, e_n = _vectors(e_a, e_p, e_n)
    d_ap = e_a - e_p
    d_an = e_a - e_n
    if float(d_ap @ d_ap) - float(d_an @ d_an) + alpha <= 0.0:
        zero = np.zeros_like(e_a)
        return zero, zero.copy(), zero.copy()
    return 2.0 * (e_n - e_p), -2.0 * d_ap, 2.0 * d_an


def _triplet_arrays(triplets):
    array = np.asarray([tuple(t) for t in triplets], dtype=np.intp).reshape(-1, 3)
    return array[:, 0], array[:, 1], array[:, 2]


def triplet_losses(embeddings, triplets, alpha=DEFAULT_MARGIN):
    """Per-triplet losses for rows of an embedding matrix."""
    e = np.asarray(embeddings, dtype=np.float64)
    a, p, n = _triplet_arrays(triplets)
    d_ap = np.sum((e[a] - e[p]) ** 2, axis=1)
    d_an = np.sum((e[a] - e[n]) ** 2, axis=1)
    return np.maximum(d_ap - d_an + alpha, 0.0)


def triplet_embedding_grads(embeddings, triplets, alpha=DEFAULT_MARGIN):
    """
    Sum of per-triplet loss gradients onto embedding rows

    Contributions are added in triplet order (anchor, positive, negative), so
    the result is bit-reproducible.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    grads = np.zeros_like(e)
    for a, p, n in triplets:
        g_a, g_p, g_n = triplet_loss_grad(e[a], e[p], e[n], alpha)
        grads[a] += g_a
        grads[p] += g_p
        grads[n] += g_n
    return grads


def _anchor_positive_pairs(labels):
    groups = {}
    for index, label in enumerate(labels):
        groups.setdefault(label, []).append(index)
    if not any(len(g) >= 2 for g in groups.values()):
        raise MiningError("no positive pair available: every identity has a single record")
    if len(groups) < 2:
        raise MiningError("fewer than two identities present; no negative available")
    return [(i, j) for g in groups.values() for i in g for j in g if i != j]


def mine_triplets(embeddings, labels, strategy=MiningStrategy.SEMI_HARD, count=1, seed=0, alpha=DEFAULT_MARGIN):
    """
    Form triplets from identity-labelled embeddings

    Anchor-positive pairs are drawn without replacement from all ordered
    same-label pairs (a fresh seeded permutation per pass when ``count``
    exceeds them). Negatives follow ``strategy``:

    - random: uniform over other identities
    - semi_hard: closest negative with d_ap < d_an < d_ap + alpha, else hardest
    - hardest: argmin of d_an (lowest index on ties)

    Args:
        embeddings (array-like): n x d matrix
        labels (Sequence): identity label per row
        strategy (MiningStrategy): negative selection rule
        count (int): number of triplets to return
        seed (int): generator seed
        alpha (float): margin defining the semi-hard band

    Returns:
        list: Triplet tuples
    """
    strategy = MiningStrategy(strategy)
    labels = list(labels)
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] != len(labels):
        raise DimensionMismatchError(f"embeddings shape {e.shape} does not match {len(labels)} labels")
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    pairs = _anchor_positive_pairs(labels)

    rng = np.random.default_rng(seed)
    passes = math.ceil(count / len(pairs))
    order = np.concatenate([rng.permutation(len(pairs)) for _ in range(passes)])[:count]

    _, codes = np.unique(np.asarray(labels, dtype=object).astype(str), return_inverse=True)
    distances = None if strategy is MiningStrategy.RANDOM else pairwise_squared_l2(e)

    triplets = []
    for k in order:
        anchor, positive = pairs[k]
        negatives = np.flatnonzero(codes != codes[anchor])
        if strategy is MiningStrategy.RANDOM:
            negative = negatives[rng.integers(len(negatives))]
        else:
            d_an = distances[anchor, negatives]
            negative = negatives[np.argmin(d_an)]
            if strategy is MiningStrategy.SEMI_HARD:
                d_ap = distances[anchor, positive]
                band = (d_an > d_ap) & (d_an < d_ap + alpha)
                if band.any():
                    negative = negatives[band][np.argmin(d_an[band])]
        triplets.append(Triplet(int(anchor), int(positive), int(negative)))
    return triplets
