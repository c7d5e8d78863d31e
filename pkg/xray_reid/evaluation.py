"""
Verification evaluation.

Pairs of records are scored with S = ||f(x_A) - f(x_B)||^2. By default a
pair is predicted "same patient" when S <= t (distance orientation); the
"similarity" orientation predicts same when S >= t. Every metric here takes
that orientation as the ``lower_is_same`` flag.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.stats import rankdata

from .encoder import embed
from .errors import ConfigError, EvaluationError, PairConstructionError, ReidError, SingleClassError
from .metric import squared_l2
from .operations import group_by_patient

logger = logging.getLogger(__name__)

DEFAULT_FPR_TARGETS = (0.01, 0.05, 0.1)
ORIENTATIONS = ('distance', 'similarity')


class RandomNegatives:
    name = 'random'

    def source(self, dataset):
        return dataset

    def __eq__(self, other):
        return isinstance(other, RandomNegatives)

    def __hash__(self):
        return hash(self.name)

    def __repr__(self):
        return 'RandomNegatives()'


@dataclass(frozen=True)
class SameAttributeNegatives:
    """Negative pairs restricted to records agreeing on one attribute."""
    attribute: str

    @property
    def name(self):
        return f'same_attribute:{self.attribute}'

    def source(self, dataset):
        dataset.require_attribute(self.attribute)
        return dataset


@dataclass(frozen=True, eq=False)
class OutOfDistribution:
    """Random pairs drawn from a shifted dataset instead of the test set."""
    dataset: object
    name: str = 'ood'

    def source(self, dataset):
        return self.dataset


def parse_setting(text, ood_dataset=None):
    """'random' | 'same_attribute:<name>' | 'ood' -> pair setting."""
    text = text.strip()
    if text == 'random':
        return RandomNegatives()
    if text.startswith('same_attribute:'):
        return SameAttributeNegatives(text.split(':', 1)[1])
    if text == 'ood':
        if ood_dataset is None:
            raise EvaluationError("setting 'ood' needs an out-of-distribution dataset", setting='ood')
        return OutOfDistribution(ood_dataset)
    raise EvaluationError(f"unknown pair setting '{text}'", setting=text)


class Pair(NamedTuple):
    index_a: int
    index_b: int
    same: bool


@dataclass(frozen=True)
class PairSet:
    pairs: Tuple[Pair, ...]
    setting: object
    seed: int

    @property
    def n_pos(self):
        return sum(1 for p in self.pairs if p.same)

    @property
    def n_neg(self):
        return sum(1 for p in self.pairs if not p.same)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)


def _pairs_within(n):
    return n * (n - 1) // 2


def _row_start(row, size):
    return row * (2 * size - row - 1) // 2


def _block_pair(k, size):
    """(i, j), i < j, of linear index ``k`` in row-major order over a block of ``size`` items."""
    k = np.asarray(k, dtype=np.int64)
    b = 2 * size - 1
    row = np.floor((b - np.sqrt(b * b - 8.0 * k)) / 2.0).astype(np.int64)
    # float rounding can put the row off by one either way
    row = np.where(_row_start(row + 1, size) <= k, row + 1, row)
    row = np.where(_row_start(row, size) > k, row - 1, row)
    return row, k - _row_start(row, size) + row + 1


@dataclass(frozen=True, eq=False)
class PairPool:
    """
    Eligible pairs of one setting, without materialising the negatives

    Negatives are the different-patient pairs inside each block: the whole
    dataset for random negatives, one block per attribute value otherwise.

    Attributes:
    - positives: (first, second) index arrays of same-patient pairs, sorted
    - blocks: record index arrays whose internal pairs are negative candidates
    - patient_codes: integer patient code per record
    - n_neg: number of eligible negative pairs
    """
    positives: Tuple[np.ndarray, np.ndarray]
    blocks: Tuple[np.ndarray, ...]
    patient_codes: np.ndarray
    n_neg: int

    @property
    def n_pos(self):
        return len(self.positives[0])

    @classmethod
    def build(cls, source, setting):
        _, codes = np.unique(np.asarray(source.patient_ids, dtype=str), return_inverse=True)
        first, second = [], []
        for indices in group_by_patient(source).values():
            if len(indices) > 1:
                a, b = np.triu_indices(len(indices), k=1)
                first.append(np.asarray(indices)[a])
                second.append(np.asarray(indices)[b])
        first = np.concatenate(first) if first else np.zeros(0, dtype=np.int64)
        second = np.concatenate(second) if second else np.zeros(0, dtype=np.int64)
        order = np.lexsort((second, first))

        if isinstance(setting, SameAttributeNegatives):
            values = np.asarray([str(v) for v in source.labels(setting.attribute)])
            blocks = tuple(np.flatnonzero(values == value) for value in np.unique(values))
        else:
            blocks = (np.arange(len(source)),)
        n_neg = sum(
            _pairs_within(len(block)) - sum(_pairs_within(int(c)) for c in np.bincount(codes[block]))
            for block in blocks if len(block)
        )
        return cls(positives=(first[order], second[order]), blocks=blocks, patient_codes=codes, n_neg=int(n_neg))

    def sample_negatives(self, count, rng):
        """``count`` distinct negatives, uniformly without replacement, as (first, second) arrays."""
        sizes = [len(block) for block in self.blocks]
        offsets = np.concatenate([[0], np.cumsum([_pairs_within(s) for s in sizes])]).astype(np.int64)
        total = int(offsets[-1])
        # candidates include same-patient pairs; oversample by their share
        draw = min(total, count + count * (total - self.n_neg) // max(self.n_neg, 1) + 16)
        while True:
            picks = rng.choice(total, size=draw, replace=False)
            owner = np.searchsorted(offsets, picks, side='right') - 1
            first = np.empty(draw, dtype=np.int64)
            second = np.empty(draw, dtype=np.int64)
            for b in np.unique(owner):
                mask = owner == b
                i, j = _block_pair(picks[mask] - offsets[b], sizes[b])
                first[mask] = self.blocks[b][i]
                second[mask] = self.blocks[b][j]
            keep = self.patient_codes[first] != self.patient_codes[second]
            if keep.sum() >= count or draw == total:
                return first[keep][:count], second[keep][:count]
            draw = min(total, 2 * draw)


def count_eligible_pairs(dataset, setting):
    """(number of eligible positive pairs, number of eligible negative pairs)"""
    pool = PairPool.build(setting.source(dataset), setting)
    return pool.n_pos, pool.n_neg


def build_pairs(dataset, setting, n_pos, n_neg, seed):
    """
    Sample labelled pairs without replacement

    Args:
        dataset (DataSet): Test dataset (ignored by OOD, which uses its own)
        setting: RandomNegatives | SameAttributeNegatives | OutOfDistribution
        n_pos (int): same-patient pairs
        n_neg (int): different-patient pairs
        seed (int): sampling seed

    Returns:
        PairSet: positives first, then negatives; indices into ``setting.source(dataset)``
    """
    if n_pos <= 0 or n_neg <= 0:
        raise PairConstructionError(f"pair counts must be positive, got n_pos={n_pos}, n_neg={n_neg}")
    pool = PairPool.build(setting.source(dataset), setting)
    for label, wanted, available in (('positive', n_pos, pool.n_pos), ('negative', n_neg, pool.n_neg)):
        if available < wanted:
            raise PairConstructionError(
                f"{setting.name}: requested {wanted} {label} pairs but only {available} are eligible "
                f"(short by {wanted - available})",
                shortfall=wanted - available,
            )

    rng = np.random.default_rng(seed)
    positives = pool.positives
    pos_pick = rng.choice(pool.n_pos, size=n_pos, replace=False)
    neg_first, neg_second = pool.sample_negatives(n_neg, rng)
    pairs = [Pair(int(positives[0][k]), int(positives[1][k]), True) for k in pos_pick]
    pairs += [Pair(int(a), int(b), False) for a, b in zip(neg_first, neg_second)]
    return PairSet(pairs=tuple(pairs), setting=setting, seed=seed)


@dataclass(frozen=True, eq=False)
class ScoredPairs:
    """Scores with their same/different labels, in pair order."""
    scores: np.ndarray
    same: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'scores', np.asarray(self.scores, dtype=np.float64))
        object.__setattr__(self, 'same', np.asarray(self.same, dtype=bool))

    @classmethod
    def from_pairs(cls, items):
        items = list(items)
        return cls(scores=[float(s) for s, _ in items], same=[bool(l) for _, l in items])

    @classmethod
    def from_groups(cls, positives, negatives):
        positives = list(positives)
        negatives = list(negatives)
        return cls(scores=positives + negatives, same=[True] * len(positives) + [False] * len(negatives))

    def __len__(self):
        return len(self.scores)

    def __iter__(self):
        return ((float(s), bool(l)) for s, l in zip(self.scores, self.same))

    @property
    def n_pos(self):
        return int(self.same.sum())

    @property
    def n_neg(self):
        return int((~self.same).sum())


def score_pairs(params, dataset, pairs):
    """Score every pair with the squared embedding distance, preserving order."""
    n = len(dataset)
    for pair in pairs:
        if not (0 <= pair.index_a < n and 0 <= pair.index_b < n):
            raise PairConstructionError(f"pair {tuple(pair)} out of range for {n} records")
    if len(pairs) == 0:
        return ScoredPairs(scores=[], same=[])
    used = np.unique([i for p in pairs for i in (p.index_a, p.index_b)])
    embeddings = embed(params, dataset.features[used])
    row = {int(index): k for k, index in enumerate(used)}
    scores = [squared_l2(embeddings[row[p.index_a]], embeddings[row[p.index_b]]) for p in pairs]
    return ScoredPairs(scores=scores, same=[p.same for p in pairs])


def _oriented(scored, lower_is_same):
    scores = scored.scores if lower_is_same else -scored.scores
    if scored.n_pos == 0 or scored.n_neg == 0:
        raise SingleClassError(
            f"need both classes, got {scored.n_pos} same and {scored.n_neg} different pairs"
        )
    return scores, scored.same


def rank_auc(scores, positive, lower_is_positive=True):
    """
    Mann-Whitney AUC: P(random positive ranks before random negative), ties 1/2

    ``lower_is_positive`` says which end of the score axis belongs to the
    positive class.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(f"need both classes, got {n_pos} positive and {n_neg} negative samples")
    ranks = rankdata(scores if lower_is_positive else -scores)
    u = ranks[~positive].sum() - n_neg * (n_neg + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc(scored, lower_is_same=True):
    """Probability that a random same pair scores on the 'same' side of a random different pair."""
    return rank_auc(scored.scores, scored.same, lower_is_positive=lower_is_same)


@dataclass(frozen=True, eq=False)
class RocCurve:
    """
    Sweep points in threshold order

    Attributes:
    - thresholds: decision thresholds in the original score scale
    - fpr / tpr: rates of predicting "same" at each threshold
    - lower_is_same: True when "same" means score <= threshold
    """
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    lower_is_same: bool = True

    def area(self):
        """Trapezoidal area under the curve."""
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))

    def to_frame(self):
        return pd.DataFrame({'threshold': self.thresholds, 'fpr': self.fpr, 'tpr': self.tpr})


def _rates(scores, same, thresholds):
    pos = np.sort(scores[same])
    neg = np.sort(scores[~same])
    tpr = np.searchsorted(pos, thresholds, side='right') / len(pos)
    fpr = np.searchsorted(neg, thresholds, side='right') / len(neg)
    return fpr, tpr


def roc_curve(scored, lower_is_same=True):
    """ROC over every distinct score, starting one ulp below the smallest."""
    scores, same = _oriented(scored, lower_is_same)
    distinct = np.unique(scores)
    thresholds = np.concatenate([[np.nextafter(distinct[0], -np.inf)], distinct])
    fpr, tpr = _rates(scores, same, thresholds)
    return RocCurve(
        thresholds=thresholds if lower_is_same else -thresholds,
        fpr=fpr,
        tpr=tpr,
        lower_is_same=lower_is_same,
    )


def eer(curve):
    """
    FPR where FPR = 1 - TPR on the piecewise-linear curve

    Brent's method finds the crossing along the sweep index; the value is
    then solved linearly inside the bracketing segment.
    """
    gap = curve.fpr + curve.tpr - 1.0
    if gap[0] >= 0.0:
        return float(curve.fpr[0])
    steps = np.arange(len(gap), dtype=np.float64)
    root = brentq(lambda s: np.interp(s, steps, gap), 0.0, steps[-1])
    k = min(int(root), len(gap) - 2)
    low, high = gap[k], gap[k + 1]
    fraction = 0.0 if high == low else min(max(-low / (high - low), 0.0), 1.0)
    return float(curve.fpr[k] + fraction * (curve.fpr[k + 1] - curve.fpr[k]))


def tpr_at_fpr(curve, target):
    """TPR of the last sweep point whose FPR does not exceed ``target``."""
    allowed = curve.fpr <= target
    return float(curve.tpr[allowed].max())


@dataclass(frozen=True)
class MaxAccuracy:
    name = 'max_accuracy'


@dataclass(frozen=True)
class TargetFPR:
    value: float

    @property
    def name(self):
        return f'target_fpr:{self.value}'


@dataclass(frozen=True)
class ThresholdChoice:
    threshold: float
    accuracy: float
    fpr: float
    tpr: float


def _threshold_grid(scores):
    distinct = np.unique(scores)
    if len(distinct) == 1:
        return np.array([distinct[0] - 0.5, distinct[0] + 0.5])
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    below = distinct[0] - (distinct[1] - distinct[0]) / 2.0
    above = distinct[-1] + (distinct[-1] - distinct[-2]) / 2.0
    return np.concatenate([[below], mids, [above]])


def select_threshold(scored, criterion=MaxAccuracy(), lower_is_same=True):
    """
    Calibrate t on validation scores

    MaxAccuracy picks the lowest grid midpoint of maximal accuracy;
    TargetFPR picks the largest grid point whose FPR stays within the target.
    """
    scores, same = _oriented(scored, lower_is_same)
    grid = _threshold_grid(scores)
    fpr, tpr = _rates(scores, same, grid)
    n_pos, n_neg = int(same.sum()), int((~same).sum())
    accuracy = (tpr * n_pos + (1.0 - fpr) * n_neg) / (n_pos + n_neg)
    if isinstance(criterion, TargetFPR):
        k = int(np.flatnonzero(fpr <= criterion.value)[-1]) if np.any(fpr <= criterion.value) else 0
    else:
        k = int(np.argmax(accuracy))
    threshold = grid[k] if lower_is_same else -grid[k]
    return ThresholdChoice(threshold=float(threshold), accuracy=float(accuracy[k]), fpr=float(fpr[k]), tpr=float(tpr[k]))


def predict_same(scores, threshold, lower_is_same=True):
    scores = np.asarray(scores, dtype=np.float64)
    return scores <= threshold if lower_is_same else scores >= threshold


def accuracy_at(scored, threshold, lower_is_same=True):
    predicted = predict_same(scored.scores, threshold, lower_is_same)
    return float(np.mean(predicted == scored.same))


def verify_pair(params, x_a, x_b, threshold, lower_is_same=True):
    """
    Inference-time decision for one pair of feature vectors

    Returns:
        tuple: (score S, True if predicted same patient)
    """
    embeddings = embed(params, np.stack([np.asarray(x_a, dtype=np.float64), np.asarray(x_b, dtype=np.float64)]))
    score = squared_l2(embeddings[0], embeddings[1])
    return score, bool(predict_same(score, threshold, lower_is_same))


@dataclass(frozen=True)
class EvalConfig:
    """
    Evaluation settings

    Attributes:
    - settings: 'random', 'same_attribute:<name>', 'ood'
    - n_pos / n_neg: test pairs per setting
    - seed: pair sampling seed
    - fpr_targets: operating points reported as TPR@FPR
    - score_orientation: 'distance' (S <= t is same) or 'similarity' (S >= t)
    """
    settings: Tuple[str, ...] = ('random',)
    n_pos: int = 1000
    n_neg: int = 1000
    seed: int = 0
    fpr_targets: Tuple[float, ...] = DEFAULT_FPR_TARGETS
    score_orientation: str = 'distance'

    def __post_init__(self):
        object.__setattr__(self, 'settings', tuple(self.settings))
        object.__setattr__(self, 'fpr_targets', tuple(float(f) for f in self.fpr_targets))

    @property
    def lower_is_same(self):
        return self.score_orientation == 'distance'

    def validate(self):
        if self.score_orientation not in ORIENTATIONS:
            raise ConfigError(f"eval.score_orientation must be one of {ORIENTATIONS}, got '{self.score_orientation}'")
        if self.n_pos <= 0 or self.n_neg <= 0:
            raise ConfigError("eval.n_pos and eval.n_neg must be positive")
        if not self.settings:
            raise ConfigError("eval.settings must name at least one setting")
        return self


@dataclass
class VerificationReport:
    setting: str
    n_pos: int
    n_neg: int
    auroc: float
    eer: float
    tpr_at_fpr: Dict[float, float]
    threshold: float
    validation_accuracy: float
    test_accuracy: float
    model: str = 'recognition'
    curve: Optional[RocCurve] = field(default=None, repr=False, compare=False)

    def to_dict(self):
        return {
            'model': self.model,
            'setting': self.setting,
            'n_pos': self.n_pos,
            'n_neg': self.n_neg,
            'auroc': self.auroc,
            'eer': self.eer,
            'tpr_at_fpr': {repr(float(k)): v for k, v in self.tpr_at_fpr.items()},
            'threshold': self.threshold,
            'validation_accuracy': self.validation_accuracy,
            'test_accuracy': self.test_accuracy,
        }


def calibrate(params, validation_dataset, n_pos, n_neg, seed, lower_is_same=True):
    """MaxAccuracy threshold on random-negative validation pairs (counts clamped to what exists)."""
    setting = RandomNegatives()
    available_pos, available_neg = count_eligible_pairs(validation_dataset, setting)
    pairs = build_pairs(
        validation_dataset, setting, max(1, min(n_pos, available_pos)), max(1, min(n_neg, available_neg)), seed
    )
    return select_threshold(score_pairs(params, validation_dataset, pairs), MaxAccuracy(), lower_is_same)


def evaluate(params, dataset, settings, counts, seed, validation_dataset=None,
             fpr_targets=DEFAULT_FPR_TARGETS, lower_is_same=True, model='recognition'):
    """
    One VerificationReport per pair setting

    Args:
        params (EncoderParams): Encoder under test
        dataset (DataSet): Held-out test records
        settings (list): Pair settings
        counts (tuple): (n_pos, n_neg) per setting
        seed (int): Pair sampling seed
        validation_dataset (DataSet, optional): Threshold calibration records;
            falls back to ``dataset`` with a warning
        fpr_targets (tuple): FPR budgets for TPR@FPR
        lower_is_same (bool): Decision orientation
        model (str): Label stored in the reports

    Returns:
        list: VerificationReport per setting, in input order
    """
    n_pos, n_neg = counts
    if validation_dataset is None:
        logger.warning("No validation dataset given; calibrating the threshold on the test dataset")
        validation_dataset = dataset
    try:
        choice = calibrate(params, validation_dataset, n_pos, n_neg, seed, lower_is_same)
    except ReidError as e:
        raise EvaluationError(f"threshold calibration: {e}", setting='calibration') from e

    reports = []
    for setting in settings:
        try:
            pairs = build_pairs(dataset, setting, n_pos, n_neg, seed)
            scored = score_pairs(params, setting.source(dataset), pairs)
            curve = roc_curve(scored, lower_is_same)
            report = VerificationReport(
                setting=setting.name,
                n_pos=pairs.n_pos,
                n_neg=pairs.n_neg,
                auroc=auroc(scored, lower_is_same),
                eer=eer(curve),
                tpr_at_fpr={float(f): tpr_at_fpr(curve, f) for f in fpr_targets},
                threshold=choice.threshold,
                validation_accuracy=choice.accuracy,
                test_accuracy=accuracy_at(scored, choice.threshold, lower_is_same),
                model=model,
                curve=curve,
            )
        except ReidError as e:
            raise EvaluationError(f"setting '{setting.name}': {e}", setting=setting.name) from e
        logger.info(f"[{model}] {setting.name}: AUROC={report.auroc:.4f} EER={report.eer:.4f} acc={report.test_accuracy:.4f}")
        reports.append(report)
    return reports
