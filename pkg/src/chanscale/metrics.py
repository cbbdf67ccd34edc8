"""ROC / precision-recall metrics, weight histograms and channel reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, ModelError
from .netgraph import count_channels


@dataclass(frozen=True, eq=False)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        labels = np.asarray(self.labels).ravel()
        if scores.shape != labels.shape:
            raise ContractError(f"{scores.size} scores but {labels.size} labels")
        if not np.all((labels == 0) | (labels == 1)):
            raise ContractError("labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int8))

    @property
    def n_pos(self):
        return int(self.labels.sum())

    @property
    def n_neg(self):
        return int(self.labels.size - self.labels.sum())


def _scored(scores, labels):
    return scores if isinstance(scores, ScoredSet) else ScoredSet(scores, labels)


def roc_auc(scores, labels=None):
    """Mann-Whitney estimate of P(score_pos > score_neg), ties count one half."""
    s = _scored(scores, labels)
    if s.n_pos == 0 or s.n_neg == 0:
        raise ContractError("ROC AUC needs at least one positive and one negative")
    ranks = rankdata(s.scores, method="average")
    u = ranks[s.labels == 1].sum() - s.n_pos * (s.n_pos + 1) / 2
    return float(u / (s.n_pos * s.n_neg))


def _threshold_counts(s):
    order = np.argsort(-s.scores, kind="mergesort")
    scores = s.scores[order]
    labels = s.labels[order]
    # index of the last element of each run of equal scores
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    tp = np.cumsum(labels)[ends]
    fp = (ends + 1) - tp
    return scores[ends], tp, fp


def roc_curve(scores, labels=None):
    """``(thresholds, tpr, fpr)`` with a leading (+inf, 0, 0) point."""
    s = _scored(scores, labels)
    if s.n_pos == 0 or s.n_neg == 0:
        raise ContractError("ROC curve needs both classes")
    thr, tp, fp = _threshold_counts(s)
    return np.r_[np.inf, thr], np.r_[0.0, tp / s.n_pos], np.r_[0.0, fp / s.n_neg]


def pr_curve(scores, labels=None):
    """``(thresholds, precision, recall)``, one point per unique score, descending."""
    s = _scored(scores, labels)
    if s.n_pos == 0:
        raise ContractError("precision-recall needs at least one positive")
    thr, tp, fp = _threshold_counts(s)
    return thr, tp / (tp + fp), tp / s.n_pos


def pr_auc(scores, labels=None):
    """Step-wise area under the PR curve: sum of (R_k - R_{k-1}) * P_k."""
    _, precision, recall = pr_curve(scores, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def write_curve_csv(path, columns, header):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([repr(float(v)) for v in row])
    return path


# ---------------------------------------------------------------------------


def histogram_edges(bins=100):
    return np.linspace(0.0, 1.0, bins + 1)


def weight_histogram(values, bins=100):
    """Equal-width counts over [0, 1]; 1.0 lands in the last bin."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size and (values.min() < 0 or values.max() > 1 or not np.all(np.isfinite(values))):
        raise ContractError("histogram values must lie in [0, 1]")
    counts, _ = np.histogram(values, bins=histogram_edges(bins))
    return counts.astype(np.int64)


def write_histogram_csv(path, counts):
    edges = histogram_edges(len(counts))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, n in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{lo:.2f}", f"{hi:.2f}", int(n)])
    return path


@dataclass(frozen=True)
class LayerChannels:
    layer_index: int
    original_channels: int
    remaining_channels: int

    @property
    def fraction(self):
        return self.remaining_channels / self.original_channels


def channels_per_layer_report(before, after):
    """Remaining channel fraction per conv layer of ``before``.

    Conv layers removed by cascade report zero remaining channels.
    """
    orig = count_channels(before)
    now = count_channels(after)
    if len(now) > len(orig) or any(b > a for a, b in zip(orig, now)):
        raise ModelError(f"models are not comparable: {orig} vs {now}")
    now = now + (0,) * (len(orig) - len(now))
    return [LayerChannels(i, a, b) for i, (a, b) in enumerate(zip(orig, now))]


def write_channels_csv(path, report):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer_index", "original_channels", "remaining_channels"])
        for r in report:
            w.writerow([r.layer_index, r.original_channels, r.remaining_channels])
    return path
