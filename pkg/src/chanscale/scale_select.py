"""Iterative scale-and-select pruning and finalization.

Each iteration attaches fresh scaling layers (s = 1) to the current frozen
backbone, trains them together with the dense head, removes every channel
whose scaling weight is below the threshold, and repeats.  The final model
is produced by folding the last trained scaling weights into the kernels and
retraining only the head.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import netgraph as ng
from .errors import ConfigError, ModelError
from .metrics import weight_histogram, write_histogram_csv
from .serialize import load_model, save_model
from .trainer import TrainConfig, evaluate_split, train, write_history_csv


@dataclass(frozen=True)
class SelectConfig:
    threshold: float = 0.01
    max_iterations: int = 15
    min_removed_per_iteration: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    finalize_train: TrainConfig = field(default_factory=TrainConfig)
    warm_start_head: bool = True
    scale_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        # threshold 0 is allowed: it removes nothing and is a useful control
        if not 0 <= self.threshold < 1:
            raise ConfigError("must be in [0, 1)", "threshold")
        if self.max_iterations < 1:
            raise ConfigError("must be >= 1", "max_iterations")
        if self.min_removed_per_iteration < 0:
            raise ConfigError("must be >= 0", "min_removed_per_iteration")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    channels_before: tuple
    channels_after: tuple
    keep: ng.KeepSet
    histogram: tuple
    auc_roc: float
    auc_pr: float
    trainable_params: int
    scaling: tuple = ()

    @property
    def total_channels(self):
        return sum(self.channels_after)

    @property
    def removed(self):
        return sum(self.channels_before) - sum(self.channels_after)

    def to_dict(self):
        d = asdict(self)
        d["keep"] = [list(k) for k in self.keep.indices]
        d["scaling"] = [[float(v) for v in s] for s in self.scaling]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["iteration"], tuple(d["channels_before"]), tuple(d["channels_after"]),
                   ng.KeepSet(tuple(tuple(k) for k in d["keep"])), tuple(d["histogram"]),
                   d["auc_roc"], d["auc_pr"], d["trainable_params"],
                   tuple(tuple(s) for s in d.get("scaling", ())))


@dataclass(frozen=True, eq=False)
class SelectResult:
    model: ng.NetworkModel          # pruned backbone after the last iteration
    records: list
    scaled_model: ng.NetworkModel   # last trained model with scaling layers


def threshold_channels(s, tau=0.01):
    """Indices whose scaling weight is >= tau (strict ``s < tau`` removes).

    The comparison runs in the precision of ``s`` so that a weight stored as
    exactly ``tau`` in single precision is kept.
    """
    s = np.asarray(s)
    if np.issubdtype(s.dtype, np.floating):
        tau = s.dtype.type(tau)
    return tuple(int(i) for i in np.flatnonzero(s >= tau))


def effective_keep(keep):
    """``keep`` with every layer after the first empty one emptied (cascade removal)."""
    out, cascaded = [], False
    for k in keep.indices:
        cascaded = cascaded or not k
        out.append(() if cascaded else k)
    return ng.KeepSet(tuple(out))


def cumulative_keep(records):
    """Channels of the original backbone that survive all ``records``."""
    keep = None
    for rec in records:
        step = effective_keep(rec.keep)
        if keep is None:
            keep = step
            continue
        composed = keep.compose(step).indices
        keep = ng.KeepSet(composed + ((),) * (len(keep) - len(composed)))
    return keep


def keep_from_scaling(model, tau):
    vectors = ng.scaling_vectors(model)
    if any(v is None for v in vectors):
        raise ModelError("every conv layer needs a scaling layer to threshold")
    return ng.KeepSet(tuple(threshold_channels(v, tau) for v in vectors))


def _iteration_seed(base, iteration):
    return int(np.random.SeedSequence([int(base), int(iteration)]).generate_state(1)[0])


def run_iteration(model, data, config: SelectConfig, iteration):
    """One attach/train/threshold/prune step; returns ``(pruned, scaled, record, history)``."""
    before = ng.count_channels(model)
    augmented = ng.attach_scaling(model)
    if not config.warm_start_head:
        augmented = ng.reinit_head(augmented, _iteration_seed(config.seed, iteration))
    train_cfg = replace(config.train, rng_seed=_iteration_seed(config.train.rng_seed, iteration))
    trained, history = train(augmented, data, train_cfg)
    vectors = ng.scaling_vectors(trained)
    s_all = np.concatenate(vectors)
    keep = keep_from_scaling(trained, config.threshold)
    pruned = ng.select_channels(trained, keep, seed=_iteration_seed(config.seed, iteration))
    pruned = pruned.replace(metadata={**model.metadata, "iteration": iteration})
    auc, ap = evaluate_split(trained, data, "validation")
    record = IterationRecord(
        iteration=iteration,
        channels_before=before,
        channels_after=ng.count_channels(pruned) + (0,) * (len(before) - len(ng.count_channels(pruned))),
        keep=keep,
        histogram=tuple(int(c) for c in weight_histogram(s_all)),
        auc_roc=float(auc),
        auc_pr=float(ap),
        trainable_params=ng.count_parameters(augmented)["trainable"],
        scaling=tuple(tuple(float(x) for x in v) for v in vectors),
    )
    return pruned, trained, record, history


def scale_select_run(model, data, config: SelectConfig, *, out_dir=None, resume=False):
    """Run scale-and-select until ``max_iterations`` or fewer than
    ``min_removed_per_iteration`` channels are removed in an iteration.

    With ``out_dir``, every iteration writes its checkpoints and reports there
    (see :func:`write_iteration`); ``resume`` continues from the last complete
    iteration found in ``out_dir``.
    """
    if model.has_scaling:
        raise ModelError("scale-and-select starts from a baseline without scaling layers")
    records = []
    current = model
    scaled = None
    if resume and out_dir is not None:
        records, current, scaled = _load_progress(Path(out_dir), model)
    start = len(records) + 1
    done = bool(records) and (records[-1].removed < config.min_removed_per_iteration
                              or len(records) >= config.max_iterations)
    iteration = start
    while not done:
        current, scaled, record, history = run_iteration(current, data, config, iteration)
        records.append(record)
        if out_dir is not None:
            write_iteration(Path(out_dir), record, current, scaled, history)
            write_iterations_csv(Path(out_dir) / "reports" / "iterations.csv", records)
        done = record.removed < config.min_removed_per_iteration or iteration >= config.max_iterations
        iteration += 1
    return SelectResult(current, records, scaled)


def finalize(scaled_model, data, config: SelectConfig):
    """Fold the trained scaling weights into the kernels and retrain the head.

    Returns ``(final_model, history)``.
    """
    keep = keep_from_scaling(scaled_model, config.threshold)
    folded = ng.fold_scaling(scaled_model, keep, scale_bias=config.scale_bias, seed=config.seed)
    final, history = train(folded, data, config.finalize_train)
    final = final.replace(metadata={**final.metadata, "provenance": "finalized"})
    return final, history


# ---------------------------------------------------------------------------
# exhaustive oracle


@dataclass(frozen=True)
class OracleResult:
    keep: ng.KeepSet
    auc: float
    scores: dict    # keep tuple -> validation AUC


def _enumerate_keeps(widths):
    per_layer = [[tuple(c for c, bit in zip(range(w), bits) if bit)
                  for bits in itertools.product((0, 1), repeat=w)] for w in widths]
    for combo in itertools.product(*per_layer):
        yield ng.KeepSet(combo)


def _flat(keep):
    return tuple((l, i) for l, k in enumerate(keep.indices) for i in k)


def exhaustive_selection_oracle(model, data, train_config: TrainConfig, *, max_channels=12, seed=0):
    """Try every keep set, retraining a fresh head for each; best validation AUC wins.

    Ties go to the smaller keep set, then the lexicographically smaller one.
    A keep set that empties the first conv layer is scored as a constant
    predictor (AUC 0.5).
    """
    base = ng.strip_scaling(model)
    widths = ng.count_channels(base)
    if sum(widths) > max_channels:
        raise ModelError(f"exhaustive search capped at {max_channels} channels, model has {sum(widths)}")
    scores = {}
    for keep in _enumerate_keeps(widths):
        if not keep.indices[0]:
            scores[keep.indices] = 0.5
            continue
        pruned = ng.reinit_head(ng.select_channels(base, keep, seed=seed), seed)
        trained, _ = train(pruned, data, train_config)
        auc, _ = evaluate_split(trained, data, "validation")
        scores[keep.indices] = 0.5 if math.isnan(auc) else float(auc)
    best = min(scores, key=lambda k: (-scores[k], sum(map(len, k)), _flat(ng.KeepSet(k))))
    return OracleResult(ng.KeepSet(best), scores[best], scores)


# ---------------------------------------------------------------------------
# persistence


def write_iteration(out_dir, record, pruned, scaled, history):
    out_dir = Path(out_dir)
    tag = f"iter_{record.iteration:03d}"
    save_model(pruned, out_dir / "checkpoints" / f"{tag}.cssm")
    save_model(scaled, out_dir / "checkpoints" / f"{tag}_scaled.cssm")
    reports = out_dir / "reports"
    write_histogram_csv(reports / "histograms" / f"{tag}.csv", record.histogram)
    write_history_csv(reports / "history" / f"{tag}.csv", history)
    keep_path = reports / "keepsets" / f"{tag}.json"
    keep_path.parent.mkdir(parents=True, exist_ok=True)
    keep_path.write_text(record.keep.to_json() + "\n")
    rec_path = reports / "records" / f"{tag}.json"
    rec_path.parent.mkdir(parents=True, exist_ok=True)
    rec_path.write_text(json.dumps(record.to_dict(), sort_keys=True) + "\n")


def write_iterations_csv(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "total_channels", "auc_roc", "auc_pr", "trainable_params"])
        for r in records:
            w.writerow([r.iteration, r.total_channels, repr(r.auc_roc), repr(r.auc_pr), r.trainable_params])
    return path


def load_records(out_dir):
    paths = sorted((Path(out_dir) / "reports" / "records").glob("iter_*.json"))
    return [IterationRecord.from_dict(json.loads(p.read_text())) for p in paths]


def _load_progress(out_dir, model):
    records = []
    for rec in load_records(out_dir):
        tag = f"iter_{rec.iteration:03d}"
        if rec.iteration != len(records) + 1:
            break
        if not (out_dir / "checkpoints" / f"{tag}.cssm").exists() or \
                not (out_dir / "checkpoints" / f"{tag}_scaled.cssm").exists():
            break
        records.append(rec)
    if not records:
        return [], model, None
    tag = f"iter_{records[-1].iteration:03d}"
    return (records, load_model(out_dir / "checkpoints" / f"{tag}.cssm"),
            load_model(out_dir / "checkpoints" / f"{tag}_scaled.cssm"))
