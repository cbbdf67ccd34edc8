"""Training of the trainable tensors of a model (scaling vectors and dense head).

Frozen conv kernels are never touched.  Scaling vectors are clamped back into
[0, 1] after every optimizer step.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import netgraph as ng
from . import tensor as T
from .errors import ConfigError, TrainingError
from .metrics import pr_auc, roc_auc


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 32
    epochs: int = 50
    l1_lambda: float = 0.0
    augment_probability: float = 0.8
    rotation_limit_degrees: float = 10.0
    shift_limit_fraction: float = 0.1
    rng_seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("must be > 0", "learning_rate")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "batch_size")
        if self.epochs < 0:
            raise ConfigError("must be >= 0", "epochs")
        if not self.l1_lambda >= 0:
            raise ConfigError("must be >= 0", "l1_lambda")
        if not 0 <= self.augment_probability <= 1:
            raise ConfigError("must be in [0, 1]", "augment_probability")
        if self.rotation_limit_degrees < 0:
            raise ConfigError("must be >= 0", "rotation_limit_degrees")
        if not 0 <= self.shift_limit_fraction < 1:
            raise ConfigError("must be in [0, 1)", "shift_limit_fraction")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("decay rates must be in [0, 1)", "beta1")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# losses


def bce_loss(prediction, label, clamp=T.BCE_CLAMP):
    """Mean binary cross-entropy; accepts scalars or matching arrays."""
    p = np.atleast_1d(np.asarray(prediction, dtype=np.float64))
    y = np.atleast_1d(np.asarray(label))
    return float(T.bce(p, y, clamp))


def l1_penalty(scaling, lam):
    s = np.concatenate([np.ravel(v) for v in scaling]) if len(scaling) else np.zeros(0)
    return float(lam * np.abs(s).sum())


def project_unit_interval(s):
    s = np.asarray(s)
    return np.clip(s, np.zeros((), s.dtype), np.ones((), s.dtype))


# ---------------------------------------------------------------------------
# Nadam


@dataclass
class NadamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def nadam_step(params, grads, state: NadamState, lr):
    """One Nadam update; returns ``(new_params, state)``.

    m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,  m_hat = m/(1-b1^t),
    v_hat = v/(1-b2^t),  theta <- theta - lr (b1 m_hat + (1-b1) g/(1-b1^t)) / (sqrt(v_hat) + eps)
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / c1
        v_hat = v / c2
        update = (b1 * m_hat + (1 - b1) * g / c1) / (np.sqrt(v_hat) + eps)
        out[name] = (p - lr * update).astype(p.dtype)
    return out, state


# ---------------------------------------------------------------------------
# augmentation


def affine_resample(image, angle_degrees=0.0, shift=(0.0, 0.0)):
    """Rotate about the image centre, then shift by ``(dy, dx)`` pixels.

    Bilinear interpolation, zero outside the source image.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    theta = math.radians(angle_degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    # output -> input map: i = R^-1 (o - c - t) + c
    inv = np.array([[cos, sin], [-sin, cos]])
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - inv @ (center + np.asarray(shift, dtype=np.float64))
    if image.ndim == 2:
        return ndimage.affine_transform(image, inv, offset=offset, order=1, mode="constant", cval=0.0)
    matrix = np.eye(3)
    matrix[:2, :2] = inv
    return ndimage.affine_transform(image, matrix, offset=np.r_[offset, 0.0], order=1,
                                    mode="constant", cval=0.0)


def augment(image, rng, probability=0.8, rotation_limit=10.0, shift_limit=0.1):
    """Random rotation and shift applied with ``probability``.

    Four numbers are drawn from ``rng`` on every call whether or not the
    transform fires, so the stream position does not depend on the outcome.
    """
    u, angle, fy, fx = rng.random(), *rng.uniform(-1.0, 1.0, size=3)
    if u >= probability:
        return image
    h, w = np.shape(image)[:2]
    return affine_resample(image, angle * rotation_limit, (fy * shift_limit * h, fx * shift_limit * w))


def augment_batch(images, rng, config: TrainConfig):
    if config.augment_probability == 0:
        return images
    return np.stack([augment(img, rng, config.augment_probability, config.rotation_limit_degrees,
                             config.shift_limit_fraction) for img in images])


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc_roc: float
    val_auc_pr: float


def evaluate_split(model, data, split, batch_size=256):
    """``(auc_roc, auc_pr)`` on one split; NaN where a metric is undefined."""
    x, y = data.split(split)
    if len(y) == 0:
        return math.nan, math.nan
    p = ng.predict_proba(model, x.astype(model.dtype, copy=False), batch_size)
    auc = roc_auc(p, y) if 0 < y.sum() < len(y) else math.nan
    ap = pr_auc(p, y) if y.sum() > 0 else math.nan
    return auc, ap


def _run_prefix(model, x, stop, batch_size=256):
    if stop == 0 or len(x) == 0:
        return x
    return np.concatenate([ng.run_layers(model, x[i:i + batch_size], 0, stop)
                           for i in range(0, len(x), batch_size)])


def _scores(model, x, y, start):
    if len(y) == 0:
        return math.nan, math.nan
    p = T.sigmoid(ng.run_layers(model, x, start)[:, 0])
    auc = roc_auc(p, y) if 0 < y.sum() < len(y) else math.nan
    ap = pr_auc(p, y) if y.sum() > 0 else math.nan
    return auc, ap


def _loss_and_grads(model, params, xb, yb, lam, start):
    tape = T.GradientTape()
    logits = ng.forward(model, xb, tape, params=params, start=start)
    p = tape.sigmoid(tape.column(logits, 0))
    loss = tape.bce(p, yb)
    if lam > 0:
        scaling = [tape.params[n] for n in params if n.startswith("scaling")]
        loss = tape.add(loss, tape.l1(scaling, lam))
    grads = T.backprop(tape, loss)
    return float(loss.value), grads


def full_loss(model, x, y, lam=0.0, params=None):
    """BCE over ``(x, y)`` plus ``lam * sum|s|`` (pure, no tape)."""
    if params:
        model = ng.with_parameters(model, params)
    logits = ng.forward(model, x)
    loss = T.bce(T.sigmoid(logits[:, 0]), y)
    s = [v for v in ng.scaling_vectors(model) if v is not None]
    return float(loss) + l1_penalty(s, lam)


def loss_gradients(model, x, y, lam=0.0):
    """``(loss, {name: grad})`` of the full training loss on one batch."""
    params = ng.trainable_parameters(model)
    return _loss_and_grads(model, params, x, y, lam, 0)


def train(model, data, config: TrainConfig):
    """Optimize the trainable tensors of ``model`` on the training split.

    Returns ``(trained_model, history)`` with one :class:`EpochRecord` per epoch.
    Batches follow a fresh permutation of the training split each epoch; the
    final partial batch is kept.  When augmentation is off, the frozen prefix
    of the network is evaluated once and cached.
    """
    if model.head.weight.shape[1] != 1:
        raise TrainingError("training needs a single-output head")
    if config.epochs == 0:
        return model, []
    x, y = data.split("train")
    if len(y) == 0:
        raise TrainingError("training split is empty")
    x = x.astype(model.dtype, copy=False)
    rng = np.random.default_rng(config.rng_seed)
    params = ng.trainable_parameters(model)
    if not params:
        return model, []
    state = NadamState(beta1=config.beta1, beta2=config.beta2, epsilon=config.epsilon)

    prefix = ng.first_trainable_layer(model)
    start = 0
    if config.augment_probability == 0 and prefix > 0:
        start = prefix
        x = _run_prefix(model, x, prefix)
    xv, yv = data.split("validation")
    xv = _run_prefix(model, xv.astype(model.dtype, copy=False), prefix)

    history = []
    n = len(y)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            xb = x[idx]
            if start == 0:
                xb = augment_batch(xb, rng, config)
            loss, grads = _loss_and_grads(model, params, xb, y[idx], config.l1_lambda, start)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            params, state = nadam_step(params, grads, state, config.learning_rate)
            for name in params:
                if name.startswith("scaling"):
                    params[name] = project_unit_interval(params[name])
            total += loss * len(idx)
        auc, ap = _scores(ng.with_parameters(model, params), xv, yv, prefix)
        history.append(EpochRecord(epoch, total / n, auc, ap))
    return ng.with_parameters(model, params), history


def write_history_csv(path, history):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_auc_roc", "val_auc_pr"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_auc_roc), repr(r.val_auc_pr)])
    return path
