"""Labelled image datasets, stratified splitting, and the planted-feature generator."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import netgraph as ng
from .errors import ConfigError, DataError
from .imageio import read_pnm, resize_bilinear

SPLITS = ("train", "validation", "test")
DEFAULT_FRACTIONS = (0.2, 0.1, 0.7)


@dataclass(frozen=True, eq=False)
class DatasetContainer:
    images: np.ndarray          # (n, h, w, c)
    labels: np.ndarray          # (n,) in {0, 1}
    splits: np.ndarray          # (n,) index into SPLITS
    patient_ids: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.labels)
        if self.images.ndim != 4 or len(self.images) != n or len(self.splits) != n:
            raise DataError("images, labels and splits must share the sample axis")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DataError("labels must be 0 or 1")
        if n and (self.splits.min() < 0 or self.splits.max() >= len(SPLITS)):
            raise DataError("split codes out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def indices(self, name):
        return np.flatnonzero(self.splits == SPLITS.index(name))

    def split(self, name):
        idx = self.indices(name)
        return self.images[idx], self.labels[idx]

    def with_images(self, images):
        return DatasetContainer(images, self.labels, self.splits, self.patient_ids, self.metadata)


def save_dataset(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"images": data.images, "labels": data.labels, "splits": data.splits,
              "metadata": np.array(json.dumps(data.metadata, sort_keys=True))}
    if data.patient_ids is not None:
        arrays["patient_ids"] = data.patient_ids.astype(str)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_dataset(path):
    with np.load(path, allow_pickle=False) as z:
        return DatasetContainer(
            z["images"], z["labels"], z["splits"],
            z["patient_ids"] if "patient_ids" in z.files else None,
            json.loads(str(z["metadata"])),
        )


# ---------------------------------------------------------------------------
# splitting


def split_sizes(n, fractions):
    """Largest-remainder allocation of ``n`` items to ``fractions``."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ConfigError(f"split fractions must be >= 0 and sum to 1, got {tuple(fractions)}",
                          "split_fractions")
    raw = fractions * n
    sizes = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    return tuple(int(s) for s in sizes)


def stratified_split(labels, fractions=DEFAULT_FRACTIONS, seed=0, groups=None):
    """Split codes per sample, stratified by label and atomic over ``groups``.

    Units (samples, or groups of samples sharing a patient id) are shuffled
    within their class and interleaved so every contiguous run has close to
    the global class mix; the run is then cut at the target split sizes.
    """
    labels = np.asarray(labels)
    n = len(labels)
    rng = np.random.default_rng(seed)
    if groups is None:
        unit_of = np.arange(n)
    else:
        _, unit_of = np.unique(np.asarray(groups).astype(str), return_inverse=True)
        unit_of = unit_of.ravel()
    n_units = int(unit_of.max()) + 1 if n else 0
    unit_size = np.bincount(unit_of, minlength=n_units)
    positives = np.bincount(unit_of, weights=labels, minlength=n_units)
    unit_label = (positives * 2 >= unit_size).astype(int)

    keys = np.empty(n_units)
    for cls in (0, 1):
        members = np.flatnonzero(unit_label == cls)
        perm = rng.permutation(members)
        keys[perm] = (np.arange(len(perm)) + 0.5) / max(len(perm), 1)
    order = np.lexsort((unit_label, keys))

    sizes = split_sizes(n, fractions)
    bounds = np.cumsum(sizes)
    unit_split = np.empty(n_units, dtype=np.int8)
    filled = 0
    for u in order:
        mid = filled + unit_size[u] / 2.0
        unit_split[u] = min(int(np.searchsorted(bounds, mid, side="right")), len(sizes) - 1)
        filled += unit_size[u]
    return unit_split[unit_of]


# ---------------------------------------------------------------------------
# planted-feature generator


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a dataset whose label signal lives in known channels.

    The backbone's first conv layer has one detector per input channel;
    detector ``j`` reads only input channel ``j``.  A positive image (with
    probability ``presence_positive``) gets one bright patch in the input
    channel of a uniformly chosen informative detector, so each informative
    channel explains its own share of the positives.  Negatives get such a
    patch with probability ``presence_negative``.  Every channel sees the same
    pixel noise, which is the only thing blurring the classes by default.
    """
    image_size: int = 32
    plan: tuple = (8, 8, "P", 8, 8, "P", 16, 16)
    informative: tuple = (0, 1)
    noise_level: float = 0.1
    n_samples: int = 400
    positive_fraction: float = 0.5
    split_fractions: tuple = DEFAULT_FRACTIONS
    amplitude: float = 1.0
    presence_positive: float = 1.0
    presence_negative: float = 0.0
    patch_fraction: tuple = (0.25, 0.5)
    detection_threshold: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "plan", tuple(p if p in (ng.POOL, "M") else int(p) for p in self.plan))
        object.__setattr__(self, "informative", tuple(int(i) for i in self.informative))
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        object.__setattr__(self, "patch_fraction", tuple(float(f) for f in self.patch_fraction))
        widths = [p for p in self.plan if p not in (ng.POOL, "M")]
        if not widths:
            raise ConfigError("plan needs at least one conv layer", "plan")
        if len(set(self.informative)) != len(self.informative) or \
                any(not 0 <= i < widths[0] for i in self.informative):
            raise ConfigError(f"informative channels must be distinct indices below {widths[0]}",
                              "informative")
        if self.noise_level < 0:
            raise ConfigError("must be >= 0", "noise_level")
        if self.n_samples < 2:
            raise ConfigError("must be >= 2", "n_samples")
        if not 0 < self.positive_fraction < 1:
            raise ConfigError("must be in (0, 1)", "positive_fraction")
        split_sizes(1, self.split_fractions)
        lo, hi = self.patch_fraction
        if not 0 < lo <= hi <= 1:
            raise ConfigError("must satisfy 0 < low <= high <= 1", "patch_fraction")
        size = self.image_size
        for p in self.plan:
            if p in (ng.POOL, "M"):
                if size % 2:
                    raise ConfigError("pools must see even spatial extents", "plan")
                size //= 2

    @property
    def channels(self):
        return next(p for p in self.plan if p not in (ng.POOL, "M"))

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))


def _planted_backbone(spec, rng, dtype):
    c0 = spec.channels
    layers = []
    informative = []
    current = set(spec.informative)
    prev = c0
    first = True
    for item in spec.plan:
        if item in (ng.POOL, "M"):
            layers.append(ng.MaxPool())
            continue
        width = int(item)
        kernel = np.zeros((3, 3, prev, width))
        bias = np.zeros(width)
        if first:
            for j in range(width):
                pattern = np.abs(rng.standard_normal((3, 3))) + 0.1
                kernel[:, :, j, j] = pattern / np.linalg.norm(pattern)
            # unit-norm detectors see noise with std = noise_level
            bias[:] = -spec.detection_threshold * spec.noise_level
            first = False
        else:
            for j in range(width):
                src = j % prev
                kernel[:, :, src, j] = 0.1 * rng.uniform(0, 1, (3, 3))
                kernel[1, 1, src, j] = 1.0
            current = {j for j in range(width) if j % prev in current}
        informative.append(tuple(sorted(current)))
        layers.append(ng.Conv(kernel.astype(dtype), bias.astype(dtype), frozen=True))
        prev = width
    layers.append(ng.GAP())
    layers.append(ng.init_dense(rng, prev, 1, dtype))
    size = spec.image_size
    model = ng.NetworkModel(tuple(layers), (size, size, c0),
                            {"iteration": 0, "provenance": "planted"})
    return model, tuple(informative)


def generate_planted_dataset(spec: SyntheticSpec, seed=0, dtype=np.float32):
    """Return ``(dataset, frozen backbone model, informative channels per conv layer)``."""
    rng = np.random.default_rng(seed)
    model, informative = _planted_backbone(spec, rng, dtype)
    n, size, c = spec.n_samples, spec.image_size, spec.channels
    n_pos = int(round(n * spec.positive_fraction))
    labels = np.zeros(n, dtype=np.int8)
    labels[rng.permutation(n)[:n_pos]] = 1
    images = rng.standard_normal((n, size, size, c)) * spec.noise_level
    lo = max(1, int(round(spec.patch_fraction[0] * size)))
    hi = max(lo, int(round(spec.patch_fraction[1] * size)))
    informative_inputs = np.asarray(spec.informative, dtype=np.intp)
    for i in range(n):
        presence = spec.presence_positive if labels[i] else spec.presence_negative
        u, pick, side, fy, fx, gain = (rng.random(), rng.random(), rng.integers(lo, hi + 1),
                                       rng.random(), rng.random(), rng.uniform(0.75, 1.25))
        if u >= presence or informative_inputs.size == 0:
            continue
        j = informative_inputs[min(int(pick * informative_inputs.size), informative_inputs.size - 1)]
        side = int(side)
        y0 = int(fy * (size - side + 1))
        x0 = int(fx * (size - side + 1))
        images[i, y0:y0 + side, x0:x0 + side, j] += spec.amplitude * gain
    splits = stratified_split(labels, spec.split_fractions, seed=seed + 1)
    data = DatasetContainer(images.astype(dtype), labels, splits, None,
                            {"source": "planted", "seed": int(seed), "spec": spec.to_dict(),
                             "informative": [list(k) for k in informative]})
    return data, model, informative


# ---------------------------------------------------------------------------
# import


def _match_channels(img, channels, name):
    c = img.shape[2]
    if c == channels:
        return img
    if c == 1:
        return np.repeat(img, channels, axis=2)
    if channels == 1:
        return img.mean(axis=2, keepdims=True)
    raise DataError(f"{name}: cannot map {c} channels to {channels}")


def import_dataset(path, fractions=DEFAULT_FRACTIONS, seed=0, size=None, channels=None,
                   manifest="labels.csv"):
    """Load a directory of PGM/PPM images listed in ``labels.csv``.

    Channel rule: grayscale images are replicated to the target channel count;
    RGB images are averaged to one channel when the target is 1.  The target
    defaults to the channel count of the first listed image.
    """
    root = Path(path)
    manifest_path = root / manifest
    if not manifest_path.exists():
        raise DataError(f"missing labels manifest {manifest_path}")
    with open(manifest_path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise DataError(f"{manifest_path} lists no samples")
    images, labels, patients = [], [], []
    for row in rows:
        name = row.get("filename")
        if not name:
            raise DataError(f"{manifest_path}: row without filename")
        file = root / name
        if not file.exists():
            raise DataError(f"manifest entry {name} has no image file")
        try:
            label = int(row["label"])
        except (KeyError, TypeError, ValueError):
            raise DataError(f"{name}: label must be 0 or 1") from None
        if label not in (0, 1):
            raise DataError(f"{name}: label must be 0 or 1, got {label}")
        img = read_pnm(file)
        if channels is None:
            channels = img.shape[2]
        img = _match_channels(img, channels, name)
        if size is not None:
            img = resize_bilinear(img, size, size)
        images.append(img)
        labels.append(label)
        patients.append((row.get("patient_id") or "").strip())
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"images have differing shapes {sorted(shapes)}; pass size= to resize")
    labels = np.array(labels, dtype=np.int8)
    have_groups = all(patients)
    groups = None
    if have_groups:
        groups = np.array(patients)
        for pid in np.unique(groups):
            if len(set(labels[groups == pid])) > 1:
                warnings.warn(f"patient {pid} appears with conflicting labels; samples kept")
    splits = stratified_split(labels, fractions, seed=seed, groups=groups)
    return DatasetContainer(np.stack(images).astype(np.float32), labels, splits,
                            groups, {"source": str(root), "seed": int(seed)})
