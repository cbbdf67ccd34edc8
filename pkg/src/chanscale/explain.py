"""Grad-CAM heatmaps from the last conv block."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import netgraph as ng
from . import tensor as T
from .errors import ContractError, ModelError
from .imageio import overlay, resize_bilinear, write_pgm, write_ppm


@dataclass(frozen=True, eq=False)
class Heatmap:
    values: np.ndarray                  # final-conv resolution, in [0, 1]
    upsampled: np.ndarray | None = None  # input resolution
    weights: np.ndarray | None = None    # per-channel alpha


def grad_cam(model, image, target=0, *, upsample=True):
    """Heatmap ``relu(sum_c alpha_c A_c)`` normalized to max 1.

    ``A`` is the output of the last conv block and ``alpha_c`` the spatial
    mean of the gradient of logit ``target`` with respect to ``A_c``.
    """
    if not model.convs:
        raise ModelError("grad_cam needs at least one conv layer")
    n_out = model.head.weight.shape[1]
    if not 0 <= target < n_out:
        raise ContractError(f"target index {target} out of range for {n_out} outputs")
    image = np.asarray(image, dtype=model.dtype)
    if image.ndim != 3:
        raise ContractError(f"grad_cam takes one (h, w, c) image, got shape {image.shape}")
    tape = T.GradientTape()
    logits = ng.forward(model, image[None], tape, watch_last_conv=True)
    logit = tape.column(tape.column(logits, target), 0)
    grads = T.backprop(tape, logit, activations=["last_conv"])
    activation = tape.activations["last_conv"].value[0]
    alpha = grads["last_conv"][0].mean(axis=(0, 1))
    cam = T.relu(np.tensordot(activation, alpha, axes=([2], [0])))
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    up = resize_bilinear(cam, *model.input_shape[:2]) if upsample else None
    if up is not None:
        up = np.clip(up, 0, 1)
    return Heatmap(cam, up, alpha)


def save_heatmap(heatmap, stem, image=None):
    """Write ``stem.pgm`` (and ``stem_overlay.ppm`` when ``image`` is given)."""
    stem = Path(stem)
    values = heatmap.upsampled if heatmap.upsampled is not None else heatmap.values
    paths = [write_pgm(stem.with_suffix(".pgm"), values)]
    if image is not None:
        img = np.asarray(image, dtype=np.float64)
        lo, hi = img.min(), img.max()
        img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
        paths.append(write_ppm(stem.with_name(stem.name + "_overlay.ppm"), overlay(img, values)))
    return paths
