"""Gradient-weighted class activation maps and heat overlays.

Maps are computed from pre-softmax class scores: channel weights are the
spatial mean of the score gradient at the target feature map, the raw map
is the ReLU of the weighted channel sum, and the result is bilinearly
upsampled to the input size and normalized by its own maximum (an
all-zero map stays zero). Extraction is read-only with respect to the
model parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import resize_image, save_pixels
from .networks import Classifier


@dataclass(frozen=True)
class ActivationMap:
    """A [0, 1] heat grid aligned to the input image."""

    values: np.ndarray
    class_index: int
    target_layer: str

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values))


def gradcam(
    clf: Classifier,
    image: np.ndarray,
    class_index: int,
    target_layer: str | None = None,
) -> ActivationMap:
    """Extract the activation map of ``class_index`` for one image.

    ``target_layer`` names an encoder layer whose output is spatial; the
    default is the final feature map, the one feeding global average
    pooling.
    """
    if class_index not in (0, 1):
        raise ValueError(f"class_index must be 0 or 1, got {class_index}")
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W[, 3]) image, got shape {image.shape}")
    h, w = image.shape[:2]
    dtype = clf.encoder.layers[0].params["w"].dtype
    x = image[None].astype(dtype)

    if target_layer is None:
        idx = len(clf.encoder.layers) - 1
    else:
        idx = clf.encoder.index_of(target_layer)
    layer_name = clf.encoder.layers[idx].name

    outs = clf.encoder.forward_collect(x, training=False)
    feature_map = outs[idx]
    if feature_map.ndim != 4:
        raise ValueError(
            f"target layer {layer_name!r} output is not spatial: shape {feature_map.shape}"
        )
    pooled = clf.gap.forward(outs[-1], training=False)
    clf.dense.forward(pooled, training=False)

    seed = np.zeros((1, len(clf.class_order)), dtype=dtype)
    seed[0, class_index] = 1.0
    g = clf.dense.backward(seed)
    g = clf.gap.backward(g)
    d_feature = clf.encoder.backward_to(g, idx)

    channel_weights = d_feature.mean(axis=(1, 2))  # (1, C)
    raw = np.maximum((feature_map * channel_weights[:, None, None, :]).sum(axis=-1), 0.0)[0]
    up = resize_image(raw.astype(np.float64), h, w)
    peak = up.max()
    values = up / peak if peak > 0 else np.zeros_like(up)
    return ActivationMap(values=values, class_index=class_index, target_layer=layer_name)


def _heat_rgb(v: np.ndarray) -> np.ndarray:
    """Blue-to-red piecewise-linear colormap on [0, 1], shape (..., 3)."""
    r = np.clip(np.minimum(4.0 * v - 1.5, -4.0 * v + 4.5), 0.0, 1.0)
    g = np.clip(np.minimum(4.0 * v - 0.5, -4.0 * v + 3.5), 0.0, 1.0)
    b = np.clip(np.minimum(4.0 * v + 0.5, -4.0 * v + 2.5), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def overlay(image: np.ndarray, amap: ActivationMap, output_path: str | Path) -> Path:
    """Blend the heat layer over the grayscale image and write a PNG.

    Per-pixel opacity is ``0.4 * map``, so zero-heat regions show the
    untouched image. Output bytes are deterministic for fixed inputs.
    """
    image = np.asarray(image, dtype=np.float64)
    values = np.asarray(amap.values, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.shape[:2] != values.shape:
        raise ValueError(
            f"image {image.shape[:2]} and map {values.shape} shapes differ"
        )
    alpha = 0.4 * values[..., None]
    blended = image * (1.0 - alpha) + _heat_rgb(values) * alpha
    return save_pixels(blended, output_path)
