"""Guided backpropagation saliency maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .network import Network
from .pyramid import write_png


@dataclass
class SaliencyMap:
    values: np.ndarray  # H x W x C gradient w.r.t. the input image
    target_class: int
    scale: int | None = None


def guided_backprop(net: Network, img: np.ndarray, target_class: int,
                    guided: bool = True, injection=None, trace=None) -> SaliencyMap:
    """Gradient of the target class score w.r.t. ``img`` (H x W x C).

    A one-hot vector for ``target_class`` is injected at the pooled class
    scores (before the softmax) and propagated back in eval mode. With
    ``guided`` each ReLU passes gradient only where both its input and the
    incoming gradient are positive. ``injection`` overrides the one-hot vector.
    """
    k = net.num_classes
    if not 0 <= target_class < k:
        raise ValueError(f"target class {target_class} outside [0, {k})")
    x = T.as_tensor(np.transpose(img, (2, 0, 1))[None])
    logits, cache = net.forward(x, training=False)
    if injection is None:
        injection = np.zeros((1, k), dtype=logits.dtype)
        injection[0, target_class] = 1
    else:
        injection = np.asarray(injection, dtype=logits.dtype).reshape(1, k)
    _, grad = net.backward(cache, injection, guided=guided, need_params=False, trace=trace)
    return SaliencyMap(np.transpose(grad[0], (1, 2, 0)).astype(np.float64), target_class,
                       min(img.shape[:2]))


def saliency_intensity(smap: SaliencyMap) -> np.ndarray:
    """Channel-summed absolute gradient rescaled linearly so the maximum is 1."""
    mag = np.abs(smap.values).sum(axis=2)
    top = mag.max()
    return mag / top if top > 0 else np.zeros_like(mag)


def render_saliency(smap: SaliencyMap, path) -> None:
    """Write the map as a grayscale PNG (0 = no gradient, 255 = the largest)."""
    write_png(saliency_intensity(smap), path)


def mass_ratio(smap: SaliencyMap, mask: np.ndarray) -> float:
    """Mean |saliency| inside ``mask`` divided by the mean outside it."""
    mag = np.abs(smap.values).sum(axis=2)
    mask = np.asarray(mask, dtype=bool)
    inside, outside = mag[mask].mean(), mag[~mask].mean()
    return float(inside / outside) if outside > 0 else float("inf")
