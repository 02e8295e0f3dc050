"""Gaussian and naive multi-scale image pyramids.

Images are ``H x W x C`` float arrays with values in [0, 1]. Pyramids are
ordered coarse to fine; the finest level has shortest side ``base_shortest_side``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

BINOMIAL_5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
GAUSSIAN_KERNEL = np.outer(BINOMIAL_5, BINOMIAL_5)  # the 5x5 kernel [1 4 6 4 1]^T [1 4 6 4 1] / 256

MIN_COARSE_SIDE = 8


@dataclass
class ImagePyramid:
    levels: list
    base_shortest_side: int
    kind: str

    @property
    def scales(self) -> list[int]:
        return [min(level.shape[:2]) for level in self.levels]

    def level(self, scale: int) -> np.ndarray:
        for img in self.levels:
            if min(img.shape[:2]) == scale:
                return img
        raise KeyError(f"no level with shortest side {scale}; have {self.scales}")


def _as_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an H x W x C image, got shape {img.shape}")
    return img


# -- resizing -----------------------------------------------------------------

def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    return np.where(t <= 1, (a + 2) * t3 - (a + 3) * t2 + 1,
                    np.where(t < 2, a * t3 - 5 * a * t2 + 8 * a * t - 4 * a, 0.0))


def _resize_axis(img: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    in_len = img.shape[axis]
    if in_len == out_len:
        return img
    # pixel-index anchored mapping: output pixel i samples input position i * in/out
    pos = np.arange(out_len) * (in_len / out_len)
    base = np.floor(pos).astype(int)
    frac = pos - base
    taps = np.arange(-1, 3)
    idx = np.clip(base[:, None] + taps[None, :], 0, in_len - 1)
    weights = _cubic(frac[:, None] - taps[None, :])
    moved = np.moveaxis(img, axis, 0)
    out = np.einsum("ok,ok...->o...", weights, moved[idx])
    return np.moveaxis(out, 0, axis)


def resize(img, height: int, width: int) -> np.ndarray:
    """Separable bicubic (Keys, a = -0.5) resize without prefiltering, clamped to [0, 1]."""
    img = _as_image(img)
    if (height, width) == img.shape[:2]:
        return img
    out = _resize_axis(_resize_axis(img, height, 0), width, 1)
    return np.clip(out, 0.0, 1.0)


def resize_shortest_side(img, target: int) -> np.ndarray:
    """Resize so the shorter side equals ``target``, keeping the aspect ratio."""
    if target < 1:
        raise ValueError(f"target side must be >= 1, got {target}")
    img = _as_image(img)
    h, w = img.shape[:2]
    if min(h, w) == target:
        return img
    if h <= w:
        return resize(img, target, max(target, int(round(w * target / h))))
    return resize(img, max(target, int(round(h * target / w))), target)


# -- smoothing and decimation -------------------------------------------------

def _smooth_axis(img: np.ndarray, axis: int) -> np.ndarray:
    n = img.shape[axis]
    pad = [(0, 0)] * img.ndim
    pad[axis] = (2, 2)
    mode = "reflect" if n > 2 else "symmetric"
    p = np.pad(img, pad, mode=mode)
    out = np.zeros_like(img)
    for k, wk in enumerate(BINOMIAL_5):
        sl = [slice(None)] * img.ndim
        sl[axis] = slice(k, k + n)
        out += wk * p[tuple(sl)]
    return out


def gaussian_smooth(img) -> np.ndarray:
    """Convolve every channel with the 5x5 binomial kernel, mirror-reflected borders."""
    img = _as_image(img)
    return _smooth_axis(_smooth_axis(img, 0), 1)


def downsample2(img) -> np.ndarray:
    """Keep even-indexed rows and columns (output ``ceil(H/2) x ceil(W/2)``)."""
    img = _as_image(img)
    if min(img.shape[:2]) < 2:
        raise ValueError(f"cannot halve an image with a 1-pixel side: {img.shape[:2]}")
    return img[::2, ::2]


def _check_levels(levels: int, base: int) -> None:
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    step = 2 ** (levels - 1)
    if base % step or base // step < MIN_COARSE_SIDE:
        raise ValueError(f"base side {base} must be a multiple of {step} with "
                         f"coarsest side >= {MIN_COARSE_SIDE}")


def build_gaussian_pyramid(img, levels: int, base_shortest_side: int) -> ImagePyramid:
    _check_levels(levels, base_shortest_side)
    current = resize_shortest_side(img, base_shortest_side)
    out = [current]
    for _ in range(levels - 1):
        current = downsample2(gaussian_smooth(current))
        out.append(current)
    return ImagePyramid(out[::-1], base_shortest_side, "gaussian")


def build_naive_pyramid(img, levels: int, base_shortest_side: int) -> ImagePyramid:
    """Each level resized straight from ``img``, no low-pass filtering."""
    _check_levels(levels, base_shortest_side)
    out = [resize_shortest_side(img, base_shortest_side >> k) for k in range(levels)]
    return ImagePyramid(out[::-1], base_shortest_side, "naive")


def build_pyramid(img, levels: int, base_shortest_side: int, kind: str = "gaussian"):
    if kind == "gaussian":
        return build_gaussian_pyramid(img, levels, base_shortest_side)
    if kind == "naive":
        return build_naive_pyramid(img, levels, base_shortest_side)
    raise ValueError(f"unknown pyramid kind {kind!r}")


def scale_set(levels: int, base_shortest_side: int) -> list[int]:
    _check_levels(levels, base_shortest_side)
    return [base_shortest_side >> k for k in range(levels)][::-1]


# -- PNG I/O ------------------------------------------------------------------

def read_png(path) -> np.ndarray:
    """Decode to float64 in [0, 1]; gray stays 1 channel, everything else becomes RGB."""
    with PILImage.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)[:, :, None]
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img) -> np.ndarray:
    img = _as_image(img)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(img, path) -> None:
    arr = to_uint8(img)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if arr.shape[2] == 1:
        PILImage.fromarray(arr[:, :, 0]).save(path)
    else:
        PILImage.fromarray(arr).save(path)
