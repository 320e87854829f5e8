"""Probabilistic image augmentation.

Each sub-operation fires independently with its own probability. All
outputs keep the input shape and are clamped to [0, 1]; geometric ops
sample with bilinear interpolation and replicate edge pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from ..errors import ConfigError
from .io import resize

OPS = ("flip", "color_jitter", "translate", "rotate", "scale", "contrast",
       "random_erase", "cutout", "patch")


@dataclass(frozen=True)
class AugmentConfig:
    flip: float = 0.1
    color_jitter: float = 0.1
    translate: float = 0.1
    rotate: float = 0.1
    scale: float = 0.1
    contrast: float = 0.1
    random_erase: float = 0.1
    cutout: float = 0.1
    patch: float = 0.1
    jitter_range: tuple = (0.8, 1.2)
    translate_frac: float = 0.1
    rotate_deg: float = 10.0
    scale_range: tuple = (0.9, 1.1)
    contrast_range: tuple = (0.8, 1.2)
    erase_area: tuple = (0.02, 0.2)
    erase_aspect: tuple = (0.3, 3.3)
    cutout_frac: float = 0.25
    patch_frac: tuple = (0.2, 0.4)

    def __post_init__(self):
        for name in OPS:
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probability {name}={p} outside [0, 1]")

    @classmethod
    def uniform(cls, p, **kw):
        return cls(**{name: p for name in OPS}, **kw)

    def with_probs(self, **probs):
        return replace(self, **probs)

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def hflip(img):
    return img[:, :, ::-1].copy()


def _sample(img, sy, sx):
    """Bilinear sampling at float source coordinates, clamped to the border."""
    _, h, w = img.shape
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty, tx = sy - y0, sx - x0
    top = img[:, y0, x0] + (img[:, y0, x1] - img[:, y0, x0]) * tx
    bot = img[:, y1, x0] + (img[:, y1, x1] - img[:, y1, x0]) * tx
    return top + (bot - top) * ty


def warp(img, matrix, shift=(0.0, 0.0)):
    """Output pixel p takes the value at ``matrix @ (p - c) + c - shift``,
    c being the image centre; coordinates are (row, col)."""
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    dy, dx = yy - cy, xx - cx
    sy = matrix[0][0] * dy + matrix[0][1] * dx + cy - shift[0]
    sx = matrix[1][0] * dy + matrix[1][1] * dx + cx - shift[1]
    return _sample(img, sy, sx)


def translate(img, ty, tx):
    return warp(img, ((1.0, 0.0), (0.0, 1.0)), (ty, tx))


def rotate(img, degrees):
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    return warp(img, ((c, -s), (s, c)))


def zoom(img, factor):
    return warp(img, ((1.0 / factor, 0.0), (0.0, 1.0 / factor)))


def erase(img, y, x, eh, ew, fill):
    out = img.copy()
    out[:, y:y + eh, x:x + ew] = np.asarray(fill, dtype=float).reshape(-1, 1, 1)
    return out


def augment(img, config, rng, pool=None):
    """Apply the augmentation pipeline to a 3×H×W image in [0, 1].

    ``pool`` is an optional sequence of other training images used as the
    source for the ``patch`` op; without it that op is skipped.
    """
    out = np.asarray(img, dtype=np.float64).copy()
    _, h, w = out.shape
    fire = {name: rng.random() < getattr(config, name) for name in OPS}

    if fire["flip"]:
        out = hflip(out)
    if fire["color_jitter"]:
        gain = rng.uniform(*config.jitter_range, size=3)
        out = out * gain[:, None, None]
    if fire["translate"]:
        ty = rng.uniform(-config.translate_frac, config.translate_frac) * h
        tx = rng.uniform(-config.translate_frac, config.translate_frac) * w
        out = translate(out, ty, tx)
    if fire["rotate"]:
        out = rotate(out, rng.uniform(-config.rotate_deg, config.rotate_deg))
    if fire["scale"]:
        out = zoom(out, rng.uniform(*config.scale_range))
    if fire["contrast"]:
        f = rng.uniform(*config.contrast_range)
        mean = out.mean()
        out = (out - mean) * f + mean
    out = np.clip(out, 0.0, 1.0)
    if fire["random_erase"]:
        area = rng.uniform(*config.erase_area) * h * w
        aspect = np.exp(rng.uniform(*np.log(config.erase_aspect)))
        eh = int(min(h, max(1, round(np.sqrt(area * aspect)))))
        ew = int(min(w, max(1, round(np.sqrt(area / aspect)))))
        y = int(rng.integers(0, h - eh + 1))
        x = int(rng.integers(0, w - ew + 1))
        out = erase(out, y, x, eh, ew, out.mean(axis=(1, 2)))
    if fire["cutout"]:
        side = max(1, int(round(config.cutout_frac * min(h, w))))
        cy = int(rng.integers(0, h))
        cx = int(rng.integers(0, w))
        y0, x0 = max(0, cy - side // 2), max(0, cx - side // 2)
        out = erase(out, y0, x0, min(side, h - y0), min(side, w - x0), (0.0, 0.0, 0.0))
    if fire["patch"] and pool:
        src = np.asarray(pool[int(rng.integers(0, len(pool)))], dtype=np.float64)
        if src.shape != out.shape:
            src = resize(src, h, w)
        ph = max(1, int(round(rng.uniform(*config.patch_frac) * h)))
        pw = max(1, int(round(rng.uniform(*config.patch_frac) * w)))
        sy, sx = int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1))
        dy, dx = int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1))
        out = out.copy()
        out[:, dy:dy + ph, dx:dx + pw] = src[:, sy:sy + ph, sx:sx + pw]
    return np.clip(out, 0.0, 1.0)


def image_rng(seed, index):
    """Independent generator for one image, derived from (seed, index)."""
    return np.random.default_rng([int(seed), int(index)])
