"""Synthetic scenes with exactly known ground truth.

Used by the tests, the benchmark and the CLI demos. Every generator takes a
``seed`` and is deterministic.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy import ndimage

from spct.imagecore import Rect


def natural_image(h: int, w: int, seed: int = 0, beta: float = 2.0) -> np.ndarray:
    """uint8 image with a ``1/f^(beta/2)`` amplitude spectrum (natural-image statistics)."""
    rng = np.random.default_rng(seed)
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f = np.hypot(fx, fy)
    f[0, 0] = 1.0
    spec = (rng.standard_normal(f.shape) + 1j * rng.standard_normal(f.shape)) / f ** (beta / 2)
    spec[0, 0] = 0
    img = np.fft.irfft2(spec, s=(h, w))
    img = (img - img.min()) / max(img.max() - img.min(), 1e-12)
    return np.round(img * 255).astype(np.uint8)


def random_bins(h: int, w: int, bins: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, bins, size=(h, w), dtype=np.int32)


def translating_square(
    frames: int = 9, size: int = 64, side: int = 20, step: int = 1, fg: float = 200.0, bg: float = 50.0
) -> tuple[np.ndarray, list[Rect]]:
    """Bright square moving ``step`` px per frame along +x; returns ``(stack, boxes)``."""
    out = np.full((frames, size, size), bg)
    y0 = (size - side) // 2
    x0 = (size - side) // 2 - (frames // 2) * step
    boxes = []
    for t in range(frames):
        x = x0 + t * step
        out[t, y0 : y0 + side, x : x + side] = fg
        boxes.append(Rect(x, y0, side, side))
    return out, boxes


class ParallaxScene(NamedTuple):
    mask: np.ndarray
    depth: np.ndarray
    true_boxes: list[Rect]
    parallax_boxes: list[Rect]


def parallax_scene(size: int = 200, n_true: int = 4, n_parallax: int = 8, seed: int = 0) -> ParallaxScene:
    """Motion mask with true blobs on the ground (0 m) and parallax blobs on a 30 m building."""
    rng = np.random.default_rng(seed)
    depth = np.zeros((size, size))
    bx0, bx1 = size // 2, size - 10
    depth[10 : size - 10, bx0:bx1] = 30.0
    depth[0, 0] = np.nan  # one nodata pixel far from every blob
    mask = np.zeros((size, size), dtype=bool)
    true_boxes, par_boxes = [], []

    def place(n, xlo, xhi, store):
        while len(store) < n:
            w, h = rng.integers(6, 12, size=2)
            x = int(rng.integers(xlo, xhi - w))
            y = int(rng.integers(15, size - 15 - h))
            r = Rect(x, y, int(w), int(h))
            grown = np.zeros_like(mask)
            grown[max(0, r.y - 3) : r.y2 + 3, max(0, r.x - 3) : r.x2 + 3] = True
            if (grown & mask).any():
                continue
            mask[r.y : r.y2, r.x : r.x2] = True
            store.append(r)

    place(n_true, 10, bx0 - 10, true_boxes)
    place(n_parallax, bx0 + 5, bx1 - 5, par_boxes)
    return ParallaxScene(mask, depth, true_boxes, par_boxes)


class RingFixture(NamedTuple):
    mask: np.ndarray
    g: np.ndarray
    valley_radius: float


def ring_fixture(size: int = 96, radius: float = 30.0, valley: float = 26.0, width: float = 1.5) -> RingFixture:
    """Disk mask of ``radius`` and an edge indicator with a sharp circular valley at ``valley``."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot(xx - c, yy - c)
    g = 1.0 - 0.98 * np.exp(-((r - valley) ** 2) / (2 * width**2))
    return RingFixture(r <= radius, g, valley)


class TrackingScene(NamedTuple):
    frames: list[np.ndarray]
    boxes: list[Rect]
    occluded: list[bool]


def _texture(h, w, rng, lo, hi):
    t = ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.5)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    return lo + t * (hi - lo)


def tracking_scene(
    frames: int = 40,
    size: tuple[int, int] = (160, 120),
    target: tuple[int, int] = (16, 16),
    start: tuple[int, int] = (20, 52),
    velocity: tuple[int, int] = (2, 0),
    occlude: tuple[int, int] | None = None,
    seed: int = 0,
) -> TrackingScene:
    """Colour sequence of a textured red target moving at constant integer velocity.

    ``occlude=(first, count)`` blanks the target (background shows through)
    on ``count`` frames; those ground-truth entries are flagged occluded.
    """
    rng = np.random.default_rng(seed)
    W, H = size
    tw, th = target
    bg = np.empty((H, W, 3))
    bg[..., 0] = _texture(H, W, rng, 30, 100)
    bg[..., 1] = _texture(H, W, rng, 50, 120)
    bg[..., 2] = _texture(H, W, rng, 40, 110)
    obj = np.empty((th, tw, 3))
    obj[..., 0] = _texture(th, tw, rng, 200, 255)
    obj[..., 1] = _texture(th, tw, rng, 120, 200)
    obj[..., 2] = _texture(th, tw, rng, 20, 80)
    out, boxes, occ = [], [], []
    for t in range(frames):
        x = start[0] + t * velocity[0]
        y = start[1] + t * velocity[1]
        r = Rect(x, y, tw, th)
        hidden = occlude is not None and occlude[0] <= t < occlude[0] + occlude[1]
        img = bg.copy()
        if not hidden:
            img[r.y : r.y2, r.x : r.x2] = obj
        out.append(np.round(img).astype(np.uint8))
        boxes.append(r)
        occ.append(hidden)
    return TrackingScene(out, boxes, occ)
