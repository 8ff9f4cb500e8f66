"""Likelihood maps, their fusion, and peak-rank scoring.

Every map is a float64 array in ``[0, 1]``. Sliding-window maps (NCC,
histogram distance, PHoG) are "valid" mode: entry ``[v, u]`` scores the
template-sized window whose top-left corner is ``(u, v)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from spct import integral
from spct._jit import njit, select
from spct.errors import ContractError
from spct.features import PHoG, PHoGField
from spct.imagecore import Rect, check_color, check_gray
from spct.integral import IntegralHistogramTensor

COLOR_BINS = 32
_COLOR_SHIFT = 3  # 256 / 32


# --- NCC ---------------------------------------------------------------------


@njit
def _xcorr_nb(f, t):
    th, tw = t.shape
    oh, ow = f.shape[0] - th + 1, f.shape[1] - tw + 1
    out = np.zeros((oh, ow))
    for v in range(oh):
        for u in range(ow):
            acc = 0.0
            for j in range(th):
                for i in range(tw):
                    acc += f[v + j, u + i] * t[j, i]
            out[v, u] = acc
    return out


def _xcorr_np(f, t):
    return np.einsum("vuji,ji->vu", sliding_window_view(f, t.shape), t)


def _box_sum(a: np.ndarray, kh: int, kw: int) -> np.ndarray:
    s = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    s[1:, 1:] = a.cumsum(0).cumsum(1)
    return s[kh:, kw:] - s[:-kh, kw:] - s[kh:, :-kw] + s[:-kh, :-kw]


def box_mean(a, kh: int, kw: int) -> np.ndarray:
    """Valid-mode mean over every ``kh x kw`` window."""
    a = np.asarray(a, dtype=np.float64)
    if not (1 <= kh <= a.shape[0] and 1 <= kw <= a.shape[1]):
        raise ContractError("window larger than the map")
    return _box_sum(a, kh, kw) / (kh * kw)


def ncc_raw(search, template, use_numba: bool | None = None) -> np.ndarray:
    """Normalised cross-correlation ``gamma`` in ``[-1, 1]``; ``nan`` where a variance is 0.

    Window means and energies come from running (integral-image) sums; the
    numerator correlates the search image with the zero-mean template.
    """
    f = check_gray(search).astype(np.float64)
    t = check_gray(template).astype(np.float64)
    th, tw = t.shape
    if th > f.shape[0] or tw > f.shape[1]:
        raise ContractError(f"template {tw}x{th} larger than search {f.shape[1]}x{f.shape[0]}")
    n = th * tw
    tz = t - t.mean()
    t_energy = float((tz * tz).sum())
    num = select(_xcorr_nb, _xcorr_np, use_numba)(f, tz)
    s1 = _box_sum(f, th, tw)
    s2 = _box_sum(f * f, th, tw)
    f_energy = np.maximum(s2 - s1 * s1 / n, 0.0)
    denom = np.sqrt(f_energy * t_energy)
    # relative tolerance: running sums leave rounding residue on flat patches
    scale = np.maximum(s2, 1.0)
    flat = (f_energy <= 1e-10 * scale) | (t_energy <= 1e-10 * max(float((t * t).sum()), 1.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(flat, np.nan, num / np.where(flat, 1.0, denom))
    return np.clip(gamma, -1.0, 1.0)


def ncc_map(search, template, use_numba: bool | None = None) -> np.ndarray:
    """NCC mapped to ``(gamma + 1) / 2``; 0.5 where either side has zero variance."""
    g = ncc_raw(search, template, use_numba)
    return np.where(np.isnan(g), 0.5, (g + 1.0) / 2.0)


def ncc_direct(search, template) -> np.ndarray:
    """Double-loop NCC with per-window means (test oracle), ``nan`` on flat windows."""
    f = np.asarray(search, dtype=np.float64)
    t = np.asarray(template, dtype=np.float64)
    th, tw = t.shape
    out = np.full((f.shape[0] - th + 1, f.shape[1] - tw + 1), np.nan)
    tz = t - t.mean()
    for v in range(out.shape[0]):
        for u in range(out.shape[1]):
            w = f[v : v + th, u : u + tw]
            wz = w - w.mean()
            d = np.sqrt((wz * wz).sum() * (tz * tz).sum())
            if d > 0:
                out[v, u] = (wz * tz).sum() / d
    return out


# --- colour ratio ------------------------------------------------------------


@dataclass(frozen=True)
class ColorModel:
    fg: np.ndarray
    bg: np.ndarray
    fg_area: int
    bg_area: int


def color_bins(img) -> np.ndarray:
    """Flat 32x32x32 bin index per pixel."""
    c = check_color(img).astype(np.int64) >> _COLOR_SHIFT
    return (c[..., 0] * COLOR_BINS + c[..., 1]) * COLOR_BINS + c[..., 2]


def color_histogram(img, mask=None) -> np.ndarray:
    idx = color_bins(img)
    sel = idx.ravel() if mask is None else idx[np.asarray(mask, dtype=bool)]
    return np.bincount(sel, minlength=COLOR_BINS**3).reshape(COLOR_BINS, COLOR_BINS, COLOR_BINS)


def model_fg_bg(img, fg: Rect, bg_margin: int) -> ColorModel:
    """Foreground histogram over ``fg``, background over the ring ``fg`` dilated by ``bg_margin``.

    The ring is clipped to the image.
    """
    img = check_color(img)
    h, w = img.shape[:2]
    fg = Rect(*fg)
    if not fg.inside(w, h):
        raise ContractError(f"foreground {tuple(fg)} outside the {w}x{h} image")
    if bg_margin < 0:
        raise ContractError("bg_margin must be >= 0")
    fmask = np.zeros((h, w), dtype=bool)
    fmask[fg.y : fg.y2, fg.x : fg.x2] = True
    outer = Rect(fg.x - bg_margin, fg.y - bg_margin, fg.w + 2 * bg_margin, fg.h + 2 * bg_margin).clip(w, h)
    bmask = np.zeros((h, w), dtype=bool)
    bmask[outer.y : outer.y2, outer.x : outer.x2] = True
    bmask &= ~fmask
    if not bmask.any():
        raise ContractError("background ring is empty")
    return ColorModel(color_histogram(img, fmask), color_histogram(img, bmask), int(fmask.sum()), int(bmask.sum()))


def color_ratio_map(img, model: ColorModel) -> np.ndarray:
    """Per-pixel ``H_fg / (H_fg + H_bg)`` at the pixel's colour bin; 0.5 if both are 0."""
    idx = color_bins(img)
    fg = model.fg.ravel()[idx].astype(np.float64)
    bg = model.bg.ravel()[idx].astype(np.float64)
    tot = fg + bg
    return np.where(tot > 0, fg / np.where(tot > 0, tot, 1.0), 0.5)


def blend_color_models(old: ColorModel, new: ColorModel, alpha: float) -> ColorModel:
    """Blend count tensors; the blend keeps the old areas scaled to the same total."""
    fg = alpha * new.fg + (1 - alpha) * old.fg
    bg = alpha * new.bg + (1 - alpha) * old.bg
    return ColorModel(fg, bg, old.fg_area, old.bg_area)


# --- histogram distance ------------------------------------------------------


def minkowski(h1, h2, p: float = 1.0) -> np.ndarray:
    d = np.abs(np.asarray(h1, dtype=np.float64) - np.asarray(h2, dtype=np.float64))
    return (d**p).sum(axis=-1) ** (1.0 / p)


def distance_to_likelihood(d, p: float = 1.0) -> np.ndarray:
    """``1 - d / 2**(1/p)``: 1 for identical distributions, 0 for disjoint ones."""
    return np.clip(1.0 - np.asarray(d) / 2.0 ** (1.0 / p), 0.0, 1.0)


def hist_distance_map(tensor: IntegralHistogramTensor, template_hist, kw: int, kh: int, p: float = 1.0) -> np.ndarray:
    """Sliding ``kw x kh`` histogram match against ``template_hist`` (normalised inside)."""
    if p < 1:
        raise ContractError("Minkowski order p must be >= 1")
    t = np.asarray(template_hist, dtype=np.float64)
    if t.shape != (tensor.bins,):
        raise ContractError("template histogram length differs from tensor bins")
    if t.sum() <= 0:
        raise ContractError("template histogram is empty")
    t = t / t.sum()
    local = integral.window_histograms(tensor, kw, kh).astype(np.float64)  # (b, ny, nx)
    local /= np.maximum(local.sum(axis=0, keepdims=True), 1e-300)
    d = minkowski(np.moveaxis(local, 0, -1), t, p)
    return distance_to_likelihood(d, p)


def hist_field_map(field: np.ndarray, template_hist, p: float = 1.0) -> np.ndarray:
    """Likelihood from a precomputed ``(ny, nx, b)`` field of normalised histograms."""
    t = np.asarray(template_hist, dtype=np.float64)
    t = t / t.sum()
    return distance_to_likelihood(minkowski(field, t, p), p)


# --- PHoG kernel -------------------------------------------------------------


def pyramid_match_kernel(x: PHoG, y: PHoG) -> float:
    """Weighted sum of per-level histogram intersections on the raw values."""
    _check_pair(x, y)
    L = x.levels
    k = np.minimum(x.level(0), y.level(0)).sum() / 2.0**L
    for l in range(1, L + 1):
        k += np.minimum(x.level(l), y.level(l)).sum() / 2.0 ** (L - l + 1)
    return float(k)


def normalize_levels(x: PHoG) -> PHoG:
    """Scale every pyramid level to unit mass (empty levels stay zero)."""
    parts = []
    for l in range(x.levels + 1):
        v = x.level(l)
        s = v.sum()
        parts.append(v / s if s > 0 else v)
    return PHoG(np.concatenate(parts), x.levels, x.bins)


def phog_kernel(x: PHoG, y: PHoG) -> float:
    """Pyramid match kernel on unit-mass levels, so ``phog_kernel(x, x) == 1`` for non-empty ``x``."""
    _check_pair(x, y)
    return min(1.0, pyramid_match_kernel(normalize_levels(x), normalize_levels(y)))


def _check_pair(x: PHoG, y: PHoG):
    if x.levels != y.levels or x.bins != y.bins:
        raise ContractError("PHoG descriptors differ in levels or bins")


def phog_map(field: PHoGField, template: PHoG) -> np.ndarray:
    """Kernel similarity of every chip in ``field`` to ``template``."""
    if field.levels != template.levels or field.bins != template.bins:
        raise ContractError("PHoG descriptors differ in levels or bins")
    L = field.levels
    t = normalize_levels(template)
    out = np.zeros(field.values.shape[:2])
    start = 0
    for l in range(L + 1):
        n = field.bins * 4**l
        v = field.values[..., start : start + n]
        s = v.sum(axis=-1, keepdims=True)
        v = np.where(s > 0, v / np.where(s > 0, s, 1.0), 0.0)
        inter = np.minimum(v, t.level(l)).sum(axis=-1)
        out += inter / (2.0**L if l == 0 else 2.0 ** (L - l + 1))
        start += n
    return np.clip(out, 0.0, 1.0)


# --- fusion & scoring --------------------------------------------------------


def fuse_maps(maps: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    """Convex per-pixel combination; equal weights when none are given."""
    if len(maps) == 0:
        raise ContractError("nothing to fuse")
    shape = np.shape(maps[0])
    if any(np.shape(m) != shape for m in maps):
        raise ContractError("likelihood maps differ in size")
    if weights is None:
        w = np.full(len(maps), 1.0 / len(maps))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(maps),) or np.any(w < 0) or w.sum() <= 0:
            raise ContractError("weights must be non-negative, one per map, not all zero")
        w = w / w.sum()
    out = np.zeros(shape)
    for m, wi in zip(maps, w):
        out += wi * np.asarray(m, dtype=np.float64)
    return np.clip(out, 0.0, 1.0)


class Peak(NamedTuple):
    x: int
    y: int
    height: float
    rank: int


def find_peaks(lmap, smooth: bool = True) -> list[Peak]:
    """Strict 8-neighbour maxima, highest first (ties keep raster order).

    A 3x3 mean pass first breaks up plateaus; heights are read from the
    smoothed map.
    """
    m = np.asarray(lmap, dtype=np.float64)
    if smooth:
        m = ndimage.uniform_filter(m, size=3, mode="nearest")
    p = np.pad(m, 1, mode="constant", constant_values=-np.inf)
    h, w = m.shape
    is_peak = np.ones((h, w), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy or dx:
                is_peak &= m > p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
    ys, xs = np.nonzero(is_peak)
    heights = m[ys, xs]
    order = np.argsort(-heights, kind="stable")
    return [Peak(int(xs[i]), int(ys[i]), float(heights[i]), r + 1) for r, i in enumerate(order)]


def score_map(lmap, gt: Rect, smooth: bool = True) -> int:
    """Rank of the best peak inside ``gt``; one past the peak count when none falls inside."""
    gt = Rect(*gt)
    m = np.asarray(lmap)
    if not gt.inside(m.shape[1], m.shape[0]):
        raise ContractError(f"ground truth {tuple(gt)} outside the map")
    peaks = find_peaks(m, smooth)
    for pk in peaks:
        if gt.x <= pk.x < gt.x2 and gt.y <= pk.y < gt.y2:
            return pk.rank
    return len(peaks) + 1


def subset_score(scores: Sequence[float | None]) -> float:
    """Mean rank over frames; ``None`` entries (occluded frames) are skipped."""
    vals = [s for s in scores if s is not None]
    if not vals:
        raise ContractError("no scored frames")
    return float(np.mean(vals))
