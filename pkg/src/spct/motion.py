"""Moving-object detection.

Temporal-median backgrounds (integral-histogram and sorting paths), background
subtraction with morphology and blob labelling, the flux-tensor trace, depth
based suppression of tall static structures, and geodesic-active-contour mask
refinement.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from spct import integral
from spct._parallel import map_ordered
from spct.errors import ContractError, DivergenceError, ImageFormatError
from spct.imagecore import Rect, bin_centers, check_gray, quantize
from spct.integral import IntegralHistogramTensor, ScanSchedule

EIGHT = np.ones((3, 3), dtype=bool)
DEFAULT_H_TAU = 20.0


def _stack(frames) -> np.ndarray:
    arr = np.asarray([check_gray(f) for f in frames]) if not isinstance(frames, np.ndarray) else frames
    if arr.ndim != 3 or arr.shape[0] < 1:
        raise ContractError("expected a non-empty sequence of equally sized gray frames")
    return arr


def _check_window(frames: np.ndarray):
    if frames.shape[0] % 2 == 0:
        raise ContractError(f"temporal window must have odd length, got {frames.shape[0]}")


# --- temporal median ---------------------------------------------------------


def median_background_sort(frames) -> np.ndarray:
    """Exact per-pixel temporal median of an odd-length window."""
    arr = _stack(frames)
    _check_window(arr)
    return np.sort(arr, axis=0)[(arr.shape[0] - 1) // 2]


def _check_kernel(kernel, w, h):
    kw, kh = kernel
    if kw < 1 or kh < 1 or kw % 2 == 0 or kh % 2 == 0:
        raise ContractError("median kernel sides must be odd and positive")
    if kw > w or kh > h:
        raise ContractError(f"kernel {kw}x{kh} exceeds the {w}x{h} frame")


def median_from_tensor(
    joint: IntegralHistogramTensor, kernel: tuple[int, int], frames: int, lo=0.0, hi=256.0, rows_per_chunk: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel median bin and its centre from a joint integral histogram.

    The spatial window is centred on the pixel and clipped at the borders.
    The median is the smallest bin whose cumulative count reaches
    ``ceil(count / 2)``.
    """
    kw, kh = kernel
    h, w, b = joint.height, joint.width, joint.bins
    xs = np.arange(w)
    x0 = np.clip(xs - kw // 2, 0, w)
    x1 = np.clip(xs + kw // 2 + 1, 0, w)
    out = np.empty((h, w), dtype=np.int64)
    for r0 in range(0, h, rows_per_chunk):
        ys = np.arange(r0, min(h, r0 + rows_per_chunk))
        y0 = np.clip(ys - kh // 2, 0, h)
        y1 = np.clip(ys + kh // 2 + 1, 0, h)
        gx0, gy0 = np.meshgrid(x0, y0)
        gx1, gy1 = np.meshgrid(x1, y1)
        hist = integral.rect_histograms(joint, gx0.ravel(), gy0.ravel(), gx1.ravel(), gy1.ravel())
        cdf = np.cumsum(hist, axis=1)
        need = (cdf[:, -1] + 1) // 2
        out[ys[0] : ys[-1] + 1] = np.argmax(cdf >= need[:, None], axis=1).reshape(len(ys), w)
    return out, bin_centers(b, lo, hi)[out]


def frame_tensor(frame, bins: int, schedule: ScanSchedule | None = None, lo=0.0, hi=256.0) -> np.ndarray:
    """Writable int64 integral histogram of one quantised frame."""
    return integral.build(quantize(frame, bins, lo, hi), schedule).signed().copy()


def median_background_ih(
    frames, bins: int = 256, kernel: tuple[int, int] = (1, 1), schedule: ScanSchedule | None = None, threads: int = 1
) -> np.ndarray:
    """Spatio-temporal median through a joint integral histogram (bin centres).

    Per-frame tensors are built concurrently, then summed into the joint
    tensor over the whole window.
    """
    arr = _stack(frames)
    _check_window(arr)
    _check_kernel(kernel, arr.shape[2], arr.shape[1])
    tensors = map_ordered(lambda f: frame_tensor(f, bins, schedule), list(arr), threads)
    joint = np.zeros_like(tensors[0])
    for t in tensors:
        joint += t
    return median_from_tensor(IntegralHistogramTensor(joint), kernel, arr.shape[0])[1]


class MedianBackgroundIH:
    """Sliding temporal window with an incrementally maintained joint tensor.

    ``push`` adds the newest frame's tensor and, once the window is full,
    subtracts the tensor of the frame that falls out.
    """

    def __init__(self, length: int, bins: int = 256, kernel=(1, 1), schedule: ScanSchedule | None = None):
        if length < 1 or length % 2 == 0:
            raise ContractError("window length must be odd and positive")
        self.length, self.bins, self.kernel, self.schedule = length, bins, tuple(kernel), schedule
        self._tensors: deque[np.ndarray] = deque()
        self.joint: np.ndarray | None = None

    @property
    def full(self) -> bool:
        return len(self._tensors) == self.length

    def push(self, frame) -> None:
        f = check_gray(frame)
        if self.joint is None:
            _check_kernel(self.kernel, f.shape[1], f.shape[0])
        t = frame_tensor(f, self.bins, self.schedule)
        if self.joint is None:
            self.joint = t.copy()
        else:
            if t.shape != self.joint.shape:
                raise ContractError("frame size changed inside the window")
            self.joint += t
        self._tensors.append(t)
        if len(self._tensors) > self.length:
            self.joint -= self._tensors.popleft()

    def background(self) -> np.ndarray:
        if not self.full:
            raise ContractError(f"window holds {len(self._tensors)} of {self.length} frames")
        return median_from_tensor(IntegralHistogramTensor(self.joint), self.kernel, self.length)[1]


# --- subtraction & blobs -----------------------------------------------------


class Blob(NamedTuple):
    id: int
    rect: Rect
    area: int


@dataclass(frozen=True)
class MotionMask:
    mask: np.ndarray
    labels: np.ndarray
    blobs: tuple
    min_blob: int = 1

    @property
    def rects(self) -> list[Rect]:
        return [b.rect for b in self.blobs]


def label_blobs(mask, min_blob: int = 1) -> MotionMask:
    """8-connected components; components smaller than ``min_blob`` are dropped."""
    m = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(m, structure=EIGHT)
    if n:
        areas = np.bincount(labels.ravel(), minlength=n + 1)
        keep = areas >= min_blob
        keep[0] = False
        remap = np.zeros(n + 1, dtype=np.int64)
        remap[keep] = np.arange(1, int(keep.sum()) + 1)
        labels = remap[labels]
    m = labels > 0
    blobs = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        area = int((labels[sl] == i).sum())
        blobs.append(Blob(i, Rect(sl[1].start, sl[0].start, sl[1].stop - sl[1].start, sl[0].stop - sl[0].start), area))
    m.setflags(write=False)
    labels.setflags(write=False)
    return MotionMask(m, labels, tuple(blobs), min_blob)


def clean_mask(mask) -> np.ndarray:
    """3x3 opening then closing; borders replicate so edge blobs are not eroded."""
    m = np.pad(np.asarray(mask, dtype=bool), 2, mode="edge")
    m = ndimage.binary_opening(m, structure=EIGHT)
    m = ndimage.binary_closing(m, structure=EIGHT)
    return m[2:-2, 2:-2]


def subtract_threshold(frame, background, tau: float, min_blob: int = 1) -> MotionMask:
    """``|frame - background| > tau``, morphology, then blob labelling."""
    f = check_gray(frame).astype(np.float64)
    bg = check_gray(background).astype(np.float64)
    if f.shape != bg.shape:
        raise ContractError("frame and background differ in size")
    return label_blobs(clean_mask(np.abs(f - bg) > tau), min_blob)


# --- flux tensor -------------------------------------------------------------


def flux_trace(frames, sigma_d: float = 1.0, avg_window: int = 5, center: int | None = None) -> np.ndarray:
    """Trace of the flux tensor at the window's centre frame.

    Spatial derivatives are Gaussian derivatives, temporal ones a three-frame
    central stencil; ``Ixt^2 + Iyt^2 + Itt^2`` is box-averaged over
    ``avg_window`` pixels.
    """
    arr = _stack(frames).astype(np.float64)
    n = arr.shape[0]
    if n < 3:
        raise ContractError("flux trace needs at least 3 frames")
    c = (n - 1) // 2 if center is None else center
    if not 1 <= c <= n - 2:
        raise ContractError("centre frame needs a neighbour on both sides")
    if avg_window < 1:
        raise ContractError("avg_window must be >= 1")

    def smooth(f, oy, ox):
        if sigma_d > 0:
            return ndimage.gaussian_filter(f, sigma_d, order=(oy, ox), mode="nearest")
        if ox:
            return np.gradient(f, axis=1)
        if oy:
            return np.gradient(f, axis=0)
        return f

    prev, cur, nxt = arr[c - 1], arr[c], arr[c + 1]
    ixt = 0.5 * (smooth(nxt, 0, 1) - smooth(prev, 0, 1))
    iyt = 0.5 * (smooth(nxt, 1, 0) - smooth(prev, 1, 0))
    itt = smooth(nxt, 0, 0) - 2.0 * smooth(cur, 0, 0) + smooth(prev, 0, 0)
    energy = ixt * ixt + iyt * iyt + itt * itt
    if avg_window > 1:
        energy = ndimage.uniform_filter(energy, size=avg_window, mode="nearest")
    return np.maximum(energy, 0.0)


def flux_mask(frames, tau: float, sigma_d: float = 1.0, avg_window: int = 5, min_blob: int = 1) -> MotionMask:
    return label_blobs(clean_mask(flux_trace(frames, sigma_d, avg_window) > tau), min_blob)


# --- depth fusion ------------------------------------------------------------


def load_depth(path: str | os.PathLike) -> np.ndarray:
    """Text depth map: ``width height`` then rows of metres, ``nan`` for no data."""
    with open(path, "r", encoding="ascii") as fh:
        tokens = fh.read().split()
    if len(tokens) < 2:
        raise ImageFormatError("malformed depth header")
    try:
        w, h = int(tokens[0]), int(tokens[1])
        vals = np.array([float(t) for t in tokens[2:]], dtype=np.float64)
    except ValueError as exc:
        raise ImageFormatError(f"malformed depth value: {exc}") from None
    if w < 1 or h < 1 or vals.size != w * h:
        raise ImageFormatError(f"depth map needs {w}x{h} values, found {vals.size}")
    return vals.reshape(h, w)


def save_depth(path: str | os.PathLike, depth) -> None:
    d = np.asarray(depth, dtype=np.float64)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{d.shape[1]} {d.shape[0]}\n")
        for row in d:
            fh.write(" ".join("nan" if np.isnan(v) else repr(float(v)) for v in row) + "\n")


def depth_filter(mask: MotionMask, depth, h_tau: float = DEFAULT_H_TAU) -> MotionMask:
    """Clear foreground taller than ``h_tau`` metres; no-data pixels are kept."""
    d = np.asarray(depth, dtype=np.float64)
    if d.shape != mask.mask.shape:
        raise ContractError("depth map and mask differ in size")
    with np.errstate(invalid="ignore"):
        tall = d > h_tau
    return label_blobs(mask.mask & ~tall, mask.min_blob)


# --- geodesic active contour -------------------------------------------------


def edge_indicator(trace) -> np.ndarray:
    t = np.asarray(trace, dtype=np.float64)
    if np.any(t < 0):
        raise ContractError("trace must be non-negative")
    return 1.0 / (1.0 + t)


def signed_distance(mask) -> np.ndarray:
    """Negative inside, positive outside; the zero level sits half a pixel out."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return np.full(m.shape, np.inf)
    if m.all():
        return np.full(m.shape, -np.inf)
    outside = ndimage.distance_transform_edt(~m)
    inside = ndimage.distance_transform_edt(m)
    return np.where(m, 0.5 - inside, outside - 0.5)


@dataclass
class GACResult:
    mask: np.ndarray
    areas: list = field(default_factory=list)
    phi: np.ndarray | None = None


def _diffs(phi):
    p = np.pad(phi, 1, mode="edge")
    c = p[1:-1, 1:-1]
    dxm = c - p[1:-1, :-2]
    dxp = p[1:-1, 2:] - c
    dym = c - p[:-2, 1:-1]
    dyp = p[2:, 1:-1] - c
    return p, dxm, dxp, dym, dyp


def gac_step(phi, g, gx, gy, c: float, dt: float, eps: float = 1e-8) -> np.ndarray:
    """One explicit update ``phi += dt * (g (c + kappa) |grad phi| + grad g . grad phi)``.

    The balloon term is upwinded (Osher-Sethian), the advection term upwinded
    by the sign of ``grad g``, and the curvature term uses central differences.
    """
    p, dxm, dxp, dym, dyp = _diffs(phi)
    # balloon: phi_t = F |grad phi| with F = c g
    F = c * g
    grad_plus = np.sqrt(np.maximum(dxm, 0) ** 2 + np.minimum(dxp, 0) ** 2 + np.maximum(dym, 0) ** 2 + np.minimum(dyp, 0) ** 2)
    grad_minus = np.sqrt(np.minimum(dxm, 0) ** 2 + np.maximum(dxp, 0) ** 2 + np.minimum(dym, 0) ** 2 + np.maximum(dyp, 0) ** 2)
    balloon = np.where(F > 0, F * grad_plus, F * grad_minus)
    # curvature times |grad phi|, central differences
    px = 0.5 * (dxm + dxp)
    py = 0.5 * (dym + dyp)
    pxx = dxp - dxm
    pyy = dyp - dym
    pxy = 0.25 * (p[2:, 2:] - p[2:, :-2] - p[:-2, 2:] + p[:-2, :-2])
    curv = (pxx * py * py - 2.0 * px * py * pxy + pyy * px * px) / (px * px + py * py + eps)
    # advection grad g . grad phi, upwind in the direction phi is transported
    adv = gx * np.where(gx > 0, dxp, dxm) + gy * np.where(gy > 0, dyp, dym)
    return phi + dt * (balloon + g * curv + adv)


def gac_refine(
    initial_mask, g, c: float = 0.2, dt: float = 0.2, iters: int = 100, reinit_every: int = 20
) -> GACResult:
    """Evolve the level set of ``initial_mask`` under the geodesic active contour speed."""
    m0 = np.asarray(initial_mask, dtype=bool)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != m0.shape:
        raise ContractError("edge indicator and mask differ in size")
    if not 0 < dt <= 0.25:
        raise ContractError("time step must lie in (0, 0.25]")
    if iters < 1:
        raise ContractError("iters must be >= 1")
    gy, gx = np.gradient(g)
    phi = np.clip(signed_distance(m0), -1e6, 1e6)
    areas = []
    for it in range(1, iters + 1):
        phi = gac_step(phi, g, gx, gy, c, dt)
        if not np.all(np.isfinite(phi)):
            raise DivergenceError("level set became non-finite", it)
        if reinit_every and it % reinit_every == 0:
            phi = np.clip(signed_distance(phi < 0), -1e6, 1e6)
        areas.append(int((phi < 0).sum()))
    return GACResult(phi < 0, areas, phi)


def detection_rects(masks: Sequence[MotionMask]) -> list[list[Rect]]:
    return [m.rects for m in masks]
