"""Spatially weighted local histograms in constant time.

A Manhattan kernel centred at ``(xc, yc)`` gives pixel ``(x, y)`` the weight
``M - sx*|x - xc| - sy*|y - yc|``. Splitting the window into four quadrants
makes the weight inside each quadrant a plane ramp, which is a location
independent field plus a per-query constant. Each field gets its own weighted
integral histogram, so a weighted window histogram costs a fixed number of
lookups whatever the kernel size.

Weighted accumulators are 16.16 fixed point (integers scaled by ``2**16``).
Kernel weights are integers, so the fast path and the brute-force double loop
agree bit for bit.

Window convention: a ``kw x kh`` kernel centred at ``(xc, yc)`` covers
``x in [xc - kw//2, xc + ceil(kw/2) - 1]`` (same along y). The centre pixel
belongs to the SE quadrant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from spct import integral
from spct._parallel import map_ordered
from spct.errors import ContractError
from spct.imagecore import BinMap, Rect
from spct.integral import FIXED_ONE, IntegralHistogramTensor, ScanSchedule

DIRECTIONS = ("SE", "SW", "NE", "NW")
OPPOSITE = {"SE": "NW", "NW": "SE", "SW": "NE", "NE": "SW"}


@dataclass(frozen=True)
class KernelSpec:
    kw: int
    kh: int
    weighting: str = "manhattan"

    def __post_init__(self):
        if self.kw < 1 or self.kh < 1:
            raise ContractError("kernel extent must be >= 1")
        if self.weighting != "manhattan":
            raise ContractError(f"unsupported kernel weighting {self.weighting!r}")

    @classmethod
    def parse(cls, text: str) -> "KernelSpec":
        try:
            kw, kh = (int(v) for v in text.lower().split("x"))
        except ValueError:
            raise ContractError(f"kernel must look like '31x31', got {text!r}") from None
        return cls(kw, kh)

    @property
    def slopes(self) -> tuple[int, int]:
        # a one-pixel dimension contributes no distance, so its ramp is flat
        return (0 if self.kw == 1 else 1, 0 if self.kh == 1 else 1)

    @property
    def max_weight(self) -> int:
        return self.kw // 2 + self.kh // 2 + 1

    @property
    def left(self) -> int:
        return self.kw // 2

    @property
    def top(self) -> int:
        return self.kh // 2

    def window(self, cx: int, cy: int) -> Rect:
        return Rect(cx - self.left, cy - self.top, self.kw, self.kh)

    def weights(self) -> np.ndarray:
        """Integer kernel weights, shape ``(kh, kw)``, centre at ``(top, left)``."""
        sx, sy = self.slopes
        dx = np.abs(np.arange(self.kw) - self.left)
        dy = np.abs(np.arange(self.kh) - self.top)
        return self.max_weight - sx * dx[None, :] - sy * dy[:, None]


@dataclass(frozen=True)
class WeightField:
    weights: np.ndarray
    direction: str

    @property
    def height(self) -> int:
        return self.weights.shape[0]

    @property
    def width(self) -> int:
        return self.weights.shape[1]


def quadrant_weight_fields(width: int, height: int, spec: KernelSpec) -> dict[str, WeightField]:
    """Full-image ramps, one per quadrant direction.

    Each ramp is largest at the image corner its quadrant grows away from and
    drops by the slope per pixel, ending at 1 in the opposite corner. Opposite
    directions sum to the constant ``sx*(W-1) + sy*(H-1) + 2``.
    """
    if width < 1 or height < 1:
        raise ContractError("field dimensions must be positive")
    sx, sy = spec.slopes
    x = np.arange(width, dtype=np.int64)[None, :]
    y = np.arange(height, dtype=np.int64)[:, None]
    ramps = {
        "SE": sx * (width - 1 - x) + sy * (height - 1 - y) + 1,
        "NW": sx * x + sy * y + 1,
        "SW": sx * x + sy * (height - 1 - y) + 1,
        "NE": sx * (width - 1 - x) + sy * y + 1,
    }
    out = {}
    for d in DIRECTIONS:
        field = np.ascontiguousarray(np.broadcast_to(ramps[d], (height, width)))
        field.setflags(write=False)
        out[d] = WeightField(field, d)
    return out


def build_weighted_ih(bin_map: BinMap, field: WeightField, schedule: ScanSchedule | None = None) -> IntegralHistogramTensor:
    """Integral histogram of ``field`` weights in 16.16 fixed point."""
    if field.weights.shape != bin_map.shape:
        raise ContractError(f"field shape {field.weights.shape} != bin map shape {bin_map.shape}")
    if not np.all(np.isfinite(field.weights)) or np.any(field.weights < 0):
        raise ContractError("weights must be finite and non-negative")
    fixed = np.rint(np.asarray(field.weights, dtype=np.float64) * FIXED_ONE).astype(np.int64)
    return integral.build(bin_map, schedule, weights=fixed, fixed_scale=FIXED_ONE)


@dataclass(frozen=True)
class WeightedQuadrantSet:
    tensors: dict
    slopes: tuple[int, int]
    width: int
    height: int

    @property
    def bins(self) -> int:
        return self.tensors["SE"].bins

    @property
    def field_sum(self) -> int:
        # SE + NW (and SW + NE) equal this at every pixel
        sx, sy = self.slopes
        return sx * (self.width - 1) + sy * (self.height - 1) + 2


def build_quadrant_set(
    bin_map: BinMap, spec: KernelSpec, schedule: ScanSchedule | None = None, threads: int = 1
) -> WeightedQuadrantSet:
    """The four weighted tensors; built concurrently when ``threads`` > 1.

    The set answers queries for every kernel with the same slopes, so one set
    serves all kernel sizes larger than one pixel in each dimension.
    """
    fields = quadrant_weight_fields(bin_map.width, bin_map.height, spec)
    tensors = map_ordered(lambda d: build_weighted_ih(bin_map, fields[d], schedule), DIRECTIONS, threads)
    return WeightedQuadrantSet(dict(zip(DIRECTIONS, tensors)), spec.slopes, bin_map.width, bin_map.height)


class Quadrants(NamedTuple):
    """Per-direction half-open boxes ``(x0, y0, x1, y1)`` and offsets for many centres."""

    boxes: dict
    offsets: dict


def _quadrants(qset: WeightedQuadrantSet, cx, cy, spec: KernelSpec) -> Quadrants:
    sx, sy = qset.slopes
    W, H, M = qset.width, qset.height, spec.max_weight
    lx, ty = spec.left, spec.top
    rx, by = spec.kw - lx, spec.kh - ty
    boxes = {
        "SE": (cx, cy, cx + rx, cy + by),
        "NW": (cx - lx, cy - ty, cx, cy),
        "SW": (cx - lx, cy, cx, cy + by),
        "NE": (cx, cy - ty, cx + rx, cy),
    }
    offsets = {
        "SE": M + sx * cx + sy * cy - sx * (W - 1) - sy * (H - 1) - 1,
        "NW": M - sx * cx - sy * cy - 1,
        "SW": M - sx * cx + sy * cy - sy * (H - 1) - 1,
        "NE": M + sx * cx - sy * cy - sx * (W - 1) - 1,
    }
    return Quadrants(boxes, offsets)


def _check_query(qset: WeightedQuadrantSet, spec: KernelSpec, cx, cy):
    if spec.slopes != qset.slopes:
        raise ContractError("kernel slopes differ from the ones the quadrant set was built for")
    cx, cy = np.asarray(cx), np.asarray(cy)
    if (
        np.any(cx - spec.left < 0)
        or np.any(cy - spec.top < 0)
        or np.any(cx - spec.left + spec.kw > qset.width)
        or np.any(cy - spec.top + spec.kh > qset.height)
    ):
        raise ContractError(f"{spec.kw}x{spec.kh} kernel window leaves the {qset.width}x{qset.height} image")


def swlh_batch(qset: WeightedQuadrantSet, cx, cy, spec: KernelSpec, raw: bool = False) -> np.ndarray:
    """Weighted local histograms for arrays of centres, shape ``(n, b)``.

    Each quadrant's ramp histogram is shifted by its per-query offset times
    the quadrant's pixel count. The count comes from the ramp and its
    opposite, which sum to a constant. ``raw`` returns the 16.16 fixed-point
    sums, otherwise each row is normalised to unit mass.
    """
    cx = np.atleast_1d(np.asarray(cx, dtype=np.int64))
    cy = np.atleast_1d(np.asarray(cy, dtype=np.int64))
    _check_query(qset, spec, cx, cy)
    q = _quadrants(qset, cx, cy, spec)
    csum = qset.field_sum * FIXED_ONE
    total = np.zeros((cx.size, qset.bins), dtype=np.int64)
    for d in DIRECTIONS:
        box = q.boxes[d]
        ramp = integral.rect_histograms(qset.tensors[d], *box)
        opp = integral.rect_histograms(qset.tensors[OPPOSITE[d]], *box)
        count = (ramp + opp) // csum
        total += ramp + q.offsets[d][:, None] * count * FIXED_ONE
    if raw:
        return total
    return _normalize_rows(total)


def swlh_query(qset: WeightedQuadrantSet, center, spec: KernelSpec, raw: bool = False) -> np.ndarray:
    """Weighted local histogram of the kernel window at ``center = (x, y)``."""
    return swlh_batch(qset, [center[0]], [center[1]], spec, raw)[0]


def brute_force_swlh(bin_map: BinMap, center, spec: KernelSpec, raw: bool = False) -> np.ndarray:
    """Direct weighted counting over the kernel window (test oracle)."""
    cx, cy = center
    r = spec.window(cx, cy)
    if not r.inside(bin_map.width, bin_map.height):
        raise ContractError(f"kernel window {tuple(r)} leaves the image")
    patch = bin_map.data[r.y : r.y2, r.x : r.x2]
    hist = np.zeros(bin_map.bins, dtype=np.int64)
    np.add.at(hist, patch.ravel(), (spec.weights() * FIXED_ONE).ravel())
    return hist if raw else _normalize_rows(hist[None])[0]


def ring_rects(center, spec: KernelSpec, layers: int) -> list[Rect]:
    """Nested windows ``R_1 ⊂ ... ⊂ R_layers``; the last one is the kernel window."""
    if layers < 1:
        raise ContractError("layers must be >= 1")
    cx, cy = center
    lx, ty = spec.left, spec.top
    rx, by = spec.kw - lx - 1, spec.kh - ty - 1
    rects = []
    for i in range(1, layers + 1):
        f = i / layers
        l, t = round(lx * f), round(ty * f)
        r, b = round(rx * f), round(by * f)
        rects.append(Rect(cx - l, cy - t, l + r + 1, t + b + 1))
    return rects


def ring_weights(center, spec: KernelSpec, layers: int) -> list[float]:
    """Constant weight per ring: the kernel weight at the ring's inner edge.

    The innermost window takes the centre weight. An outer ring takes the
    mean of the kernel weights just outside the previous window along the
    two axes.
    """
    sx, sy = spec.slopes
    rects = ring_rects(center, spec, layers)
    cx, cy = center
    out = [float(spec.max_weight)]
    for inner in rects[:-1]:
        ax = max(cx - inner.x, inner.x2 - 1 - cx) + 1
        ay = max(cy - inner.y, inner.y2 - 1 - cy) + 1
        out.append(spec.max_weight - (sx * ax + sy * ay) / 2.0)
    return out


def wedding_cake_swlh(tensor: IntegralHistogramTensor, center, spec: KernelSpec, layers: int) -> np.ndarray:
    """Approximate weighted histogram from constant-weight nested rings (normalised)."""
    rects = ring_rects(center, spec, layers)
    if not rects[-1].inside(tensor.width, tensor.height):
        raise ContractError(f"kernel window {tuple(rects[-1])} leaves the image")
    weights = ring_weights(center, spec, layers)
    hist = np.zeros(tensor.bins, dtype=np.float64)
    prev = np.zeros(tensor.bins, dtype=np.int64)
    for r, w in zip(rects, weights):
        cur = integral.region_histogram(tensor, r).astype(np.int64)
        hist += w * (cur - prev)
        prev = cur
    return hist / hist.sum()


def _normalize_rows(h: np.ndarray) -> np.ndarray:
    s = h.sum(axis=1, keepdims=True).astype(np.float64)
    return h / np.where(s > 0, s, 1.0)


def valid_centers(width: int, height: int, spec: KernelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Centre grids (x, y) whose kernel window fits the image."""
    xs = np.arange(spec.left, width - (spec.kw - spec.left) + 1)
    ys = np.arange(spec.top, height - (spec.kh - spec.top) + 1)
    return xs, ys


def local_histogram_field(
    bin_map: BinMap,
    spec: KernelSpec,
    method: str = "exact",
    layers: int = 3,
    schedule: ScanSchedule | None = None,
) -> np.ndarray:
    """Normalised weighted histograms at every valid centre, ``(ny, nx, b)``.

    ``method`` is ``exact`` (quadrant tensors), ``cake`` (nested rings) or
    ``brute`` (direct double loop).
    """
    xs, ys = valid_centers(bin_map.width, bin_map.height, spec)
    if xs.size == 0 or ys.size == 0:
        raise ContractError("kernel larger than the image")
    gx, gy = np.meshgrid(xs, ys)
    if method == "exact":
        qset = build_quadrant_set(bin_map, spec, schedule)
        flat = swlh_batch(qset, gx.ravel(), gy.ravel(), spec)
    elif method == "cake":
        tensor = integral.build(bin_map, schedule)
        flat = np.stack([wedding_cake_swlh(tensor, (x, y), spec, layers) for x, y in zip(gx.ravel(), gy.ravel())])
    elif method == "brute":
        flat = np.stack([brute_force_swlh(bin_map, (x, y), spec) for x, y in zip(gx.ravel(), gy.ravel())])
    else:
        raise ContractError(f"unknown method {method!r}")
    return flat.reshape(ys.size, xs.size, bin_map.bins)


__all__ = [
    "DIRECTIONS",
    "KernelSpec",
    "WeightField",
    "WeightedQuadrantSet",
    "brute_force_swlh",
    "build_quadrant_set",
    "build_weighted_ih",
    "local_histogram_field",
    "quadrant_weight_fields",
    "ring_rects",
    "ring_weights",
    "swlh_batch",
    "swlh_query",
    "valid_centers",
    "wedding_cake_swlh",
]
