"""Integral histogram tensors.

A tensor holds, for every bin ``k``, the 2-D prefix sums
``H[k, y, x] = sum(r < y, c < x) [bin(r, c) == k] * weight(r, c)``
with a zero row and column in front so that region queries need no border
cases. Four build schedules produce bit-identical tensors:

``seq``     the plain recurrence, one pixel at a time.
``cw-sts``  full-row prefix scans, a plane transpose, scans again, transpose back.
``cw-tis``  tiled horizontal scans strip by strip, then tiled vertical scans.
``wf-tis``  a single pass over anti-diagonals of tiles, each tile scanned
            horizontally then vertically, with the left and upper tile
            boundaries carried in small side arrays.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from spct import _integral_kernels as K
from spct._jit import USE_NUMBA, select
from spct._parallel import run_chunks
from spct.errors import CapacityError, ContractError, ImageFormatError
from spct.imagecore import BinMap, Rect

DEFAULT_TILE = 32
# 4 GiB; override with SPCT_MEMORY_BUDGET (bytes) or the ``budget`` argument
DEFAULT_BUDGET = int(os.environ.get("SPCT_MEMORY_BUDGET", str(4 << 30)))
FIXED_ONE = 1 << 16


class ScheduleKind(str, Enum):
    SEQUENTIAL = "seq"
    SCAN_TRANSPOSE_SCAN = "cw-sts"
    CROSS_WEAVE_TILED = "cw-tis"
    WAVEFRONT_TILED = "wf-tis"


@dataclass(frozen=True)
class ScanSchedule:
    kind: ScheduleKind = ScheduleKind.WAVEFRONT_TILED
    tile: int = DEFAULT_TILE
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.tile < 1:
            raise ContractError("tile must be >= 1")
        if self.threads < 1:
            raise ContractError("threads must be >= 1")

    @property
    def tiled(self) -> bool:
        return self.kind in (ScheduleKind.CROSS_WEAVE_TILED, ScheduleKind.WAVEFRONT_TILED)


ALL_KINDS = tuple(ScheduleKind)


@dataclass(frozen=True)
class IntegralHistogramTensor:
    """``(b, h+1, w+1)`` prefix-count tensor.

    Plain tensors are uint64 counts. Weighted tensors (``fixed_scale`` > 1)
    are int64 accumulators of weights in fixed point.
    """

    data: np.ndarray
    fixed_scale: int = 1

    @property
    def bins(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1] - 1

    @property
    def width(self) -> int:
        return self.data.shape[2] - 1

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def signed(self) -> np.ndarray:
        """int64 view of the data (plain counts never exceed int64)."""
        return self.data.view(np.int64) if self.data.dtype == np.uint64 else self.data

    def equals(self, other: "IntegralHistogramTensor") -> bool:
        return self.data.shape == other.data.shape and self.data.tobytes() == other.data.tobytes()


class ScheduleStats(NamedTuple):
    wavefront_iterations: int
    tile_count: int
    scan_efficiency: float


class MemoryEstimate(NamedTuple):
    tensor_bytes: int
    raw_bytes: int
    empty: bool


# --- analytics ---------------------------------------------------------------


def schedule_stats(w: int, h: int, tile: int, scan_len: int) -> ScheduleStats:
    """Iteration/tile counts for the tiled schedules and prefix-scan efficiency.

    Efficiency of an up-sweep/down-sweep scan over ``n`` elements is
    ``3(n-1) / (n log2 n)``, capped at 1 (the formula exceeds 1 for n < 8).
    """
    if min(w, h, tile, scan_len) < 1:
        raise ContractError("schedule_stats needs positive arguments")
    tx, ty = math.ceil(w / tile), math.ceil(h / tile)
    n = scan_len
    eff = 1.0 if n == 1 else min(1.0, 3.0 * (n - 1) / (n * math.log2(n)))
    return ScheduleStats(tx + ty - 1, tx * ty, eff)


def estimate_memory(w: int, h: int, b: int, elem_bytes: int = 8) -> MemoryEstimate:
    """Bytes for a padded ``b x (h+1) x (w+1)`` tensor, plus the unpadded product."""
    if b == 0 or w == 0 or h == 0 or elem_bytes == 0:
        return MemoryEstimate(0, 0, True)
    if min(w, h, b, elem_bytes) < 0:
        raise ContractError("estimate_memory needs non-negative arguments")
    return MemoryEstimate(b * (h + 1) * (w + 1) * elem_bytes, b * h * w * elem_bytes, False)


# --- build -------------------------------------------------------------------


def _as_weights(bin_map: BinMap, weights) -> np.ndarray:
    if weights is None:
        return np.ones(bin_map.shape, dtype=np.int64)
    weights = np.ascontiguousarray(weights, dtype=np.int64)
    if weights.shape != bin_map.shape:
        raise ContractError(f"weight field shape {weights.shape} != bin map shape {bin_map.shape}")
    if weights.size and weights.min() < 0:
        raise ContractError("weights must be non-negative")
    return weights


def build(
    bin_map: BinMap,
    schedule: ScanSchedule | None = None,
    *,
    weights=None,
    fixed_scale: int = 1,
    budget: int | None = None,
    use_numba: bool | None = None,
    out: np.ndarray | None = None,
) -> IntegralHistogramTensor:
    """Build the integral histogram of ``bin_map`` with the given schedule.

    ``weights`` (non-negative integers, same shape as the map) turns the
    counts into weighted sums; ``fixed_scale`` only records the fixed-point
    scale those integers carry.

    ``out`` is an optional writable int64 ``(b, h+1, w+1)`` buffer to build
    into, for callers that process frame after frame at a fixed size. A tensor
    previously built into the same buffer is overwritten.
    """
    schedule = schedule or ScanSchedule()
    b, h, w = bin_map.bins, bin_map.height, bin_map.width
    budget = DEFAULT_BUDGET if budget is None else budget
    est = estimate_memory(w, h, b, 8)
    if est.tensor_bytes > budget:
        raise CapacityError(f"tensor needs {est.tensor_bytes} bytes, budget is {budget}")
    wts = _as_weights(bin_map, weights)
    bins = bin_map.data
    nb = USE_NUMBA if use_numba is None else use_numba
    kind = schedule.kind
    out = _output_buffer(out, (b, h + 1, w + 1))

    if kind is ScheduleKind.SEQUENTIAL:
        _zero_border(out)
        select(K.sequential_nb, K.sequential_np, nb)(bins, wts, out)
    elif kind is ScheduleKind.SCAN_TRANSPOSE_SCAN:
        _build_sts(bins, wts, out, schedule.threads, nb)
    else:
        _build_tiled(bins, wts, out, schedule, nb)

    data = out.view(np.uint64) if weights is None and fixed_scale == 1 else out.view()
    data.setflags(write=False)
    return IntegralHistogramTensor(data, fixed_scale)


def new_buffer(bin_map: BinMap) -> np.ndarray:
    """Uninitialised output buffer matching ``bin_map`` for ``build(out=...)``."""
    return np.empty((bin_map.bins, bin_map.height + 1, bin_map.width + 1), dtype=np.int64)


def _output_buffer(out, shape) -> np.ndarray:
    if out is None:
        return np.empty(shape, dtype=np.int64)
    if out.shape != shape or out.dtype != np.int64 or not out.flags.c_contiguous or not out.flags.writeable:
        raise ContractError(f"output buffer must be a writable C-contiguous int64 array of shape {shape}")
    return out


def _zero_border(out):
    out[:, 0, :] = 0
    out[:, :, 0] = 0


def _scatter(bins, wts, out, threads, nb):
    fn = select(K.scatter_nb, K.scatter_np, nb)
    run_chunks(lambda r0, r1: fn(bins, wts, out, r0, r1), bins.shape[0], threads)


def _build_sts(bins, wts, out, threads, nb):
    b = out.shape[0]
    h, w = bins.shape
    out.fill(0)
    _scatter(bins, wts, out, threads, nb)
    scan = select(K.scan_rows_nb, K.scan_rows_np, nb)
    transpose = select(K.transpose_planes_nb, K.transpose_planes_np, nb)

    flat = out.reshape(b * (h + 1), w + 1)
    run_chunks(lambda r0, r1: scan(flat, r0, r1), flat.shape[0], threads)
    tr = np.empty((b, w + 1, h + 1), dtype=np.int64)
    run_chunks(lambda k0, k1: transpose(out, tr, k0, k1), b, threads)
    flat_t = tr.reshape(b * (w + 1), h + 1)
    run_chunks(lambda r0, r1: scan(flat_t, r0, r1), flat_t.shape[0], threads)
    run_chunks(lambda k0, k1: transpose(tr, out, k0, k1), b, threads)


def _build_tiled(bins, wts, out, schedule: ScanSchedule, nb):
    b = out.shape[0]
    h, w = bins.shape
    tile, threads = schedule.tile, schedule.threads
    nty, ntx = math.ceil(h / tile), math.ceil(w / tile)
    hp, wp = nty * tile, ntx * tile
    padded = hp != h or wp != w
    if padded:
        # zero-weight padding up to the next tile multiple, cropped afterwards
        pb = np.zeros((hp, wp), dtype=np.int32)
        pw = np.zeros((hp, wp), dtype=np.int64)
        pb[:h, :w] = bins
        pw[:h, :w] = wts
        bins, wts = pb, pw
        work = np.empty((b, hp + 1, wp + 1), dtype=np.int64)
    else:
        work = out
    _zero_border(work)

    if schedule.kind is ScheduleKind.CROSS_WEAVE_TILED:
        hscan = select(K.tiled_hscan_nb, K.tiled_hscan_np, nb)
        vscan = select(K.tiled_vscan_nb, K.tiled_vscan_np, nb)
        for sx in range(ntx):
            run_chunks(lambda t0, t1: hscan(bins, wts, work, sx, tile, b, t0, t1), nty * b, threads)
        for sy in range(nty):
            run_chunks(lambda t0, t1: vscan(work, sy, tile, b, t0, t1), ntx * b, threads)
    else:
        wave = select(K.wavefront_nb, K.wavefront_np, nb)
        carry_col = np.zeros((b, hp), dtype=np.int64)
        carry_row = np.zeros((b, wp), dtype=np.int64)
        for diag in range(ntx + nty - 1):
            ty_lo = max(0, diag - ntx + 1)
            ty_hi = min(diag, nty - 1)
            n_on = ty_hi - ty_lo + 1
            run_chunks(
                lambda t0, t1: wave(bins, wts, work, carry_col, carry_row, diag, ty_lo, b, tile, t0, t1),
                n_on * b,
                threads,
            )

    if padded:
        out[...] = work[:, : h + 1, : w + 1]


# --- queries -----------------------------------------------------------------


def _check_rect(tensor: IntegralHistogramTensor, r: Rect):
    if not Rect(*r).inside(tensor.width, tensor.height):
        raise ContractError(f"rectangle {tuple(r)} outside {tensor.width}x{tensor.height} image")


def region_histogram(tensor: IntegralHistogramTensor, r: Rect) -> np.ndarray:
    """Histogram of rectangle ``r`` from four tensor lookups."""
    _check_rect(tensor, r)
    d = tensor.signed()
    x1, y1, x2, y2 = r[0], r[1], r[0] + r[2], r[1] + r[3]
    hist = d[:, y2, x2] - d[:, y1, x2] - d[:, y2, x1] + d[:, y1, x1]
    return hist.astype(np.uint64) if tensor.data.dtype == np.uint64 else hist


def window_histograms(tensor: IntegralHistogramTensor, kw: int, kh: int) -> np.ndarray:
    """Histograms of every ``kw x kh`` window, indexed by top-left corner.

    Returns int64 ``(b, h - kh + 1, w - kw + 1)``.
    """
    if kw < 1 or kh < 1 or kw > tensor.width or kh > tensor.height:
        raise ContractError(f"window {kw}x{kh} does not fit {tensor.width}x{tensor.height}")
    d = tensor.signed()
    return d[:, kh:, kw:] - d[:, :-kh, kw:] - d[:, kh:, :-kw] + d[:, :-kh, :-kw]


def rect_histograms(tensor: IntegralHistogramTensor, x0, y0, x1, y1) -> np.ndarray:
    """Vectorised region query for many rectangles ``[x0, x1) x [y0, y1)``.

    Returns ``(n, b)`` int64; empty rectangles give zero rows.
    """
    d = tensor.signed()
    x0, y0, x1, y1 = (np.asarray(a, dtype=np.intp) for a in (x0, y0, x1, y1))
    out = d[:, y1, x1] - d[:, y0, x1] - d[:, y1, x0] + d[:, y0, x0]
    return np.ascontiguousarray(out.T)


def brute_force_histogram(bin_map: BinMap, r: Rect, weights=None) -> np.ndarray:
    """Direct per-pixel counting over ``r`` (test oracle)."""
    x, y, w, h = r
    patch = bin_map.data[y : y + h, x : x + w].ravel()
    if weights is None:
        return np.bincount(patch, minlength=bin_map.bins).astype(np.uint64)
    wts = np.asarray(weights, dtype=np.int64)[y : y + h, x : x + w].ravel()
    out = np.zeros(bin_map.bins, dtype=np.int64)
    np.add.at(out, patch, wts)
    return out


# --- dump format -------------------------------------------------------------

MAGIC = b"IHT1"


def dump(tensor: IntegralHistogramTensor, path) -> None:
    """``IHT1`` magic, little-endian u32 b, h, w, elem_bytes, then the planes."""
    data = np.ascontiguousarray(tensor.data)
    header = MAGIC + struct.pack("<4I", tensor.bins, tensor.height, tensor.width, data.dtype.itemsize)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.astype(data.dtype.newbyteorder("<"), copy=False).tobytes())


def load(path) -> IntegralHistogramTensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC or len(raw) < 20:
        raise ImageFormatError("not an IHT1 tensor file")
    b, h, w, eb = struct.unpack("<4I", raw[4:20])
    if eb != 8:
        raise ImageFormatError(f"unsupported element size {eb}")
    need = b * (h + 1) * (w + 1) * eb
    if len(raw) - 20 < need:
        raise ImageFormatError("truncated payload")
    data = np.frombuffer(raw[20 : 20 + need], dtype="<u8").reshape(b, h + 1, w + 1).astype(np.uint64)
    data.setflags(write=False)
    return IntegralHistogramTensor(data)
