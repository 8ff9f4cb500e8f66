"""Scan kernels behind :mod:`spct.integral`.

Every kernel exists as a numba loop (``*_nb``) and a numpy twin (``*_np``)
with the same signature. Tensors are int64 ``(b, H+1, W+1)`` arrays whose row
0 and column 0 are zero padding; tiled kernels expect H and W to be multiples
of the tile size. Work items are addressed by a flat task index so a caller
can hand contiguous ``[t0, t1)`` ranges to worker threads.
"""

import numpy as np

from spct._jit import njit

# --- sequential (recurrence) -------------------------------------------------


@njit
def sequential_nb(bins, weights, out):
    nb = out.shape[0]
    h, w = bins.shape
    for k in range(nb):
        plane = out[k]
        for y in range(1, h + 1):
            for x in range(1, w + 1):
                q = weights[y - 1, x - 1] if bins[y - 1, x - 1] == k else 0
                plane[y, x] = plane[y - 1, x] + plane[y, x - 1] - plane[y - 1, x - 1] + q


def sequential_np(bins, weights, out):
    nb = out.shape[0]
    h, w = bins.shape
    cols = np.arange(w)
    row = np.zeros((nb, w), dtype=np.int64)
    for y in range(1, h + 1):
        row[:] = 0
        row[bins[y - 1], cols] = weights[y - 1]
        out[:, y, 1:] = out[:, y - 1, 1:] + np.cumsum(row, axis=1)


# --- scatter (one-hot initialisation) ----------------------------------------


@njit
def scatter_nb(bins, weights, out, r0, r1):
    w = bins.shape[1]
    for y in range(r0, r1):
        for x in range(w):
            out[bins[y, x], y + 1, x + 1] = weights[y, x]


def scatter_np(bins, weights, out, r0, r1):
    ys = np.arange(r0, r1)[:, None]
    xs = np.arange(bins.shape[1])[None, :]
    out[bins[r0:r1], ys + 1, xs + 1] = weights[r0:r1]


# --- full-row scans (scan-transpose-scan) ------------------------------------


@njit
def scan_rows_nb(flat, r0, r1):
    n = flat.shape[1]
    for r in range(r0, r1):
        acc = flat[r, 0]
        for x in range(1, n):
            acc += flat[r, x]
            flat[r, x] = acc


def scan_rows_np(flat, r0, r1):
    np.cumsum(flat[r0:r1], axis=1, out=flat[r0:r1])


@njit
def transpose_planes_nb(src, dst, k0, k1):
    h, w = src.shape[1], src.shape[2]
    blk = 32
    for k in range(k0, k1):
        for y0 in range(0, h, blk):
            y1 = min(y0 + blk, h)
            for x0 in range(0, w, blk):
                x1 = min(x0 + blk, w)
                for y in range(y0, y1):
                    for x in range(x0, x1):
                        dst[k, x, y] = src[k, y, x]


def transpose_planes_np(src, dst, k0, k1):
    dst[k0:k1] = src[k0:k1].transpose(0, 2, 1)


# --- cross-weave tiled -------------------------------------------------------
# Tiled kernels read the (tile-padded) bin map directly, so initialising a tile
# happens where it is scanned. Task indices put the bin fastest: consecutive
# tasks revisit the same tile of the bin map while it is still in cache.


@njit
def tiled_hscan_nb(bins, weights, out, strip, tile, nbins, t0, t1):
    # task t -> (tile row ty, bin k) inside vertical strip `strip`
    xa = strip * tile
    for t in range(t0, t1):
        ty = t // nbins
        k = t - ty * nbins
        plane = out[k]
        for y in range(ty * tile, (ty + 1) * tile):
            row = plane[y + 1]
            acc = row[xa]
            for x in range(xa, xa + tile):
                acc += weights[y, x] * (bins[y, x] == k)
                row[x + 1] = acc


def tiled_hscan_np(bins, weights, out, strip, tile, nbins, t0, t1):
    xa = strip * tile
    for t in range(t0, t1):
        ty, k = divmod(t, nbins)
        ya = ty * tile
        q = np.where(bins[ya : ya + tile, xa : xa + tile] == k, weights[ya : ya + tile, xa : xa + tile], 0)
        out[k, ya + 1 : ya + 1 + tile, xa + 1 : xa + 1 + tile] = (
            np.cumsum(q, axis=1) + out[k, ya + 1 : ya + 1 + tile, xa : xa + 1]
        )


@njit
def tiled_vscan_nb(out, strip, tile, nbins, t0, t1):
    # task t -> (tile column tx, bin k) inside horizontal strip `strip`
    y0 = 1 + strip * tile
    for t in range(t0, t1):
        tx = t // nbins
        k = t - tx * nbins
        plane = out[k]
        xa = 1 + tx * tile
        for y in range(y0, y0 + tile):
            row = plane[y]
            above = plane[y - 1]
            for x in range(xa, xa + tile):
                row[x] += above[x]


def tiled_vscan_np(out, strip, tile, nbins, t0, t1):
    y0 = 1 + strip * tile
    for t in range(t0, t1):
        tx, k = divmod(t, nbins)
        xa = 1 + tx * tile
        blk = out[k, y0 - 1 : y0 + tile, xa : xa + tile]
        np.cumsum(blk, axis=0, out=blk)


# --- wavefront tiled ---------------------------------------------------------
# A tile depends on its left neighbour (last column of row prefixes, kept in
# `carry_col`) and its upper neighbour (finished bottom row, kept in
# `carry_row`). Both boundaries live in small arrays, so the tensor itself is
# only ever written, once per entry.


@njit
def wavefront_nb(bins, weights, out, carry_col, carry_row, diag, ty_lo, nbins, tile, t0, t1):
    # task t -> (i-th tile on anti-diagonal `diag`, bin k); tile (ty, diag - ty)
    col = np.empty(tile, dtype=np.int64)
    for t in range(t0, t1):
        i = t // nbins
        k = t - i * nbins
        ty = ty_lo + i
        xa = (diag - ty) * tile
        plane = out[k]
        cc = carry_col[k]
        top = carry_row[k]
        for j in range(tile):
            col[j] = top[xa + j]
        for y in range(ty * tile, (ty + 1) * tile):
            acc = cc[y]
            b = bins[y]
            wr = weights[y]
            for j in range(tile):
                acc += wr[xa + j] * (b[xa + j] == k)
                col[j] += acc
            row = plane[y + 1]
            for j in range(tile):
                row[xa + 1 + j] = col[j]
            cc[y] = acc
        for j in range(tile):
            top[xa + j] = col[j]


def wavefront_np(bins, weights, out, carry_col, carry_row, diag, ty_lo, nbins, tile, t0, t1):
    for t in range(t0, t1):
        i, k = divmod(t, nbins)
        ty = ty_lo + i
        tx = diag - ty
        ya, xa = ty * tile, tx * tile
        q = np.where(bins[ya : ya + tile, xa : xa + tile] == k, weights[ya : ya + tile, xa : xa + tile], 0)
        rows = np.cumsum(q, axis=1) + carry_col[k, ya : ya + tile, None]
        carry_col[k, ya : ya + tile] = rows[:, -1]
        blk = np.cumsum(rows, axis=0) + carry_row[k, None, xa : xa + tile]
        carry_row[k, xa : xa + tile] = blk[-1]
        out[k, ya + 1 : ya + 1 + tile, xa + 1 : xa + 1 + tile] = blk
