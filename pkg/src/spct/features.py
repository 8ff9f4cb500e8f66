"""Low-level feature maps and the spatial-pyramid HoG descriptor.

Derivatives are Gaussian derivatives (``scipy.ndimage``) when ``sigma > 0`` and
plain central differences when ``sigma == 0``. Orientations are in degrees,
folded into ``[-90, 90)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from spct import integral
from spct.errors import ContractError
from spct.imagecore import BinMap, check_gray
from spct.integral import FIXED_ONE, ScanSchedule

HARRIS_K = 0.04
LBP_POINTS = 16
LBP_RADIUS = 2

STRUCTURE_KINDS = ("beltrami", "harris", "shi-tomasi", "cumani")
HESSIAN_KINDS = ("shape-index", "nci", "eigvec-orientation")
KINDS = ("gradient-magnitude", "orientation-degrees") + STRUCTURE_KINDS + HESSIAN_KINDS + ("lbp-code",)


class Gradients(NamedTuple):
    gx: np.ndarray
    gy: np.ndarray
    magnitude: np.ndarray
    orientation: np.ndarray


def _gauss_kernel(sigma: float, order: int) -> np.ndarray:
    """Sampled Gaussian derivative, moment-corrected so polynomials of degree <= order are exact."""
    r = int(4.0 * sigma + 0.5)
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    if order == 0:
        return g
    if order == 1:
        k = x * g
        return k / (k * x).sum()
    k = (x * x - sigma * sigma) * g
    k -= g * k.sum()  # zero response to constants
    return k / (0.5 * (k * x * x).sum())


def _derivative(img: np.ndarray, sigma: float, ox: int, oy: int) -> np.ndarray:
    if sigma > 0:
        out = ndimage.correlate1d(img, _gauss_kernel(sigma, ox), axis=1, mode="nearest")
        return ndimage.correlate1d(out, _gauss_kernel(sigma, oy), axis=0, mode="nearest")
    out = img
    for _ in range(ox):
        out = np.gradient(out, axis=1) if out.shape[1] > 1 else np.zeros_like(out)
    for _ in range(oy):
        out = np.gradient(out, axis=0) if out.shape[0] > 1 else np.zeros_like(out)
    return out


def fold_degrees(theta: np.ndarray) -> np.ndarray:
    """Map angles in degrees onto ``[-90, 90)`` (orientation without sign)."""
    return np.mod(theta + 90.0, 180.0) - 90.0


def gradient_maps(img, sigma: float = 0.0) -> Gradients:
    if sigma < 0:
        raise ContractError("sigma must be >= 0")
    f = check_gray(img).astype(np.float64)
    gx = _derivative(f, sigma, 1, 0)
    gy = _derivative(f, sigma, 0, 1)
    mag = np.hypot(gx, gy)
    theta = fold_degrees(np.degrees(np.arctan2(gy, gx)))
    theta[mag == 0] = 0.0
    return Gradients(gx, gy, mag, theta)


def _sym_eig(a, b, c):
    """Eigenvalues (larger, smaller) of ``[[a, b], [b, c]]`` per pixel."""
    mean = 0.5 * (a + c)
    rad = np.hypot(0.5 * (a - c), b)
    return mean + rad, mean - rad


def structure_tensor(img, sigma: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Smoothed ``(Ixx, Ixy, Iyy)`` products of first derivatives.

    The same ``sigma`` drives differentiation and the integration window.
    """
    g = gradient_maps(img, sigma)
    prods = (g.gx * g.gx, g.gx * g.gy, g.gy * g.gy)
    if sigma > 0:
        prods = tuple(ndimage.gaussian_filter(p, sigma, mode="nearest") for p in prods)
    return prods


def structure_eigenvalues(img, sigma: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    a, b, c = structure_tensor(img, sigma)
    return _sym_eig(a, b, c)


def hessian(img, sigma: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    f = check_gray(img).astype(np.float64)
    return _derivative(f, sigma, 2, 0), _derivative(f, sigma, 1, 1), _derivative(f, sigma, 0, 2)


def lbp_codes(img, points: int = LBP_POINTS, radius: float = LBP_RADIUS) -> np.ndarray:
    """Circular local binary pattern codes with bilinear sampling.

    Sampling interpolates the differences to the centre pixel rather than raw
    intensities, so adding a constant to the image leaves every code unchanged.
    Borders replicate the edge pixels.
    """
    f = check_gray(img).astype(np.float64)
    h, w = f.shape
    pad = int(np.ceil(radius)) + 1
    p = np.pad(f, pad, mode="edge")
    codes = np.zeros((h, w), dtype=np.int64)
    ys, xs = np.mgrid[0:h, 0:w]
    for i in range(points):
        ang = 2.0 * np.pi * i / points
        dx, dy = radius * np.cos(ang), -radius * np.sin(ang)
        # snap values that are integral up to rounding noise
        dx = round(dx) if abs(dx - round(dx)) < 1e-9 else dx
        dy = round(dy) if abs(dy - round(dy)) < 1e-9 else dy
        x0, y0 = int(np.floor(dx)), int(np.floor(dy))
        fx, fy = dx - x0, dy - y0
        acc = np.zeros((h, w), dtype=np.float64)
        for oy, ox, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
            if wt == 0:
                continue
            nb = p[ys + pad + y0 + oy, xs + pad + x0 + ox]
            acc += wt * (nb - f)
        codes |= (acc >= 0).astype(np.int64) << i
    return codes


def feature_map(img, kind: str, sigma: float = 1.0) -> np.ndarray:
    """One of the scalar feature maps named in ``KINDS``."""
    if kind not in KINDS:
        raise ContractError(f"unknown feature kind {kind!r}; choose from {', '.join(KINDS)}")
    if kind == "gradient-magnitude":
        return gradient_maps(img, sigma).magnitude
    if kind == "orientation-degrees":
        return gradient_maps(img, sigma).orientation
    if kind == "lbp-code":
        return lbp_codes(img).astype(np.float64)
    if kind in STRUCTURE_KINDS:
        l1, l2 = structure_eigenvalues(img, sigma)
        if kind == "beltrami":
            return 1.0 + (l1 + l2) + l1 * l2
        if kind == "harris":
            return l1 * l2 - HARRIS_K * (l1 + l2) ** 2
        if kind == "shi-tomasi":
            return np.minimum(l1, l2)
        return np.maximum(l1, l2)
    ixx, ixy, iyy = hessian(img, sigma)
    # round-off on flat regions would otherwise decide atan2's quadrant
    tol = 1e-9 * max(1.0, float(np.abs(check_gray(img)).max()))
    ixx, ixy, iyy = (np.where(np.abs(d) < tol, 0.0, d) for d in (ixx, ixy, iyy))
    lmax, lmin = _sym_eig(ixx, ixy, iyy)
    if kind == "shape-index":
        return np.arctan2(lmin, lmax)
    if kind == "nci":
        inten = check_gray(img).astype(np.float64)
        return np.arctan(np.hypot(lmax, lmin) / (1.0 + np.abs(inten)))
    vy, vx = ixy, lmax - iyy
    theta = fold_degrees(np.degrees(np.arctan2(vy, vx)))
    theta[(vx == 0) & (vy == 0)] = 0.0
    return theta


# --- edges -------------------------------------------------------------------


def _nms(mag: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Thin ridges along the gradient direction.

    A pixel survives when it is >= its backward neighbour and > its forward
    neighbour, so a two-pixel plateau keeps exactly one pixel.
    """
    h, w = mag.shape
    p = np.pad(mag, 1, mode="constant")
    # gradient direction quantised to 0, 45, 90, 135 degrees (image y down)
    ang = np.mod(theta, 180.0)
    q = (np.floor((ang + 22.5) / 45.0).astype(int)) % 4
    steps = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    for d, (sy, sx) in steps.items():
        sel = q == d
        fwd = p[yy + 1 + sy, xx + 1 + sx]
        bwd = p[yy + 1 - sy, xx + 1 - sx]
        keep |= sel & (mag >= bwd) & (mag > fwd)
    return np.where(keep, mag, 0.0)


def edge_map(img, lo: float | None = None, hi: float | None = None, sigma: float = 1.0) -> np.ndarray:
    """Canny edges as a ``{0, 1}`` uint8 map.

    Thresholds are strict (``>``); defaults are 0.1 and 0.2 of the maximum
    gradient magnitude.
    """
    g = gradient_maps(img, sigma)
    peak = float(g.magnitude.max())
    lo = 0.1 * peak if lo is None else float(lo)
    hi = 0.2 * peak if hi is None else float(hi)
    if not 0 <= lo <= hi:
        raise ContractError("edge thresholds need 0 <= lo <= hi")
    # rounding makes mirror-symmetric ties exact so the tie rule decides them
    mag = np.round(g.magnitude, 9)
    nms = _nms(mag, np.degrees(np.arctan2(g.gy, g.gx)))
    weak = nms > lo
    strong = nms > hi
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(nms.shape, dtype=np.uint8)
    hit = np.zeros(n + 1, dtype=bool)
    hit[np.unique(labels[strong])] = True
    hit[0] = False
    return hit[labels].astype(np.uint8)


# --- pyramid HoG -------------------------------------------------------------


def phog_length(bins: int, levels: int) -> int:
    return bins * sum(4**l for l in range(levels + 1))


@dataclass(frozen=True)
class PHoG:
    """One pyramid descriptor: levels concatenated coarse to fine, cells row-major."""

    values: np.ndarray
    levels: int
    bins: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (phog_length(self.bins, self.levels),):
            raise ContractError(f"descriptor length {v.shape} != {phog_length(self.bins, self.levels)}")
        object.__setattr__(self, "values", v)

    def level(self, l: int) -> np.ndarray:
        start = self.bins * sum(4**i for i in range(l))
        return self.values[start : start + self.bins * 4**l]

    def cells(self, l: int) -> np.ndarray:
        """Level ``l`` as ``(2**l, 2**l, bins)``."""
        s = 2**l
        return self.level(l).reshape(s, s, self.bins)


@dataclass(frozen=True)
class PHoGField:
    """Descriptors for every chip position, ``values[y, x]`` for top-left ``(x, y)``."""

    values: np.ndarray
    levels: int
    bins: int
    chip_w: int
    chip_h: int

    def at(self, x: int, y: int) -> PHoG:
        return PHoG(self.values[y, x], self.levels, self.bins)


def orientation_bins(theta: np.ndarray, bins: int) -> np.ndarray:
    """Bin of a folded orientation; bin 0 starts at -90 degrees."""
    idx = np.floor((theta + 90.0) * bins / 180.0).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def hog_inputs(window, bins: int, sigma: float = 1.0, lo=None, hi=None) -> tuple[BinMap, np.ndarray]:
    """Orientation bin map and fixed-point magnitude weights masked to edges."""
    g = gradient_maps(window, sigma)
    edges = edge_map(window, lo, hi, sigma).astype(bool)
    weights = np.where(edges, np.rint(g.magnitude * FIXED_ONE), 0).astype(np.int64)
    return BinMap(orientation_bins(g.orientation, bins), bins), weights


def pyramid_hog(
    window,
    levels: int,
    bins: int,
    chip_w: int,
    chip_h: int,
    sigma: float = 1.0,
    schedule: ScanSchedule | None = None,
    lo: float | None = None,
    hi: float | None = None,
) -> PHoGField:
    """Pyramid HoG at every chip position inside ``window``.

    One magnitude-weighted orientation integral histogram serves every level:
    level ``l`` cells are ``chip/2**l`` windows read from it at translated
    offsets. Values are magnitude sums (fixed point converted back to float).
    """
    check_gray(window)
    if levels < 0 or bins < 1:
        raise ContractError("need levels >= 0 and bins >= 1")
    h, w = np.asarray(window).shape
    if chip_w > w or chip_h > h or chip_w < 1 or chip_h < 1:
        raise ContractError(f"chip {chip_w}x{chip_h} does not fit window {w}x{h}")
    s = 2**levels
    if chip_w % s or chip_h % s:
        raise ContractError(f"2**levels = {s} must divide the chip size {chip_w}x{chip_h}")
    bmap, weights = hog_inputs(window, bins, sigma, lo, hi)
    tensor = integral.build(bmap, schedule, weights=weights, fixed_scale=FIXED_ONE)
    return _assemble(tensor, levels, bins, chip_w, chip_h)


def _assemble(tensor, levels, bins, chip_w, chip_h) -> PHoGField:
    h, w = tensor.height, tensor.width
    ny, nx = h - chip_h + 1, w - chip_w + 1
    parts = []
    for l in range(levels + 1):
        s = 2**l
        cw, ch = chip_w // s, chip_h // s
        cells = integral.window_histograms(tensor, cw, ch)  # (b, h-ch+1, w-cw+1)
        for r in range(s):
            for c in range(s):
                sub = cells[:, r * ch : r * ch + ny, c * cw : c * cw + nx]
                parts.append(np.moveaxis(sub, 0, -1))
    values = np.concatenate(parts, axis=-1).astype(np.float64) / FIXED_ONE
    return PHoGField(values, levels, bins, chip_w, chip_h)


def brute_force_phog(window, x: int, y: int, levels: int, bins: int, chip_w: int, chip_h: int, sigma: float = 1.0) -> PHoG:
    """Per-cell direct accumulation at one chip position (test oracle)."""
    bmap, weights = hog_inputs(window, bins, sigma)
    out = []
    for l in range(levels + 1):
        s = 2**l
        cw, ch = chip_w // s, chip_h // s
        for r in range(s):
            for c in range(s):
                ys, xs = y + r * ch, x + c * cw
                hist = np.zeros(bins, dtype=np.int64)
                np.add.at(hist, bmap.data[ys : ys + ch, xs : xs + cw].ravel(), weights[ys : ys + ch, xs : xs + cw].ravel())
                out.append(hist)
    return PHoG(np.concatenate(out).astype(np.float64) / FIXED_ONE, levels, bins)
