"""Image containers, grayscale conversion, quantization and PGM/PPM IO.

Images are plain numpy arrays: ``(h, w)`` for gray and ``(h, w, 3)`` RGB for
color, 8-bit for anything read from disk and float64 for derived maps.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from spct.errors import ContractError, ImageFormatError


class Rect(NamedTuple):
    """Axis-aligned rectangle, top-left corner plus extent, in pixels."""

    x: int
    y: int
    w: int
    h: int

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def inside(self, width: int, height: int) -> bool:
        return self.w >= 1 and self.h >= 1 and self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height

    def intersect(self, other: "Rect") -> "Rect | None":
        x1, y1 = max(self.x, other.x), max(self.y, other.y)
        x2, y2 = min(self.x2, other.x2), min(self.y2, other.y2)
        if x2 <= x1 or y2 <= y1:
            return None
        return Rect(x1, y1, x2 - x1, y2 - y1)

    def clip(self, width: int, height: int) -> "Rect | None":
        return self.intersect(Rect(0, 0, width, height))

    @classmethod
    def from_center(cls, cx: float, cy: float, w: int, h: int) -> "Rect":
        return cls(int(round(cx - w / 2.0)), int(round(cy - h / 2.0)), int(w), int(h))

    @classmethod
    def parse(cls, text: str) -> "Rect":
        parts = [p for p in text.replace(" ", "").split(",") if p]
        if len(parts) != 4:
            raise ContractError(f"rectangle must be 'x,y,w,h', got {text!r}")
        x, y, w, h = (int(round(float(p))) for p in parts)
        if w < 1 or h < 1:
            raise ContractError(f"rectangle extent must be positive, got {text!r}")
        return cls(x, y, w, h)

    def __str__(self) -> str:
        return f"{self.x},{self.y},{self.w},{self.h}"


@dataclass(frozen=True)
class BinMap:
    """Per-pixel histogram bin indices in ``[0, bins)``."""

    data: np.ndarray
    bins: int

    def __post_init__(self):
        if self.bins < 1:
            raise ContractError("bin count must be >= 1")
        data = np.ascontiguousarray(self.data, dtype=np.int32)
        if data.ndim != 2 or data.size == 0:
            raise ContractError("bin map must be a non-empty 2-D array")
        if data.min() < 0 or data.max() >= self.bins:
            raise ContractError(f"bin index outside [0, {self.bins})")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def check_gray(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ContractError(f"expected a non-empty 2-D gray image, got shape {img.shape}")
    return img


def check_color(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ContractError(f"expected an (h, w, 3) color image, got shape {img.shape}")
    return img


def to_grayscale(img) -> np.ndarray:
    """Unweighted RGB mean, rounded to nearest (no ties are possible)."""
    img = check_color(img)
    total = img.astype(np.int32).sum(axis=2)
    return ((total + 1) // 3).astype(np.uint8)


def as_gray(img) -> np.ndarray:
    img = np.asarray(img)
    return to_grayscale(img) if img.ndim == 3 else check_gray(img)


def quantize(img, bins: int, lo: float = 0.0, hi: float = 256.0) -> BinMap:
    """Uniform-width binning with border clamping.

    ``bin = clamp(floor((v - lo) * bins / (hi - lo)), 0, bins - 1)``
    """
    if bins < 1:
        raise ContractError("bins must be >= 1")
    if not lo < hi:
        raise ContractError("quantization range needs lo < hi")
    img = check_gray(img)
    v = (img.astype(np.float64) - lo) * (bins / (hi - lo))
    idx = np.floor(v)
    np.clip(idx, 0, bins - 1, out=idx)
    return BinMap(idx.astype(np.int32), bins)


def bin_centers(bins: int, lo: float = 0.0, hi: float = 256.0) -> np.ndarray:
    width = (hi - lo) / bins
    return lo + (np.arange(bins) + 0.5) * width


def to_uint8(values, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Min-max scale a real map to 8 bits for inspection."""
    values = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(values)
    if not finite.any():
        return np.zeros(values.shape, np.uint8)
    lo = float(values[finite].min()) if lo is None else lo
    hi = float(values[finite].max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(values.shape, np.uint8)
    out = (np.where(finite, values, lo) - lo) * (255.0 / (hi - lo))
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# --- PGM / PPM ---------------------------------------------------------------

_WS = b" \t\n\r\v\f"


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c in (b"#",):
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c and c in _WS:
            pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos : pos + 1] not in (b"#",) and buf[pos] not in _WS:
        pos += 1
    if start == pos:
        raise ImageFormatError("malformed header")
    return buf[start:pos], pos


def decode_pnm(buf: bytes) -> np.ndarray:
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise ImageFormatError("malformed header: expected P5 or P6 magic")
    magic = buf[:2]
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"malformed header: bad field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError("malformed header: non-positive dimensions")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval} (only 255)")
    if pos >= len(buf) or buf[pos] not in _WS:
        raise ImageFormatError("malformed header: missing whitespace after maxval")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).copy()
    if channels == 3:
        return arr.reshape(height, width, 3)
    return arr.reshape(height, width)


def encode_pnm(img) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        if not np.issubdtype(img.dtype, np.integer) or img.min() < 0 or img.max() > 255:
            raise ContractError("only 8-bit images can be written; scale with to_uint8 first")
        img = img.astype(np.uint8)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ContractError(f"cannot encode array of shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM (gray) or PPM (RGB) file with maxval 255."""
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def save_image(path: str | os.PathLike, img) -> None:
    data = encode_pnm(img)
    with open(path, "wb") as fh:
        fh.write(data)


def save_mask(path: str | os.PathLike, mask) -> None:
    """Binary mask as P5 with values {0, 255}."""
    save_image(path, np.where(np.asarray(mask) != 0, 255, 0).astype(np.uint8))


def load_mask(path: str | os.PathLike) -> np.ndarray:
    img = load_image(path)
    if img.ndim != 2:
        raise ImageFormatError("mask files must be P5")
    return img > 127
