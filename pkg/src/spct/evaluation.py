"""Tracking (reset protocol) and detection (pixel / object) evaluation."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from spct.errors import ContractError, ImageFormatError, StageError
from spct.imagecore import Rect

RESET_SKIP = 5

# per-frame status codes of the reset protocol
TRACKED = "tracked"
INIT = "init"
FAILURE = "failure"
SKIPPED = "skipped"
OCCLUDED = "occluded"


def overlap(a: Rect, b: Rect) -> float:
    """Intersection over union."""
    a, b = Rect(*a), Rect(*b)
    if a.w < 1 or a.h < 1 or b.w < 1 or b.h < 1:
        raise ContractError("rectangles need a positive extent")
    inter = a.intersect(b)
    if inter is None:
        return 0.0
    return inter.area / (a.area + b.area - inter.area)


# --- ground truth files ------------------------------------------------------


def load_track_gt(path: str | os.PathLike) -> list[Rect | None]:
    """One ``x,y,w,h`` or ``occluded`` per line; occluded frames become ``None``."""
    out: list[Rect | None] = []
    with open(path, "r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s.lower() == "occluded":
                out.append(None)
                continue
            try:
                out.append(Rect.parse(s))
            except ContractError as exc:
                raise ImageFormatError(f"{path}:{n}: {exc}") from None
    return out


def load_det_gt(path: str | os.PathLike) -> list[list[Rect]]:
    """One line per frame with ``;``-separated boxes; ``-`` or a blank line means none."""
    out: list[list[Rect]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            s = line.strip()
            if s in ("", "-"):
                out.append([])
                continue
            try:
                out.append([Rect.parse(p) for p in s.split(";") if p.strip()])
            except ContractError as exc:
                raise ImageFormatError(f"{path}:{n}: {exc}") from None
    return out


# --- reset-based tracking evaluation ----------------------------------------


@dataclass
class TrackEvalReport:
    accuracy: float
    robustness: int
    mfr: float
    frames: int
    frames_used: int
    overlaps: list[float | None]
    status: list[str]

    def summary(self) -> str:
        return (
            f"accuracy={self.accuracy:.6f}\nrobustness={self.robustness}\nmfr={self.mfr:.6f}\n"
            f"frames={self.frames}\nframes_used={self.frames_used}\n"
        )

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="ascii") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "overlap", "status"])
            for i, (ov, st) in enumerate(zip(self.overlaps, self.status)):
                w.writerow([i, "" if ov is None else f"{ov:.6f}", st])


def _rect_of(out) -> Rect:
    rect = getattr(out, "rect", out)
    return Rect(*rect)


def eval_reset(tracker, frames: Sequence, gt: Sequence[Rect | None], skip: int = RESET_SKIP) -> TrackEvalReport:
    """Supervised reset protocol.

    ``tracker`` provides ``init(frame, rect, index)`` and ``update(frame, index)``;
    the latter returns a ``Rect`` or anything with a ``rect`` attribute. A
    frame whose overlap is 0 is a failure: it and the next ``skip`` frames are
    excluded from accuracy and the tracker restarts from ground truth
    ``skip`` frames after the failure. Frames with ``None`` ground truth are
    occluded: they are tracked through but never scored or failed.
    """
    n = len(frames)
    if len(gt) != n:
        raise ContractError(f"ground truth has {len(gt)} entries for {n} frames")
    overlaps: list[float | None] = [None] * n
    status = [SKIPPED] * n
    failures = 0
    live = False
    first = True
    resume = 0
    for i in range(n):
        g = gt[i]
        if not live:
            if i < resume:
                continue
            if g is None:
                status[i] = OCCLUDED
                continue
            try:
                out = tracker.init(frames[i], g, i)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(f"tracker init failed: {exc}", i) from exc
            live = True
            status[i] = INIT
            if first:
                # the first initialisation is scored; re-initialisations fall in the skip window
                overlaps[i] = overlap(_rect_of(out) if out is not None else g, g)
                first = False
            continue
        try:
            out = tracker.update(frames[i], i)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(f"tracker update failed: {exc}", i) from exc
        if g is None:
            status[i] = OCCLUDED
            continue
        ov = overlap(_rect_of(out), g)
        if ov == 0.0:
            failures += 1
            status[i] = FAILURE
            live = False
            resume = i + skip
            continue
        overlaps[i] = ov
        status[i] = TRACKED
    used = [o for o in overlaps if o is not None]
    acc = float(np.mean(used)) if used else 0.0
    return TrackEvalReport(acc, failures, failures / n if n else 0.0, n, len(used), overlaps, status)


class ScriptedTracker:
    """Replays fixed per-frame boxes; ``init`` returns the given box. Used as a test stub."""

    def __init__(self, boxes: Sequence[Rect], hook: Callable[[int], None] | None = None):
        self.boxes = list(boxes)
        self.hook = hook

    def init(self, frame, rect, index):
        return Rect(*rect)

    def update(self, frame, index):
        if self.hook is not None:
            self.hook(index)
        return self.boxes[index]


# --- detection evaluation ----------------------------------------------------


class PRF(NamedTuple):
    precision: float
    recall: float
    f: float


def f_measure(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def prf_counts(tp: float, fp: float, fn: float) -> PRF:
    """P, R and F from counts; P = 0 with no detections, R = 1 with no ground truth."""
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 1.0
    if tp + fp > 0 and tp + fn > 0:
        # same value as 2PR/(P+R) with a single rounding
        return PRF(p, r, 2 * tp / (2 * tp + fp + fn))
    return PRF(p, r, f_measure(p, r))


def _box_mask(shape, boxes: Sequence[Rect]) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    h, w = shape
    for b in boxes:
        c = Rect(*b).clip(w, h)
        if c is not None:
            m[c.y : c.y2, c.x : c.x2] = True
    return m


@dataclass
class PixelFrame:
    tp: int
    fp: int
    fn: int
    prf: PRF


def pixel_counts(mask, boxes: Sequence[Rect]) -> PixelFrame:
    m = np.asarray(mask, dtype=bool)
    g = _box_mask(m.shape, boxes)
    tp = int((m & g).sum())
    fp = int((m & ~g).sum())
    fn = int((~m & g).sum())
    if tp + fp == 0 and tp + fn == 0:
        prf = PRF(1.0, 1.0, 1.0)
    else:
        prf = prf_counts(tp, fp, fn)
    return PixelFrame(tp, fp, fn, prf)


def eval_pixelwise(masks: Sequence, gt: Sequence[Sequence[Rect]]) -> tuple[PRF, list[PixelFrame]]:
    """Per-frame pixel P/R/F averaged over frames. An empty frame with empty truth scores 1."""
    if len(masks) != len(gt):
        raise ContractError("masks and ground truth differ in length")
    per = [pixel_counts(m, g) for m, g in zip(masks, gt)]
    if not per:
        return PRF(0.0, 0.0, 0.0), per
    p = float(np.mean([x.prf.precision for x in per]))
    r = float(np.mean([x.prf.recall for x in per]))
    return PRF(p, r, f_measure(p, r)), per


def _region(b, shape):
    if isinstance(b, np.ndarray) and b.dtype == bool:
        return b
    return _box_mask(shape, [b])


@dataclass
class ObjectFrame:
    matched_blobs: int
    blobs: int
    matched_gt: int
    gt: int


def match_objects(blobs: Sequence, boxes: Sequence[Rect], tau: float = 0.5, shape=None) -> ObjectFrame:
    """Bidirectional matching: a blob and a box match when their intersection
    covers at least ``tau`` of either one. Merges and fragments are allowed.

    Blobs are ``Rect`` or boolean masks (then ``shape`` is taken from them).
    """
    if not 0 < tau <= 1:
        raise ContractError("tau must lie in (0, 1]")
    if shape is None:
        arrays = [b for b in blobs if isinstance(b, np.ndarray)]
        if arrays:
            shape = arrays[0].shape
        else:
            rects = [Rect(*r) for r in list(blobs) + list(boxes)]
            shape = (max([r.y2 for r in rects], default=1), max([r.x2 for r in rects], default=1))
    bm = [_region(b, shape) for b in blobs]
    gm = [_box_mask(shape, [g]) for g in boxes]
    hit = np.zeros((len(bm), len(gm)), dtype=bool)
    for i, b in enumerate(bm):
        nb = b.sum()
        for j, g in enumerate(gm):
            inter = (b & g).sum()
            ng = g.sum()
            hit[i, j] = (nb > 0 and inter / nb >= tau) or (ng > 0 and inter / ng >= tau)
    return ObjectFrame(int(hit.any(1).sum()), len(bm), int(hit.any(0).sum()), len(gm))


@dataclass
class ObjectReport:
    prf: PRF
    zero_gt: bool
    frames: list[ObjectFrame] = field(default_factory=list)


def eval_objectwise(blobs_per_frame: Sequence[Sequence], gt: Sequence[Sequence[Rect]], tau: float = 0.5) -> ObjectReport:
    """Object P/R/F from matched counts pooled over all frames.

    No detections gives P = 0; no ground truth gives R = 1 with ``zero_gt`` set.
    """
    if len(blobs_per_frame) != len(gt):
        raise ContractError("blobs and ground truth differ in length")
    per = [match_objects(b, g, tau) for b, g in zip(blobs_per_frame, gt)]
    mb = sum(x.matched_blobs for x in per)
    nb = sum(x.blobs for x in per)
    mg = sum(x.matched_gt for x in per)
    ng = sum(x.gt for x in per)
    p = mb / nb if nb else 0.0
    r = mg / ng if ng else 1.0
    return ObjectReport(PRF(p, r, f_measure(p, r)), ng == 0, per)


@dataclass
class DetEvalReport:
    pixel: PRF
    object: PRF
    zero_gt: bool
    pixel_frames: list[PixelFrame]
    object_frames: list[ObjectFrame]

    def summary(self) -> str:
        p, o = self.pixel, self.object
        return (
            f"pixel_precision={p.precision:.6f}\npixel_recall={p.recall:.6f}\npixel_f={p.f:.6f}\n"
            f"object_precision={o.precision:.6f}\nobject_recall={o.recall:.6f}\nobject_f={o.f:.6f}\n"
            f"zero_gt={int(self.zero_gt)}\n"
        )

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="ascii") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "tp", "fp", "fn", "precision", "recall", "f", "blobs", "matched_blobs", "gt", "matched_gt"])
            for i, (px, ob) in enumerate(zip(self.pixel_frames, self.object_frames)):
                w.writerow(
                    [i, px.tp, px.fp, px.fn, f"{px.prf.precision:.6f}", f"{px.prf.recall:.6f}", f"{px.prf.f:.6f}",
                     ob.blobs, ob.matched_blobs, ob.gt, ob.matched_gt]
                )


def eval_detection(masks: Sequence, gt: Sequence[Sequence[Rect]], tau: float = 0.5, min_blob: int = 1) -> DetEvalReport:
    """Pixel and object scores for binary masks; blobs are the masks' connected components."""
    from spct.motion import label_blobs

    pix, pix_frames = eval_pixelwise(masks, gt)
    blobs = []
    for m in masks:
        mm = label_blobs(np.asarray(m, dtype=bool), min_blob)
        blobs.append([mm.labels == b.id for b in mm.blobs])
    obj = eval_objectwise(blobs, gt, tau)
    return DetEvalReport(pix, obj.prf, obj.zero_gt, pix_frames, obj.frames)
