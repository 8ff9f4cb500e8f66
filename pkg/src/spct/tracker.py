"""Single-target tracker: likelihood fusion, Kalman prediction and fusion,
direction-aligned template matching and blended model updates.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from spct import features, likelihood, swih
from spct._parallel import map_ordered
from spct.errors import ContractError, ImageFormatError
from spct.imagecore import Rect, as_gray, quantize
from spct.likelihood import ColorModel

CONF_EPS = 1e-3
DIRECTIONS = ("E", "N", "W", "S")
DIRECTION_ANGLE = {"E": 0.0, "N": 90.0, "W": 180.0, "S": 270.0}
UNKNOWN = "Unknown"
SOURCES = ("features", "fused-kf", "reinit")


# --- Kalman ------------------------------------------------------------------

F_CV = np.array([[1.0, 0, 1, 0], [0, 1, 0, 1], [0, 0, 1, 0], [0, 0, 0, 1]])
H_POS = np.array([[1.0, 0, 0, 0], [0, 1, 0, 0]])


@dataclass(frozen=True)
class KalmanState:
    """Constant-velocity state ``[cx, cy, vx, vy]`` with covariance."""

    x: np.ndarray
    P: np.ndarray
    Q: np.ndarray = field(default_factory=lambda: 0.01 * np.eye(4))
    F: np.ndarray = field(default_factory=lambda: F_CV.copy())
    H: np.ndarray = field(default_factory=lambda: H_POS.copy())

    @property
    def center(self) -> tuple[float, float]:
        return float(self.x[0]), float(self.x[1])

    @property
    def velocity(self) -> tuple[float, float]:
        return float(self.x[2]), float(self.x[3])


def kalman_init(cx: float, cy: float, vx: float = 0.0, vy: float = 0.0, alpha: float = 1.0, q: float = 0.01) -> KalmanState:
    return KalmanState(np.array([cx, cy, vx, vy], dtype=np.float64), alpha * np.eye(4), q * np.eye(4))


def kalman_predict(state: KalmanState, scale: tuple[int, int] | None = None, search_factor: float = 2.0):
    """``x' = F x``, ``P' = F P F^T + Q`` and the search window around ``x'``.

    Returns ``(state, rect)``; ``rect`` is ``None`` when no ``scale`` is given.
    """
    x = state.F @ state.x
    P = state.F @ state.P @ state.F.T + state.Q
    new = replace(state, x=x, P=0.5 * (P + P.T))
    if scale is None:
        return new, None
    sw = max(int(round(scale[0] * search_factor)), scale[0])
    sh = max(int(round(scale[1] * search_factor)), scale[1])
    return new, Rect.from_center(x[0], x[1], sw, sh)


def kalman_fuse(state: KalmanState, z, conf: float, beta: float = 4.0) -> KalmanState:
    """Measurement update with ``R = beta / conf * I``.

    Covariance follows ``P - W S W^T + Q``. A singular ``S`` is regularised
    with ``CONF_EPS * I`` and reported as a warning.
    """
    if not conf >= CONF_EPS:
        raise ContractError(f"confidence must be >= {CONF_EPS}, got {conf}")
    z = np.asarray(z, dtype=np.float64)
    R = (beta / min(conf, 1.0)) * np.eye(2)
    H, P = state.H, state.P
    S = H @ P @ H.T + R
    if np.linalg.cond(S) > 1e12:
        warnings.warn("innovation covariance is singular; regularised", RuntimeWarning, stacklevel=2)
        S = S + CONF_EPS * np.eye(2)
    W = P @ H.T @ np.linalg.inv(S)
    x = state.x + W @ (z - H @ state.x)
    P = P - W @ S @ W.T + state.Q
    return replace(state, x=x, P=0.5 * (P + P.T))


# --- refinement & geometry ---------------------------------------------------


class CamshiftResult(NamedTuple):
    x: float
    y: float
    iterations: int
    zero_mass: bool


def camshift_refine(
    lmap, init, delta: float = 0.5, max_iter: int = 20, window: tuple[int, int] | None = None
) -> CamshiftResult:
    """Move a window to the weighted centroid of the map until it settles.

    Iterates while the centre moves by at least ``delta``. ``window`` is
    ``(w, h)``; by default the whole map.
    """
    m = np.asarray(lmap, dtype=np.float64)
    h, w = m.shape
    x, y = float(init[0]), float(init[1])
    if not (0 <= x < w and 0 <= y < h):
        raise ContractError("initial point lies outside the map")
    if delta <= 0:
        raise ContractError("delta must be positive")
    ww, wh = window if window is not None else (2 * w + 1, 2 * h + 1)
    it = 0
    for it in range(1, max_iter + 1):
        x0 = max(0, int(round(x - ww / 2.0)))
        y0 = max(0, int(round(y - wh / 2.0)))
        x1 = min(w, int(round(x + ww / 2.0)) + 1)
        y1 = min(h, int(round(y + wh / 2.0)) + 1)
        sub = m[y0:y1, x0:x1]
        mass = sub.sum()
        if mass <= 0:
            return CamshiftResult(x, y, it, True)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        nx, ny = float((xs * sub).sum() / mass), float((ys * sub).sum() / mass)
        d = math.hypot(nx - x, ny - y)
        x, y = nx, ny
        if d < delta:
            break
    return CamshiftResult(x, y, it, False)


def _rotation(theta: float) -> tuple[float, float]:
    t = theta % 360.0
    exact = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}
    if t in exact:
        return exact[t]
    r = math.radians(t)
    return math.cos(r), math.sin(r)


def align_roi(roi, center, theta: float) -> np.ndarray:
    """Rotate ``roi`` by ``theta`` degrees about ``center`` (translate, rotate, translate back).

    Positive angles turn counter-clockwise as displayed (image y points down),
    matching the compass angles E=0, N=90. Inverse warping with bilinear
    sampling; samples falling outside are 0.
    """
    img = np.asarray(roi, dtype=np.float64)
    if img.ndim != 2:
        raise ContractError("align_roi expects a 2-D image")
    c, s = _rotation(theta)
    h, w = img.shape
    cx, cy = center
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse rotation maps every output pixel back into the source
    sx = c * (xs - cx) - s * (ys - cy) + cx
    sy = s * (xs - cx) + c * (ys - cy) + cy
    tol = 1e-9
    inside = (sx >= -tol) & (sx <= w - 1 + tol) & (sy >= -tol) & (sy <= h - 1 + tol)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = sx - x0, sy - y0
    out = (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x1] * fx * (1 - fy)
        + img[y1, x0] * (1 - fx) * fy
        + img[y1, x1] * fx * fy
    )
    return np.where(inside, out, 0.0)


# --- tracklets ---------------------------------------------------------------


class TrackRecord(NamedTuple):
    frame: int
    cx: float
    cy: float
    rect: Rect
    conf: float
    source: str

    def line(self) -> str:
        r = self.rect
        return f"{self.frame},{self.cx:.3f},{self.cy:.3f},{r.x},{r.y},{r.w},{r.h},{self.conf:.6f},{self.source}"


class Tracklet:
    """Append-only per-frame track records with strictly increasing frame index."""

    def __init__(self, records: Iterable[TrackRecord] = ()):
        self.records: list[TrackRecord] = []
        for r in records:
            self.append(r)

    def append(self, rec: TrackRecord) -> None:
        if self.records and rec.frame <= self.records[-1].frame:
            raise ContractError("tracklet frame indices must increase")
        if rec.source not in SOURCES:
            raise ContractError(f"unknown record source {rec.source!r}")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def centers(self) -> list[tuple[float, float]]:
        return [(r.cx, r.cy) for r in self.records]

    def rects(self) -> list[Rect]:
        return [r.rect for r in self.records]

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("".join(r.line() + "\n" for r in self.records))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Tracklet":
        recs = []
        with open(path, "r", encoding="ascii") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                p = line.strip().split(",")
                if len(p) != 9:
                    raise ImageFormatError(f"tracklet line {n}: expected 9 fields")
                recs.append(
                    TrackRecord(int(p[0]), float(p[1]), float(p[2]), Rect(*(int(v) for v in p[3:7])), float(p[7]), p[8])
                )
        return cls(recs)


def learn_direction(centers: Sequence[tuple[float, float]], min_dist: float) -> str:
    """Dominant-axis heading from the most recent displacement of at least ``min_dist``.

    Walks back from the newest position one frame at a time until the
    straight-line distance reaches ``min_dist``. Image y grows downwards, so
    ``N`` means decreasing y. Ties between axes go to the x axis.
    """
    pts = [tuple(map(float, c)) for c in centers]
    if len(pts) < 2:
        return UNKNOWN
    cur = pts[-1]
    prev = len(pts) - 2
    dist = math.dist(cur, pts[prev])
    while dist < min_dist and prev > 0:
        prev -= 1
        dist = math.dist(cur, pts[prev])
    if dist < min_dist:
        return UNKNOWN
    dx, dy = cur[0] - pts[prev][0], cur[1] - pts[prev][1]
    if abs(dx) >= abs(dy):
        return "E" if dx > 0 else "W"
    return "S" if dy > 0 else "N"


# --- target model ------------------------------------------------------------


@dataclass(frozen=True)
class TrackerConfig:
    weight_ncc: float = 0.3
    weight_color: float = 0.3
    weight_hist: float = 0.2
    weight_phog: float = 0.2
    alpha: float = 1.0
    q: float = 0.01
    beta: float = 4.0
    conf_tau: float = 0.4
    search_factor: float = 2.0
    update_alpha: float = 0.1
    hist_bins: int = 16
    phog_levels: int = 1
    phog_bins: int = 8
    bg_margin: int = 8
    camshift_delta: float = 0.5
    camshift_iters: int = 5
    min_dist: float = 0.0  # 0 means twice the larger template side
    learn_direction: bool = True
    motion_gate: bool = True
    motion_tau: float = 15.0
    motion_min_frac: float = 0.05
    threads: int = 1

    _KEYS = {
        "weights.ncc": "weight_ncc",
        "weights.color": "weight_color",
        "weights.hist": "weight_hist",
        "weights.phog": "weight_phog",
    }

    @classmethod
    def parse(cls, text: str) -> "TrackerConfig":
        """``key=value`` lines; ``#`` starts a comment. Dotted weight keys are accepted."""
        names = {f.name: f for f in fields(cls)}
        kw = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"config line {n}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            name = cls._KEYS.get(key, key.replace(".", "_").replace("-", "_"))
            if name not in names:
                raise ContractError(f"config line {n}: unknown key {key!r}")
            default = names[name].default
            try:
                if isinstance(default, bool):
                    kw[name] = val.lower() in ("1", "true", "yes", "on")
                else:
                    kw[name] = type(default)(val)
            except ValueError:
                raise ContractError(f"config line {n}: bad value {val!r} for {key}") from None
        return cls(**kw)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrackerConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.parse(fh.read())

    @property
    def weights(self) -> dict[str, float]:
        return {"ncc": self.weight_ncc, "color": self.weight_color, "hist": self.weight_hist, "phog": self.weight_phog}


@dataclass(frozen=True)
class TargetModel:
    template: np.ndarray
    color: ColorModel | None
    phog: features.PHoG | None
    swhist: np.ndarray
    scale: tuple[int, int]
    direction: str = UNKNOWN


def _fit_rect(r: Rect, w: int, h: int) -> Rect:
    """Shift (and if needed shrink) ``r`` so it lies inside a ``w x h`` image."""
    rw, rh = min(r.w, w), min(r.h, h)
    x = min(max(r.x, 0), w - rw)
    y = min(max(r.y, 0), h - rh)
    return Rect(x, y, rw, rh)


def _phog_chip(scale, levels):
    s = 2**levels
    cw, ch = scale[0] - scale[0] % s, scale[1] - scale[1] % s
    return (cw, ch) if cw >= s and ch >= s else None


def _phog_at(gray, rect: Rect, cfg: TrackerConfig) -> features.PHoG | None:
    chip = _phog_chip((rect.w, rect.h), cfg.phog_levels)
    if chip is None:
        return None
    h, w = gray.shape
    pad = 4
    ctx = Rect(rect.x - pad, rect.y - pad, rect.w + 2 * pad, rect.h + 2 * pad).clip(w, h)
    sub = gray[ctx.y : ctx.y2, ctx.x : ctx.x2]
    field_ = features.pyramid_hog(sub, cfg.phog_levels, cfg.phog_bins, chip[0], chip[1])
    return field_.at(rect.x - ctx.x, rect.y - ctx.y)


def _swhist(gray_chip, cfg: TrackerConfig) -> np.ndarray:
    bm = quantize(gray_chip, cfg.hist_bins)
    spec = swih.KernelSpec(bm.width, bm.height)
    return swih.brute_force_swlh(bm, (spec.left, spec.top), spec)


def build_model(frame, rect: Rect, cfg: TrackerConfig, direction: str = UNKNOWN) -> TargetModel:
    frame = np.asarray(frame)
    gray = as_gray(frame).astype(np.float64)
    chip = gray[rect.y : rect.y2, rect.x : rect.x2]
    color = likelihood.model_fg_bg(frame, rect, cfg.bg_margin) if frame.ndim == 3 else None
    return TargetModel(chip.copy(), color, _phog_at(gray, rect, cfg), _swhist(chip, cfg), (rect.w, rect.h), direction)


def update_model(model: TargetModel, new: TargetModel, alpha: float) -> TargetModel:
    """Blend every descriptor: ``alpha * new + (1 - alpha) * old``; histograms renormalised."""
    if not 0 <= alpha <= 1:
        raise ContractError("alpha must lie in [0, 1]")
    if new.template.shape != model.template.shape or new.swhist.shape != model.swhist.shape:
        raise ContractError("descriptor dimensions differ")
    tmpl = alpha * new.template + (1 - alpha) * model.template
    sw = alpha * new.swhist + (1 - alpha) * model.swhist
    sw = sw / sw.sum() if sw.sum() > 0 else sw
    color = model.color
    if model.color is not None and new.color is not None:
        color = likelihood.blend_color_models(model.color, new.color, alpha)
    phog = model.phog
    if model.phog is not None and new.phog is not None:
        v = alpha * new.phog.values + (1 - alpha) * model.phog.values
        phog = features.PHoG(v, model.phog.levels, model.phog.bins)
    return replace(model, template=tmpl, swhist=sw, color=color, phog=phog)


# --- tracking loop -----------------------------------------------------------


def peak_confidence(height: float, fused) -> float:
    """Peak prominence over the map median, scaled so a perfect match scores 1.

    Channel maps sit well above 0 on plain background (NCC maps zero
    correlation to 0.5), so the raw peak height alone cannot flag a lost target.
    """
    med = float(np.median(fused))
    if med >= 1.0:
        return 0.0
    return float(np.clip((height - med) / (1.0 - med), 0.0, 1.0))


class Candidate(NamedTuple):
    cx: float
    cy: float
    conf: float
    fused: np.ndarray | None


class SPCTTracker:
    """Frame-by-frame tracker; ``init`` then ``update`` once per frame."""

    def __init__(self, config: TrackerConfig | None = None):
        self.cfg = config or TrackerConfig()
        self.state: KalmanState | None = None
        self.model: TargetModel | None = None
        self.reference_direction = UNKNOWN
        self.centers: list[tuple[float, float]] = []
        self.frame_index = -1

    def init(self, frame, rect: Rect, frame_index: int = 0) -> TrackRecord:
        frame = np.asarray(frame)
        rect = Rect(*rect)
        h, w = frame.shape[:2]
        if not rect.inside(w, h):
            raise ContractError(f"initial box {tuple(rect)} outside the {w}x{h} frame")
        self.model = build_model(frame, rect, self.cfg)
        cx, cy = rect.center
        self.state = kalman_init(cx, cy, alpha=self.cfg.alpha, q=self.cfg.q)
        self.centers = [(cx, cy)]
        self.reference_direction = UNKNOWN
        self.frame_index = frame_index
        self._initialised_velocity = False
        self._prev_gray = as_gray(frame).astype(np.float64)
        return TrackRecord(frame_index, cx, cy, rect, 1.0, "reinit")

    # channels ---------------------------------------------------------------

    def _template(self) -> np.ndarray:
        m = self.model
        if m.direction == UNKNOWN or self.reference_direction == UNKNOWN:
            return m.template
        theta = (DIRECTION_ANGLE[m.direction] - DIRECTION_ANGLE[self.reference_direction]) % 360.0
        if theta == 0:
            return m.template
        h, w = m.template.shape
        return align_roi(m.template, ((w - 1) / 2.0, (h - 1) / 2.0), theta)

    def _channels(self, frame, gray, search: Rect) -> list[tuple[str, np.ndarray]]:
        m, cfg = self.model, self.cfg
        tw, th = m.scale
        sg = gray[search.y : search.y2, search.x : search.x2]
        ny, nx = sg.shape[0] - th + 1, sg.shape[1] - tw + 1

        def ncc():
            return likelihood.ncc_map(sg, self._template())

        def color():
            sc = frame[search.y : search.y2, search.x : search.x2]
            return likelihood.box_mean(likelihood.color_ratio_map(sc, m.color), th, tw)

        def hist():
            bm = quantize(sg, cfg.hist_bins)
            spec = swih.KernelSpec(tw, th)
            field_ = swih.local_histogram_field(bm, spec, "exact")
            return likelihood.hist_field_map(field_, m.swhist)

        def phog():
            chip = _phog_chip(m.scale, cfg.phog_levels)
            field_ = features.pyramid_hog(sg, cfg.phog_levels, cfg.phog_bins, chip[0], chip[1])
            return likelihood.phog_map(field_, m.phog)[:ny, :nx]

        jobs = [("ncc", ncc), ("hist", hist)]
        if m.color is not None and frame.ndim == 3:
            jobs.append(("color", color))
        if m.phog is not None and m.phog.values.sum() > 0:
            jobs.append(("phog", phog))
        jobs = [(name, fn) for name, fn in jobs if cfg.weights[name] > 0]
        order = ("ncc", "color", "hist", "phog")
        jobs.sort(key=lambda j: order.index(j[0]))
        maps = map_ordered(lambda j: j[1](), jobs, cfg.threads)
        return [(name, mp) for (name, _), mp in zip(jobs, maps)]

    def _measure(self, frame, gray, search: Rect) -> Candidate:
        chans = self._channels(frame, gray, search)
        if not chans:
            return Candidate(0.0, 0.0, 0.0, None)
        fused = likelihood.fuse_maps([m for _, m in chans], [self.cfg.weights[n] for n, _ in chans])
        peaks = likelihood.find_peaks(fused)
        if not peaks:
            return Candidate(0.0, 0.0, 0.0, fused)
        best = peaks[0]
        conf = peak_confidence(best.height, fused)
        # peaks are ranked on the 3x3-smoothed map; locate on the raw one
        y0, x0 = max(best.y - 1, 0), max(best.x - 1, 0)
        nb = fused[y0 : best.y + 2, x0 : best.x + 2]
        dv, du = np.unravel_index(int(np.argmax(nb)), nb.shape)
        u, v = float(x0 + du), float(y0 + dv)
        if self.cfg.camshift_iters > 0:
            # centroid snap over the immediate neighbourhood of the peak's prominence
            prom = np.maximum(fused - np.median(fused), 0.0)
            ref = camshift_refine(prom, (u, v), self.cfg.camshift_delta, self.cfg.camshift_iters, (3, 3))
            if not ref.zero_mass:
                u, v = ref.x, ref.y
        tw, th = self.model.scale
        return Candidate(search.x + u + tw / 2.0, search.y + v + th / 2.0, conf, fused)

    def _search_rect(self, pred: Rect, w: int, h: int) -> Rect:
        tw, th = self.model.scale
        r = _fit_rect(pred, w, h)
        if r.w < tw or r.h < th:
            r = _fit_rect(Rect(r.x, r.y, max(r.w, tw), max(r.h, th)), w, h)
        return r

    def _moving(self, gray, rect: Rect) -> bool:
        """Frame-difference gate: does ``rect`` contain enough changed pixels?"""
        if not self.cfg.motion_gate:
            return True
        h, w = gray.shape
        r = rect.clip(w, h)
        if r is None:
            return False
        diff = np.abs(gray[r.y : r.y2, r.x : r.x2] - self._prev_gray[r.y : r.y2, r.x : r.x2])
        return float(np.mean(diff > self.cfg.motion_tau)) >= self.cfg.motion_min_frac

    def update(self, frame, frame_index: int | None = None) -> TrackRecord:
        if self.state is None:
            raise ContractError("tracker used before init")
        frame = np.asarray(frame)
        gray = as_gray(frame).astype(np.float64)
        h, w = gray.shape
        cfg, m = self.cfg, self.model
        tw, th = m.scale
        self.frame_index = self.frame_index + 1 if frame_index is None else frame_index

        pred, search = kalman_predict(self.state, m.scale, cfg.search_factor)
        search = self._search_rect(search, w, h)
        cand = self._measure(frame, gray, search)
        conf = float(np.clip(cand.conf, 0.0, 1.0))

        if cand.fused is None or conf < CONF_EPS:
            self.state = pred
            source = "fused-kf"
            cx, cy = pred.center
        elif conf >= cfg.conf_tau:
            source = "features"
            cx, cy = cand.cx, cand.cy
            if not self._initialised_velocity and len(self.centers) == 1:
                # velocity from the first two frames
                px, py = self.centers[0]
                self.state = kalman_init(cx, cy, cx - px, cy - py, cfg.alpha, cfg.q)
                self._initialised_velocity = True
            else:
                self.state = kalman_fuse(pred, (cx, cy), conf, cfg.beta)
        else:
            source = "fused-kf"
            if self._moving(gray, Rect.from_center(cand.cx, cand.cy, tw, th)):
                self.state = kalman_fuse(pred, (cand.cx, cand.cy), conf, cfg.beta)
            else:
                self.state = pred
            cx, cy = self.state.center

        rect = Rect.from_center(cx, cy, tw, th)
        self.centers.append((cx, cy))
        if source == "features":
            fit = _fit_rect(rect, w, h)
            if fit.w == tw and fit.h == th:
                new = build_model(frame, fit, cfg, m.direction)
                m = update_model(m, new, cfg.update_alpha)
        if cfg.learn_direction:
            d = learn_direction(self.centers, cfg.min_dist or 2 * max(tw, th))
            if d != UNKNOWN:
                if self.reference_direction == UNKNOWN:
                    self.reference_direction = d
                m = replace(m, direction=d)
        self.model = m
        self._prev_gray = gray
        return TrackRecord(self.frame_index, cx, cy, rect, conf, source)


def track_sequence(frames: Iterable, init: Rect, config: TrackerConfig | None = None) -> Tracklet:
    """Track through ``frames`` starting from box ``init`` on the first frame."""
    it = iter(frames)
    try:
        first = next(it)
    except StopIteration:
        raise ContractError("empty frame sequence") from None
    tracker = SPCTTracker(config)
    out = Tracklet([tracker.init(first, init, 0)])
    for i, frame in enumerate(it, start=1):
        out.append(tracker.update(frame, i))
    return out
