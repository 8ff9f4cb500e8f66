import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spct import tracker as tk
from spct.errors import ContractError, ImageFormatError
from spct.evaluation import eval_reset
from spct.fixtures import tracking_scene
from spct.imagecore import Rect
from spct.tracker import (
    F_CV,
    KalmanState,
    SPCTTracker,
    TrackerConfig,
    TrackRecord,
    Tracklet,
    align_roi,
    camshift_refine,
    kalman_fuse,
    kalman_init,
    kalman_predict,
    learn_direction,
    track_sequence,
)


# --- Kalman ------------------------------------------------------------------


def test_predict_constant_velocity():
    s, rect = kalman_predict(kalman_init(10, 20, 1, 2), (8, 6), 2.0)
    assert s.center == (11.0, 22.0)
    assert tuple(rect) == tuple(Rect.from_center(11, 22, 16, 12))
    assert kalman_predict(s)[1] is None


def test_predict_zero_velocity_grows_by_q():
    s0 = kalman_init(5, 5, alpha=2.0, q=0.3)
    s1, _ = kalman_predict(s0)
    assert s1.center == s0.center
    assert np.allclose(s1.P, F_CV @ s0.P @ F_CV.T + s0.Q)


@given(st.lists(st.floats(-50, 50), min_size=4, max_size=4), st.floats(0.01, 10), st.floats(0, 1))
def test_two_predicts_equal_f_squared(x, alpha, q):
    s0 = kalman_init(*x, alpha=alpha, q=q)
    s2, _ = kalman_predict(kalman_predict(s0)[0])
    F2 = F_CV @ F_CV
    assert np.allclose(s2.x, F2 @ s0.x, rtol=0, atol=1e-9)
    P2 = F2 @ s0.P @ F2.T + F_CV @ s0.Q @ F_CV.T + s0.Q
    assert np.allclose(s2.P, P2, rtol=0, atol=1e-9)


def test_fuse_limits():
    s, _ = kalman_predict(kalman_init(0, 0, alpha=100.0))
    hi = kalman_fuse(s, (10, -4), 1.0, beta=1e-9)
    assert np.allclose(hi.center, (10, -4), atol=1e-6)
    lo = kalman_fuse(s, (10, -4), tk.CONF_EPS, beta=1e9)
    assert np.allclose(lo.center, s.center, atol=1e-6)


def test_fuse_one_dimensional_oracle():
    # per axis the position block decouples: a 2x2 (pos, vel) filter
    s = kalman_init(3, -1, 0.5, 0.25, alpha=2.0, q=0.1)
    s, _ = kalman_predict(s)
    conf, beta, z = 0.8, 4.0, (7.0, 2.0)
    out = kalman_fuse(s, z, conf, beta)
    r = beta / conf
    for ax in (0, 1):
        idx = [ax, ax + 2]
        P = s.P[np.ix_(idx, idx)]
        x = s.x[idx]
        S = P[0, 0] + r
        k = P[:, 0] / S
        x1 = x + k * (z[ax] - x[0])
        P1 = P - np.outer(k, k) * S + 0.1 * np.eye(2)
        assert np.allclose(out.x[idx], x1, atol=1e-12)
        assert np.allclose(out.P[np.ix_(idx, idx)], P1, atol=1e-12)


@given(st.integers(0, 2**31), st.floats(0.01, 1.0))
def test_fuse_trace_bound_and_psd(seed, conf):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((4, 4))
    s = KalmanState(rng.standard_normal(4), A @ A.T + 0.1 * np.eye(4), 0.05 * np.eye(4))
    out = kalman_fuse(s, rng.standard_normal(2) * 10, conf)
    assert np.trace(out.P) <= np.trace(s.P) + np.trace(s.Q) + 1e-9
    assert np.allclose(out.P, out.P.T)
    np.linalg.cholesky(out.P)


def test_fuse_singular_warns_and_low_conf_rejected():
    s = KalmanState(np.zeros(4), np.diag([1e15, 0.0, 1, 1]), np.zeros((4, 4)))
    with pytest.warns(RuntimeWarning):
        kalman_fuse(s, (1, 1), 1.0, beta=1e-6)
    with pytest.raises(ContractError):
        kalman_fuse(kalman_init(0, 0), (1, 1), 1e-4)


def test_noiseless_constant_velocity_converges():
    s = kalman_init(0, 0)
    errs = []
    for t in range(1, 120):
        s, _ = kalman_predict(s)
        z = (3.0 * t, -1.5 * t)
        s = kalman_fuse(s, z, 0.9)
        errs.append(np.hypot(s.center[0] - z[0], s.center[1] - z[1]))
    assert errs[9] < 0.5
    # the closed loop is underdamped: the error envelope (its local maxima) shrinks
    e = np.array(errs[2:])
    peaks = e[1:-1][(e[1:-1] > e[:-2]) & (e[1:-1] >= e[2:])]
    assert len(peaks) >= 3
    assert np.all(np.diff(peaks) < 0)
    assert errs[-1] < 1e-3


# --- CAMSHIFT ----------------------------------------------------------------


def test_camshift_impulse():
    m = np.zeros((12, 12))
    m[7, 5] = 1
    r = camshift_refine(m, (3, 3), window=(7, 9))
    assert (r.x, r.y) == (5.0, 7.0) and not r.zero_mass


def blob(shape, cx, cy, s, a=1.0):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    return a * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))


def test_camshift_fixed_point():
    m = blob((41, 41), 20, 20, 3)
    r = camshift_refine(m, (20, 20), window=(11, 11))
    assert (r.x, r.y) == pytest.approx((20, 20), abs=1e-12)
    assert r.iterations == 1


def naive_mean_shift(m, x, y, ww, wh, delta, iters):
    h, w = m.shape
    for _ in range(iters):
        sx = sy = tot = 0.0
        for r in range(max(0, int(round(y - wh / 2))), min(h, int(round(y + wh / 2)) + 1)):
            for c in range(max(0, int(round(x - ww / 2))), min(w, int(round(x + ww / 2)) + 1)):
                sx += c * m[r, c]
                sy += r * m[r, c]
                tot += m[r, c]
        nx, ny = sx / tot, sy / tot
        d = np.hypot(nx - x, ny - y)
        x, y = nx, ny
        if d < delta:
            break
    return x, y


def test_camshift_two_lobes():
    m = blob((40, 60), 12, 20, 2.5, 0.5) + blob((40, 60), 45, 20, 3.0, 1.0)
    r = camshift_refine(m, (15, 21), delta=0.05, max_iter=50, window=(9, 9))
    assert abs(r.x - 12) < 0.5 and abs(r.y - 20) < 0.5
    ox, oy = naive_mean_shift(m, 15, 21, 9, 9, 0.05, 50)
    assert (r.x, r.y) == pytest.approx((ox, oy), abs=1e-12)


def test_camshift_zero_mass_and_contracts():
    r = camshift_refine(np.zeros((5, 5)), (2, 1))
    assert r.zero_mass and (r.x, r.y) == (2.0, 1.0)
    with pytest.raises(ContractError):
        camshift_refine(np.ones((5, 5)), (5, 1))
    with pytest.raises(ContractError):
        camshift_refine(np.ones((5, 5)), (1, 1), delta=0)


# --- direction ---------------------------------------------------------------


def test_direction_straight_east():
    pts = [(x, 10.0) for x in range(0, 50, 2)]
    assert learn_direction(pts, 20) == "E"
    assert learn_direction([(x, 5.0) for x in range(30, 0, -3)], 10) == "W"
    assert learn_direction([(5.0, y) for y in range(30, 0, -3)], 10) == "N"
    assert learn_direction([(5.0, y) for y in range(0, 30, 3)], 10) == "S"


def test_direction_short_path_unknown():
    assert learn_direction([(0, 0), (1, 0), (2, 1)], 10) == tk.UNKNOWN
    assert learn_direction([(0, 0)], 1) == tk.UNKNOWN


def test_direction_l_shape_trace():
    # 30 px east then 12 px south; walking back 10 px stays on the south leg
    pts = [(float(x), 0.0) for x in range(0, 31, 3)] + [(30.0, float(y)) for y in range(3, 13, 3)]
    assert learn_direction(pts, 10) == "S"
    # with a longer reach the walk-back ends on the east leg and x dominates
    assert learn_direction(pts, 25) == "E"


# --- alignment ---------------------------------------------------------------


def test_align_identity(rng):
    roi = rng.integers(0, 256, (9, 11)).astype(float)
    assert np.array_equal(align_roi(roi, (5, 4), 0), roi)


def test_align_ninety_is_permutation(rng):
    roi = rng.integers(0, 256, (9, 9)).astype(float)
    out = align_roi(roi, (4, 4), 90)
    # counter-clockwise as displayed, the same turn np.rot90 makes
    assert np.array_equal(out, np.rot90(roi))
    assert np.array_equal(align_roi(roi, (4, 4), 180), roi[::-1, ::-1])
    assert np.array_equal(align_roi(align_roi(roi, (4, 4), 90), (4, 4), 270), roi)


def test_align_turns_east_to_north():
    roi = np.zeros((9, 9))
    roi[4, 6:] = 1  # arm pointing east
    out = align_roi(roi, (4, 4), 90)
    assert out[:3, 4].tolist() == [1, 1, 1] and out[4, 5:].sum() == 0


def test_align_periodic(rng):
    roi = rng.random((10, 12)) * 255
    a = align_roi(roi, (5.5, 4.5), 360)
    assert np.allclose(a, roi, atol=1e-9)
    assert np.allclose(align_roi(roi, (5.5, 4.5), 397), align_roi(roi, (5.5, 4.5), 37), atol=1e-9)


@pytest.mark.parametrize("theta", [10, 30, 45, 77])
def test_align_round_trip_interior(theta):
    yy, xx = np.mgrid[0:41, 0:41]
    roi = 128 + 100 * np.sin(xx / 5.0) * np.cos(yy / 7.0)
    back = align_roi(align_roi(roi, (20, 20), theta), (20, 20), -theta)
    r = np.hypot(xx - 20, yy - 20) <= 12
    assert np.abs(back - roi)[r].max() <= 2.0


# --- model -------------------------------------------------------------------


@pytest.fixture(scope="module")
def scene():
    return tracking_scene(frames=12, seed=3)


def test_update_model_blending(scene):
    cfg = TrackerConfig()
    a = tk.build_model(scene.frames[0], scene.boxes[0], cfg)
    b = tk.build_model(scene.frames[5], scene.boxes[5], cfg)
    same = tk.update_model(a, b, 0.0)
    assert np.array_equal(same.template, a.template) and np.allclose(same.swhist, a.swhist)
    repl = tk.update_model(a, b, 1.0)
    assert np.array_equal(repl.template, b.template) and np.allclose(repl.phog.values, b.phog.values)
    half = tk.update_model(a, b, 0.5)
    assert np.allclose(half.template, (a.template + b.template) / 2)
    assert np.allclose(half.color.fg, (a.color.fg + b.color.fg) / 2)
    assert half.swhist.sum() == pytest.approx(1.0)
    with pytest.raises(ContractError):
        tk.update_model(a, b, 1.5)
    small = tk.build_model(scene.frames[0], Rect(10, 10, 8, 8), cfg)
    with pytest.raises(ContractError):
        tk.update_model(a, small, 0.5)


# --- tracking loop -----------------------------------------------------------


def center_errors(track, boxes):
    return [np.hypot(r.cx - (b.x + b.w / 2), r.cy - (b.y + b.h / 2)) for r, b in zip(track, boxes)]


def test_static_target():
    sc = tracking_scene(frames=15, velocity=(0, 0), start=(60, 50), seed=1)
    tr = track_sequence(sc.frames, sc.boxes[0])
    assert max(center_errors(tr, sc.boxes)) <= 1.0
    rep = eval_reset(SPCTTracker(), sc.frames, sc.boxes)
    assert rep.robustness == 0


@pytest.mark.parametrize("velocity", [(2, 0), (0, 2), (2, 1)])
def test_linear_motion(velocity):
    sc = tracking_scene(frames=25, velocity=velocity, start=(30, 30), seed=2)
    tr = track_sequence(sc.frames, sc.boxes[0])
    assert max(center_errors(tr, sc.boxes)) <= 1.0


def test_occlusion_follows_constant_velocity():
    sc = tracking_scene(frames=40, occlude=(18, 5), seed=0)
    tr = track_sequence(sc.frames, sc.boxes[0])
    errs = center_errors(tr, sc.boxes)
    for t in range(18, 23):
        assert tr[t].source == "fused-kf"
        assert errs[t] <= 2.0
    assert max(errs[23:]) <= 1.0
    assert all(tr[t].source == "features" for t in range(26, 40))


def test_teleport_is_a_failure():
    a = tracking_scene(frames=10, velocity=(0, 0), start=(20, 52), seed=4)
    b = tracking_scene(frames=10, velocity=(0, 0), start=(130, 52), seed=4)
    frames = a.frames[:5] + b.frames[5:]
    gt = a.boxes[:5] + b.boxes[5:]
    rep = eval_reset(SPCTTracker(), frames, gt)
    assert rep.robustness == 1
    assert rep.status[5] == "failure"


def test_thread_count_does_not_change_results():
    sc = tracking_scene(frames=12, seed=5)
    runs = [track_sequence(sc.frames, sc.boxes[0], TrackerConfig(threads=n)) for n in (1, 4)]
    assert [r.line() for r in runs[0]] == [r.line() for r in runs[1]]


def test_first_record_and_contracts(scene):
    t = SPCTTracker()
    with pytest.raises(ContractError):
        t.update(scene.frames[0])
    rec = t.init(scene.frames[0], scene.boxes[0])
    assert rec.source == "reinit" and rec.conf == 1.0
    with pytest.raises(ContractError):
        SPCTTracker().init(scene.frames[0], Rect(150, 100, 20, 30))
    with pytest.raises(ContractError):
        track_sequence([], Rect(0, 0, 4, 4))


# --- config and tracklets ----------------------------------------------------


def test_config_parse(tmp_path):
    cfg = TrackerConfig.parse("# weights\nweights.ncc = 0.5\nweights.phog=0\nconf_tau=0.3 # lower\nmotion_gate=false\nhist_bins=8\n")
    assert cfg.weight_ncc == 0.5 and cfg.weight_phog == 0 and cfg.conf_tau == 0.3
    assert cfg.motion_gate is False and cfg.hist_bins == 8
    assert cfg.weights == {"ncc": 0.5, "color": 0.3, "hist": 0.2, "phog": 0.0}
    p = tmp_path / "spct.cfg"
    p.write_text("beta=2\n")
    assert TrackerConfig.load(p).beta == 2.0
    for bad in ("nonsense", "color=1", "beta=abc"):
        with pytest.raises(ContractError):
            TrackerConfig.parse(bad)


def test_tracklet_round_trip(tmp_path):
    recs = [TrackRecord(0, 10.5, 20.25, Rect(2, 12, 17, 17), 1.0, "reinit"), TrackRecord(1, 12.0, 20.0, Rect(4, 12, 17, 17), 0.731, "features")]
    tr = Tracklet(recs)
    p = tmp_path / "t.txt"
    tr.save(p)
    assert p.read_text().splitlines()[1] == "1,12.000,20.000,4,12,17,17,0.731000,features"
    back = Tracklet.load(p)
    assert back.centers() == tr.centers() and back.rects() == tr.rects()
    with pytest.raises(ContractError):
        tr.append(TrackRecord(1, 0, 0, Rect(0, 0, 1, 1), 0.5, "features"))
    with pytest.raises(ContractError):
        tr.append(TrackRecord(5, 0, 0, Rect(0, 0, 1, 1), 0.5, "guess"))
    p.write_text("1,2,3\n")
    with pytest.raises(ImageFormatError):
        Tracklet.load(p)
