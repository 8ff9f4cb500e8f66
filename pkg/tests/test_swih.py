import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spct import integral, swih
from spct.errors import ContractError
from spct.fixtures import natural_image
from spct.imagecore import BinMap, quantize
from spct.integral import FIXED_ONE, ScanSchedule
from spct.swih import KernelSpec


@st.composite
def draws(draw):
    h = draw(st.integers(1, 14))
    w = draw(st.integers(1, 14))
    b = draw(st.integers(1, 6))
    kw = draw(st.integers(1, w))
    kh = draw(st.integers(1, h))
    seed = draw(st.integers(0, 2**31))
    bm = BinMap(np.random.default_rng(seed).integers(0, b, (h, w)), b)
    spec = KernelSpec(kw, kh)
    cx = draw(st.integers(spec.left, w - (kw - spec.left)))
    cy = draw(st.integers(spec.top, h - (kh - spec.top)))
    return bm, spec, (cx, cy)


def manhattan(spec: KernelSpec) -> np.ndarray:
    """Kernel weights straight from the city-block definition."""
    out = np.zeros((spec.kh, spec.kw), dtype=np.int64)
    for j in range(spec.kh):
        for i in range(spec.kw):
            dx = abs(i - spec.left) if spec.kw > 1 else 0
            dy = abs(j - spec.top) if spec.kh > 1 else 0
            out[j, i] = spec.max_weight - dx - dy
    return out


def test_kernel_spec():
    s = KernelSpec.parse("31x21")
    assert (s.kw, s.kh, s.max_weight, s.left, s.top) == (31, 21, 26, 15, 10)
    assert np.array_equal(s.weights(), manhattan(s))
    assert s.weights().min() >= 1
    with pytest.raises(ContractError):
        KernelSpec(0, 3)
    with pytest.raises(ContractError):
        KernelSpec.parse("31")
    with pytest.raises(ContractError):
        KernelSpec(3, 3, "gaussian")


def test_one_by_one_fields_constant():
    fields = swih.quadrant_weight_fields(5, 4, KernelSpec(1, 1))
    for f in fields.values():
        assert np.all(f.weights == f.weights[0, 0])


def test_fields_ramp_and_symmetry():
    spec = KernelSpec(4, 4)
    f = swih.quadrant_weight_fields(6, 5, spec)
    se = f["SE"].weights
    assert np.all(np.diff(se, axis=1) == -1) and np.all(np.diff(se, axis=0) == -1)
    assert np.array_equal(f["NW"].weights, se[::-1, ::-1])
    assert np.array_equal(f["NE"].weights, f["SW"].weights[::-1, ::-1])
    csum = (6 - 1) + (5 - 1) + 2
    assert np.all(f["SE"].weights + f["NW"].weights == csum)
    assert np.all(f["SW"].weights + f["NE"].weights == csum)


@pytest.mark.parametrize("kw,kh", [(4, 4), (5, 3), (1, 6), (7, 1)])
def test_quadrant_ramps_reproduce_kernel(kw, kh):
    # every quadrant restricted to the window equals the kernel up to one constant
    spec = KernelSpec(kw, kh)
    W, H = 12, 11
    fields = swih.quadrant_weight_fields(W, H, spec)
    cx, cy = 6, 5
    win = spec.window(cx, cy)
    k = manhattan(spec)
    ys, xs = np.mgrid[win.y : win.y2, win.x : win.x2]
    quadrant = {
        "SE": (xs >= cx) & (ys >= cy),
        "SW": (xs < cx) & (ys >= cy),
        "NE": (xs >= cx) & (ys < cy),
        "NW": (xs < cx) & (ys < cy),
    }
    for d, sel in quadrant.items():
        if not sel.any():
            continue
        diff = k[sel] - fields[d].weights[ys[sel], xs[sel]]
        assert np.all(diff == diff[0])


def test_build_weighted_ih(rng):
    bm = BinMap(rng.integers(0, 4, (16, 16)), 4)
    ones = swih.WeightField(np.ones((16, 16)), "SE")
    t = swih.build_weighted_ih(bm, ones)
    assert np.array_equal(t.data, integral.build(bm).signed() * FIXED_ONE)
    zero = swih.build_weighted_ih(bm, swih.WeightField(np.zeros((16, 16)), "SE"))
    assert not zero.data.any()
    field = rng.random((16, 16)) * 5
    t = swih.build_weighted_ih(bm, swih.WeightField(field, "NW"), ScanSchedule("cw-tis", 4))
    fixed = np.rint(field * FIXED_ONE).astype(np.int64)
    for k in range(4):
        direct = np.zeros((17, 17), dtype=np.int64)
        for y in range(16):
            for x in range(16):
                direct[y + 1, x + 1] = direct[y, x + 1] + direct[y + 1, x] - direct[y, x] + (fixed[y, x] if bm.data[y, x] == k else 0)
        assert np.array_equal(t.data[k], direct)
    with pytest.raises(ContractError):
        swih.build_weighted_ih(bm, swih.WeightField(np.ones((3, 3)), "SE"))


@given(draws())
def test_swlh_exact_against_brute_force(d):
    bm, spec, c = d
    qset = swih.build_quadrant_set(bm, spec)
    raw = swih.swlh_query(qset, c, spec, raw=True)
    assert np.array_equal(raw, swih.brute_force_swlh(bm, c, spec, raw=True))
    assert np.array_equal(swih.swlh_query(qset, c, spec), swih.brute_force_swlh(bm, c, spec))


def test_swlh_exhaustive_eight_by_eight(rng):
    bm = BinMap(rng.integers(0, 3, (8, 8)), 3)
    for kw in range(1, 9):
        for kh in range(1, 9):
            spec = KernelSpec(kw, kh)
            qset = swih.build_quadrant_set(bm, spec)
            xs, ys = swih.valid_centers(8, 8, spec)
            gx, gy = np.meshgrid(xs, ys)
            fast = swih.swlh_batch(qset, gx.ravel(), gy.ravel(), spec, raw=True)
            slow = np.stack([swih.brute_force_swlh(bm, (x, y), spec, raw=True) for x, y in zip(gx.ravel(), gy.ravel())])
            assert np.array_equal(fast, slow)


def test_swlh_degenerate_cases(rng):
    bm = BinMap(np.full((9, 9), 2), 4)
    spec = KernelSpec(5, 5)
    q = swih.build_quadrant_set(bm, spec)
    raw = swih.swlh_query(q, (4, 4), spec, raw=True)
    assert raw[2] == spec.weights().sum() * FIXED_ONE and raw.sum() == raw[2]
    assert np.array_equal(swih.swlh_query(q, (4, 4), spec), [0, 0, 1, 0])
    bm = BinMap(rng.integers(0, 4, (9, 9)), 4)
    one = KernelSpec(1, 1)
    h = swih.swlh_query(swih.build_quadrant_set(bm, one), (3, 6), one)
    assert h[bm.data[6, 3]] == 1 and h.sum() == 1


def test_brute_force_unit_weight_kernel(rng):
    bm = BinMap(rng.integers(0, 4, (5, 5)), 4)
    spec = KernelSpec(1, 5)  # flat along x, ramp along y
    spec_flat = KernelSpec(1, 1)
    assert swih.brute_force_swlh(bm, (2, 2), spec_flat).sum() == pytest.approx(1.0)
    h = swih.brute_force_swlh(bm, (2, 2), spec, raw=True)
    w = np.array([1, 2, 3, 2, 1]) * FIXED_ONE
    assert h.sum() == w.sum()


def test_query_out_of_bounds(rng):
    bm = BinMap(rng.integers(0, 2, (6, 6)), 2)
    spec = KernelSpec(5, 5)
    q = swih.build_quadrant_set(bm, spec)
    with pytest.raises(ContractError):
        swih.swlh_query(q, (1, 3), spec)
    with pytest.raises(ContractError):
        swih.brute_force_swlh(bm, (5, 3), spec)


def test_rotation_symmetry(rng):
    bm = BinMap(rng.integers(0, 5, (15, 13)), 5)
    rot = BinMap(bm.data[::-1, ::-1].copy(), 5)
    for spec in (KernelSpec(5, 7), KernelSpec(3, 3), KernelSpec(9, 1)):
        q, qr = swih.build_quadrant_set(bm, spec), swih.build_quadrant_set(rot, spec)
        for cx, cy in [(6, 7), (4, 3), (8, 10)]:
            a = swih.swlh_query(q, (cx, cy), spec, raw=True)
            b = swih.swlh_query(qr, (12 - cx, 14 - cy), spec, raw=True)
            assert np.array_equal(a, b)


def test_wedding_cake_one_layer_is_plain_histogram(rng):
    bm = BinMap(rng.integers(0, 6, (20, 20)), 6)
    spec = KernelSpec(9, 7)
    t = integral.build(bm)
    h = swih.wedding_cake_swlh(t, (10, 10), spec, 1)
    plain = integral.region_histogram(t, spec.window(10, 10)).astype(float)
    assert np.allclose(h, plain / plain.sum(), atol=0, rtol=1e-15)


def test_ring_geometry():
    spec = KernelSpec(61, 91)
    rings = swih.ring_rects((100, 100), spec, 3)
    assert rings[-1] == spec.window(100, 100)
    assert all(a.intersect(b) == a for a, b in zip(rings, rings[1:]))
    w = swih.ring_weights((100, 100), spec, 3)
    assert w[0] == spec.max_weight and all(x > y for x, y in zip(w, w[1:]))


def _cake_mse(bm, spec, layers, centers):
    t = integral.build(bm)
    err = [np.mean((swih.wedding_cake_swlh(t, c, spec, layers) - swih.brute_force_swlh(bm, c, spec)) ** 2) for c in centers]
    return float(np.mean(err))


def test_wedding_cake_error_on_natural_image():
    bm = quantize(natural_image(160, 160, seed=3), 16)
    spec = KernelSpec(61, 91)
    centers = [(x, y) for x in (40, 80, 119) for y in (50, 80, 109)]
    mse3 = _cake_mse(bm, spec, 3, centers)
    assert 0 < mse3 < 0.01


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_wedding_cake_doubling_layers_improves(seed):
    bm = quantize(natural_image(96, 96, seed=seed), 16)
    spec = KernelSpec(31, 31)
    centers = [(x, y) for x in (20, 48, 75) for y in (20, 48, 75)]
    e = [_cake_mse(bm, spec, n, centers) for n in (1, 2, 4)]
    assert e[0] > e[1] > e[2] > 0


def test_local_histogram_field_methods_agree(rng):
    bm = BinMap(rng.integers(0, 4, (12, 14)), 4)
    spec = KernelSpec(5, 4)
    exact = swih.local_histogram_field(bm, spec, "exact")
    brute = swih.local_histogram_field(bm, spec, "brute")
    assert exact.shape == (12 - 4 + 1, 14 - 5 + 1, 4)
    assert np.array_equal(exact, brute)
    cake = swih.local_histogram_field(bm, spec, "cake", layers=2)
    assert np.allclose(cake.sum(-1), 1)
    with pytest.raises(ContractError):
        swih.local_histogram_field(bm, spec, "nope")
    with pytest.raises(ContractError):
        swih.local_histogram_field(bm, KernelSpec(20, 2))


def test_parallel_build_matches_serial(rng):
    bm = BinMap(rng.integers(0, 8, (40, 30)), 8)
    spec = KernelSpec(11, 9)
    a = swih.build_quadrant_set(bm, spec, threads=1)
    b = swih.build_quadrant_set(bm, spec, ScanSchedule("wf-tis", 8, 2), threads=4)
    for d in swih.DIRECTIONS:
        assert a.tensors[d].equals(b.tensors[d])


def test_query_time_flat_in_kernel_size(rng):
    bm = BinMap(rng.integers(0, 16, (256, 256)), 16)
    times = {}
    for k in (8, 64):
        spec = KernelSpec(k, k)
        q = swih.build_quadrant_set(bm, spec)
        xs = rng.integers(spec.left, 256 - (k - spec.left) + 1, 2000)
        ys = rng.integers(spec.top, 256 - (k - spec.top) + 1, 2000)
        swih.swlh_batch(q, xs, ys, spec)
        best = float("inf")
        for _ in range(5):
            t0 = time.perf_counter()
            swih.swlh_batch(q, xs, ys, spec)
            best = min(best, time.perf_counter() - t0)
        times[k] = best
    assert times[64] <= 1.5 * times[8]
