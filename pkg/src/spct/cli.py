"""``spct`` command line.

Exit codes: 0 success, 2 contract violation (bad arguments or inputs),
3 IO or file-format error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from spct import evaluation, features, integral, likelihood, motion, swih, tracker
from spct.errors import ContractError, ImageFormatError, SpctError, StageError
from spct.imagecore import Rect, as_gray, check_color, load_image, load_mask, quantize, save_image, save_mask, to_uint8
from spct.integral import ALL_KINDS, ScanSchedule
from spct.pipeline import Stages, load_sequence_list, run_pipeline

EXIT_CONTRACT = 2
EXIT_IO = 3


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    return w, h


def _rect(text: str) -> Rect:
    try:
        return Rect.parse(text)
    except ContractError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _schedule(args) -> ScanSchedule:
    return ScanSchedule(args.schedule, args.tile, args.threads)


def _add_schedule(p, default="wf-tis"):
    p.add_argument("--schedule", choices=[k.value for k in ALL_KINDS], default=default)
    p.add_argument("--tile", type=int, default=integral.DEFAULT_TILE)
    p.add_argument("--threads", type=int, default=1)


def _print_kv(pairs) -> None:
    for k, v in pairs:
        print(f"{k}={v}")


# --- integral ----------------------------------------------------------------


def cmd_integral(args) -> None:
    img = as_gray(load_image(args.input))
    t = integral.build(quantize(img, args.bins), _schedule(args))
    integral.dump(t, args.out)
    _print_kv([("bins", t.bins), ("height", t.height), ("width", t.width), ("bytes", t.nbytes)])


def cmd_bench_ih(args) -> None:
    from spct.fixtures import random_bins

    from spct.imagecore import BinMap

    bm = BinMap(random_bins(args.size, args.size, args.bins, args.seed), args.bins)
    ref = None
    equal = True
    for kind in ALL_KINDS:
        sched = ScanSchedule(kind, args.tile, args.threads)
        buf = integral.new_buffer(bm)
        integral.build(bm, sched, out=buf)  # warm-up and first touch
        best = float("inf")
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            t = integral.build(bm, sched, out=buf)
            best = min(best, time.perf_counter() - t0)
        if ref is None:
            ref = t.data.copy()
        else:
            equal &= bool(np.array_equal(ref, t.data))
        print(f"{kind.value}={best:.6f}")
    print(f"equal={int(equal)}")
    if not equal:
        raise ContractError("schedules disagree")


# --- swlh / feature / phog ---------------------------------------------------


def cmd_swlh(args) -> None:
    img = as_gray(load_image(args.input))
    bm = quantize(img, args.bins)
    spec = swih.KernelSpec.parse(args.kernel)
    field = swih.local_histogram_field(bm, spec, args.method, layers=args.layers)
    ny, nx = field.shape[:2]
    if args.ref is None:
        u, v = nx // 2, ny // 2
    else:
        u, v = (int(s) for s in args.ref.split(","))
        u, v = u - spec.left, v - spec.top
    if not (0 <= u < nx and 0 <= v < ny):
        raise ContractError("reference centre must leave room for the whole kernel")
    lmap = likelihood.hist_field_map(field, field[v, u], args.p)
    save_image(args.out, to_uint8(lmap, 0.0, 1.0))
    _print_kv([("height", ny), ("width", nx), ("max", f"{lmap.max():.6f}")])


def cmd_feature(args) -> None:
    img = as_gray(load_image(args.input))
    fmap = features.feature_map(img, args.kind, args.sigma)
    save_image(args.out, to_uint8(fmap))
    _print_kv([("min", f"{fmap.min():.6g}"), ("max", f"{fmap.max():.6g}")])


def cmd_phog(args) -> None:
    img = as_gray(load_image(args.input)).astype(np.float64)
    cw, ch = args.chip
    field = features.pyramid_hog(img, args.levels, args.bins, cw, ch, sigma=args.sigma)
    ny, nx = field.values.shape[:2]
    sx, sy = args.stride or (cw, ch)
    n = 0
    with open(args.out, "w", encoding="ascii") as fh:
        for y in range(0, ny, sy):
            for x in range(0, nx, sx):
                vals = " ".join(f"{v:.6g}" for v in field.values[y, x])
                fh.write(f"{x} {y} {vals}\n")
                n += 1
    _print_kv([("descriptors", n), ("length", field.values.shape[2])])


# --- likelihood / score ------------------------------------------------------


def cmd_likelihood(args) -> None:
    search = load_image(args.search)
    tmpl = load_image(args.template)
    th, tw = tmpl.shape[:2]
    if args.channel == "ncc":
        lmap = likelihood.ncc_map(as_gray(search).astype(np.float64), as_gray(tmpl).astype(np.float64))
    elif args.channel == "color":
        s, t = check_color(search), check_color(tmpl)
        model = likelihood.ColorModel(
            likelihood.color_histogram(t), likelihood.color_histogram(s), t.shape[0] * t.shape[1], s.shape[0] * s.shape[1]
        )
        lmap = likelihood.box_mean(likelihood.color_ratio_map(s, model), th, tw)
    elif args.channel == "hist":
        spec = swih.KernelSpec(tw, th)
        bm = quantize(as_gray(search), args.bins)
        field = swih.local_histogram_field(bm, spec, "exact")
        tb = quantize(as_gray(tmpl), args.bins)
        ref = swih.brute_force_swlh(tb, (spec.left, spec.top), spec)
        lmap = likelihood.hist_field_map(field, ref, args.p)
    else:
        g = as_gray(search).astype(np.float64)
        t = as_gray(tmpl).astype(np.float64)
        s = 2**args.levels
        cw, ch = tw - tw % s, th - th % s
        ref = features.pyramid_hog(t, args.levels, args.bins, cw, ch).at(0, 0)
        field = features.pyramid_hog(g, args.levels, args.bins, cw, ch)
        lmap = likelihood.phog_map(field, ref)
    save_image(args.out, to_uint8(lmap, 0.0, 1.0))
    peaks = likelihood.find_peaks(lmap)
    best = peaks[0] if peaks else None
    _print_kv([("height", lmap.shape[0]), ("width", lmap.shape[1])])
    if best is not None:
        _print_kv([("peak_x", best.x), ("peak_y", best.y), ("peak", f"{best.height:.6f}")])


def cmd_score(args) -> None:
    lmap = as_gray(load_image(args.map)).astype(np.float64) / 255.0
    print(f"rank={likelihood.score_map(lmap, args.gt)}")


# --- detection ---------------------------------------------------------------


def cmd_detect(args) -> None:
    paths = load_sequence_list(args.seq)
    depth = motion.load_depth(args.depth) if args.depth else None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    window = 3 if args.method == "flux" else args.window
    if window % 2 == 0:
        raise ContractError("window must be odd")
    half = (window - 1) // 2
    kernel = (args.kernel, args.kernel)

    def compute(frames):
        cur = frames[half]
        if args.method == "flux":
            m = motion.flux_mask(frames, args.tau, args.sigma, args.avg_window, args.min_blob)
        else:
            if args.method == "median-ih":
                bg = motion.median_background_ih(frames, args.bins, kernel)
            else:
                bg = motion.median_background_sort(frames)
            m = motion.subtract_threshold(cur, bg, args.tau, args.min_blob)
        if depth is not None:
            m = motion.depth_filter(m, depth, args.h_tau)
        return m

    written = []

    def encode(i, m):
        p = out_dir / f"mask_{i - half:05d}.pgm"
        save_mask(p, m.mask)
        written.append(len(m.blobs))

    rep = run_pipeline(paths, Stages(lambda p: as_gray(load_image(p)), compute, encode, window), args.buffers)
    _print_kv([("frames", rep.frames), ("masks", rep.outputs), ("blobs", sum(written)), ("fps", f"{rep.fps:.3f}")])


def cmd_eval_det(args) -> None:
    masks_dir = Path(args.masks)
    files = sorted(masks_dir.glob("*.pgm"))
    if not files:
        raise ImageFormatError(f"no masks in {masks_dir}")
    gt = evaluation.load_det_gt(args.gt)
    if len(gt) != len(files):
        raise ContractError(f"{len(files)} masks for {len(gt)} ground-truth frames")
    masks = [load_mask(f) for f in files]
    rep = evaluation.eval_detection(masks, gt, args.tau, args.min_blob)
    sys.stdout.write(rep.summary())
    if args.csv:
        rep.write_csv(args.csv)


# --- tracking ----------------------------------------------------------------


def _config(args) -> tracker.TrackerConfig:
    cfg = tracker.TrackerConfig.load(args.config) if args.config else tracker.TrackerConfig()
    if args.threads is not None:
        from dataclasses import replace

        cfg = replace(cfg, threads=args.threads)
    return cfg


def cmd_track(args) -> None:
    paths = load_sequence_list(args.seq)
    frames = (load_image(p) for p in paths)
    tl = tracker.track_sequence(frames, args.init, _config(args))
    tl.save(args.out)
    n_kf = sum(r.source == "fused-kf" for r in tl)
    _print_kv([("frames", len(tl)), ("fused_kf", n_kf)])


def cmd_eval_track(args) -> None:
    paths = load_sequence_list(args.seq)
    gt = evaluation.load_track_gt(args.gt)
    frames = [load_image(p) for p in paths]
    rep = evaluation.eval_reset(tracker.SPCTTracker(_config(args)), frames, gt)
    sys.stdout.write(rep.summary())
    if args.csv:
        rep.write_csv(args.csv)


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spct", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("integral", help="build an integral histogram tensor and dump it")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--out", required=True)
    _add_schedule(p)
    p.set_defaults(func=cmd_integral)

    p = sub.add_parser("bench-ih", help="time every scan schedule and check they agree")
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--tile", type=int, default=integral.DEFAULT_TILE)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench_ih)

    p = sub.add_parser(
        "swlh",
        help="sliding-window likelihood of local weighted histograms",
        description="Likelihood is 1 - d/d_max with d the Minkowski distance to the "
        "histogram at --ref and d_max = 2^(1/p), the largest distance between two "
        "normalised histograms.",
    )
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--kernel", default="31x31")
    p.add_argument("--method", choices=("exact", "cake", "brute"), default="exact")
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--ref", help="reference kernel centre 'x,y' (default: middle)")
    p.add_argument("--p", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_swlh)

    p = sub.add_parser("feature", help="feature map scaled to 8 bits")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--kind", choices=features.KINDS, required=True)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_feature)

    p = sub.add_parser("phog", help="pyramid HoG descriptors on a chip grid")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--chip", type=_size, default=(32, 32))
    p.add_argument("--stride", type=_size, help="grid step WxH (default: the chip size)")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phog)

    p = sub.add_parser(
        "likelihood",
        help="likelihood map of a template over a search image",
        description="Histogram channels map a distance d to 1 - d/d_max with "
        "d_max = 2^(1/p). NCC maps correlation g to (g + 1)/2.",
    )
    p.add_argument("--search", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--channel", choices=("ncc", "color", "hist", "phog"), required=True)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--p", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_likelihood)

    p = sub.add_parser("score", help="rank of the best peak inside the ground-truth box")
    p.add_argument("--map", required=True)
    p.add_argument("--gt", type=_rect, required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("detect", help="moving object masks for an image sequence")
    p.add_argument("--seq", required=True)
    p.add_argument("--method", choices=("median-ih", "median-sort", "flux"), default="median-ih")
    p.add_argument("--window", type=int, default=9)
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--kernel", type=int, default=1)
    p.add_argument("--tau", type=float, default=25.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--avg-window", type=int, default=5)
    p.add_argument("--min-blob", type=int, default=4)
    p.add_argument("--depth")
    p.add_argument("--h-tau", type=float, default=motion.DEFAULT_H_TAU)
    p.add_argument("--buffers", type=int, choices=(1, 2), default=2)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("track", help="track one target through a sequence")
    p.add_argument("--seq", required=True)
    p.add_argument("--init", type=_rect, required=True)
    p.add_argument("--config")
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval-track", help="reset-based accuracy / robustness / MFR")
    p.add_argument("--seq", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--config")
    p.add_argument("--threads", type=int)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval_track)

    p = sub.add_parser("eval-det", help="pixel and object precision / recall / F")
    p.add_argument("--masks", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--min-blob", type=int, default=1)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval_det)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return int(exc.code or 0)
    try:
        args.func(args)
    except StageError as exc:
        cause = exc.__cause__
        print(f"spct: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(cause, (OSError, ImageFormatError)) else EXIT_CONTRACT
    except (ImageFormatError, OSError) as exc:
        print(f"spct: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, ValueError) as exc:
        print(f"spct: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except SpctError as exc:
        print(f"spct: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    return 0


if __name__ == "__main__":
    sys.exit(main())
