"""Command-line front end.

Exit status is 0 on success, 2 for usage or validation errors (bad input
files, inconsistent shapes, unknown names) and 1 for anything unexpected.
Each command prints a ``key=value`` summary on standard output.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks, io
from .config import ConfigError, RunConfig, build_config
from .geometry import (depth_from_normal_distance, distance_from_depth_normal, normal_from_depth,
                       pointcloud_from_depth)
from .metrics import MetricReport, evaluate
from .refinement import ContextEncoder, GruWeights, RefineConfig, fuse, init_hidden, refine
from .segmentation import detect_planes
from .synthetic import SceneError, default_spec, generate, parse_spec
from .tensor import Tensor, bilinear_resize

log = logging.getLogger("nddepth")


class UsageError(Exception):
    pass


def _emit(**values) -> None:
    for k, v in values.items():
        if isinstance(v, float):
            v = f"{v:.12g}"
        print(f"{k}={v}")


def _config(args, **overrides) -> RunConfig:
    return build_config(getattr(args, "config", None), overrides)


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    io._atomic_write(out_dir / "config.txt", cfg.to_text().encode("ascii"))


def _as_map(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64)


def _roundtrip_err(a: np.ndarray, b: np.ndarray, valid: np.ndarray) -> float:
    if not valid.any():
        return 0.0
    return float(np.max(np.abs(a[valid] - b[valid]) / np.abs(b[valid])))


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = parse_spec(Path(args.spec).read_text()) if args.spec else default_spec()
    scene = generate(spec, seed=args.seed)
    out = Path(args.out_dir)
    io.write_pfm(out / "depth.pfm", scene.depth)
    io.write_pfm(out / "normal.pfm", scene.normals)
    io.write_pfm(out / "distance.pfm", scene.distance)
    io.write_labels(out / "labels.pgm", scene.labels)
    io.write_intrinsics(out / "intrinsics.txt", scene.intrinsics)
    h, w = scene.shape
    _emit(width=w, height=h, planes=len(scene.planes),
          depth_min=float(scene.depth.min()), depth_max=float(scene.depth.max()))
    return 0


def _read_intrinsics(path):
    if path is None or not Path(path).exists():
        raise UsageError(f"intrinsics file not found: {path}")
    return io.read_intrinsics(path)


def cmd_nd2d(args) -> int:
    k = _read_intrinsics(args.intrinsics)
    normals = _as_map(io.read_pfm(args.normal))
    distance = _as_map(io.read_pfm(args.distance))
    if normals.ndim != 3 or normals.shape[:2] != distance.shape:
        raise UsageError(f"normal map {normals.shape} does not match distance map {distance.shape}")
    cfg = _config(args)
    depth, valid = depth_from_normal_distance(normals, distance, k, cfg.denom_eps)
    io.write_pfm(args.out, depth)
    back = distance_from_depth_normal(depth, normals, k)
    _emit(invalid=int((~valid).sum()),
          depth_min=float(depth[valid].min()) if valid.any() else 0.0,
          depth_max=float(depth[valid].max()) if valid.any() else 0.0,
          roundtrip_max_rel_err=_roundtrip_err(back, distance, valid))
    return 0


def cmd_d2nd(args) -> int:
    k = _read_intrinsics(args.intrinsics)
    depth = _as_map(io.read_pfm(args.depth))
    if depth.ndim != 2:
        raise UsageError("depth map must have one channel")
    if args.normal:
        normals = _as_map(io.read_pfm(args.normal))
        if normals.shape != depth.shape + (3,):
            raise UsageError(f"normal map {normals.shape} does not match depth map {depth.shape}")
        n_valid = np.linalg.norm(normals, axis=-1) > 0
    else:
        normals, n_valid = normal_from_depth(depth, k, args.window)
        io.write_pfm(args.out_normal, normals)
    distance = distance_from_depth_normal(depth, normals, k)
    valid = n_valid & (depth > 0)
    distance[~valid] = 0.0
    io.write_pfm(args.out_distance, distance)
    back, ok = depth_from_normal_distance(normals, distance, k, _config(args).denom_eps)
    ok &= valid
    _emit(invalid=int((~valid).sum()),
          distance_min=float(distance[valid].min()) if valid.any() else 0.0,
          distance_max=float(distance[valid].max()) if valid.any() else 0.0,
          roundtrip_max_rel_err=_roundtrip_err(back, depth, ok))
    return 0


def cmd_segment(args) -> int:
    cfg = _config(args, felzenszwalb_k=args.k, min_region_size=args.min_region_size)
    normals = _as_map(io.read_pfm(args.normal))
    distance = _as_map(io.read_pfm(args.distance))
    if normals.ndim != 3 or normals.shape[:2] != distance.shape:
        raise UsageError(f"normal map {normals.shape} does not match distance map {distance.shape}")
    segments, mask, edges = detect_planes(normals, distance, cfg.felzenszwalb_k, cfg.min_region_size)
    out = Path(args.out_dir)
    if segments.n_segments - 1 > 65535:
        log.warning("more than 65536 segments; labels.pgm not written")
    else:
        io.write_labels(out / "labels.pgm", segments.labels)
    io.write_mask(out / "mask.pgm", mask.mask)
    io.write_pfm(out / "dissimilarity.pfm", edges.max_incident())
    _echo_config(cfg, out)
    summary = dict(segments=segments.n_segments, retained=len(mask.region_ids),
                   mask_pixels=int(mask.mask.sum()))
    if args.gt_labels:
        gt = io.read_labels(args.gt_labels)
        ious = [best_iou(gt == g, segments.labels) for g in np.unique(gt)]
        summary["min_plane_iou"] = float(min(ious))
    _emit(**summary)
    return 0


def best_iou(region: np.ndarray, labels: np.ndarray) -> float:
    """Best intersection-over-union between ``region`` and any single label."""
    ids, inter = np.unique(labels[region], return_counts=True)
    sizes = np.bincount(labels.ravel())[ids]
    return float(np.max(inter / (region.sum() + sizes - inter)))


def cmd_refine(args) -> int:
    overrides = dict(t_max=args.t_max, seed=args.random_seed)
    cfg = _config(args, **overrides)
    maps = [_as_map(io.read_pfm(p)) for p in (args.d1, args.d2, args.u1, args.u2)]
    if any(m.shape != maps[0].shape or m.ndim != 2 for m in maps):
        raise UsageError("d1, d2, u1 and u2 must be single-channel maps of equal size")
    h, w = maps[0].shape
    if args.full_res:
        full_h, full_w = h, w
        h, w = max(1, h // args.scale), max(1, w // args.scale)
        maps = [bilinear_resize(Tensor(m[None]), h, w).data[0] for m in maps]
    else:
        full_h, full_w = h * args.scale, w * args.scale

    if args.weights:
        weights = GruWeights.from_arrays(io.read_weights(args.weights))
    else:
        weights = GruWeights.random(cfg.refine, np.random.default_rng(cfg.seed))
    rcfg = RefineConfig(proj_channels=weights.proj2.out_channels,
                        context_channels=weights.context_channels,
                        hidden_channels=weights.hidden_channels,
                        t_max=cfg.refine.t_max, min_depth=cfg.refine.min_depth)

    if args.context:
        ctx = io.read_weights(args.context).get("context")
        if ctx is None or ctx.shape != (rcfg.context_channels, h, w):
            raise UsageError(f"context file must hold a 'context' tensor of shape "
                             f"{(rcfg.context_channels, h, w)}")
        context = Tensor(ctx)
    elif args.rgb:
        encoder = ContextEncoder.random(rcfg.context_channels, np.random.default_rng(cfg.seed + 1))
        context = encoder(_as_map(io.read_pfm(args.rgb)), h, w)
    else:
        context = Tensor(np.zeros((rcfg.context_channels, h, w)))

    # no head features are available on the command line, so the hidden state
    # starts from tanh of zero features
    h0 = init_hidden(Tensor(np.zeros((rcfg.hidden_channels, h, w))), Tensor(np.zeros((0, h, w))))
    d1, d2, u1, u2 = (Tensor(m[None]) for m in maps)
    res = refine(d1, d2, u1, u2, context, h0, weights, rcfg.t_max, rcfg.min_depth)
    fused = fuse(res.d1, res.d2, full_h, full_w)

    out = Path(args.out_dir)
    io.write_pfm(out / "d1_star.pfm", res.d1.data[0])
    io.write_pfm(out / "d2_star.pfm", res.d2.data[0])
    io.write_pfm(out / "fused.pfm", fused.data[0])
    for t, (a, b) in enumerate(zip(res.trace1, res.trace2), start=1):
        io.write_pfm(out / "trace" / f"d1_t{t}.pfm", a.data[0])
        io.write_pfm(out / "trace" / f"d2_t{t}.pfm", b.data[0])
    _echo_config(cfg, out)
    _emit(iterations=len(res.trace1), height=h, width=w, full_height=full_h, full_width=full_w,
          max_abs_change_d1=float(np.abs(res.d1.data[0] - maps[0]).max()),
          max_abs_change_d2=float(np.abs(res.d2.data[0] - maps[1]).max()))
    return 0


def cmd_eval(args) -> int:
    pred = _as_map(io.read_pfm(args.pred))
    gt = _as_map(io.read_pfm(args.gt))
    report = evaluate(pred, gt, (args.cap_min, args.cap_max), benchmark_style=args.benchmark_style)
    sys.stdout.write(report.to_text())
    if args.csv:
        path = Path(args.csv)
        lines = path.read_text() if path.exists() else MetricReport.csv_header() + "\n"
        io._atomic_write(path, (lines + report.to_csv_row() + "\n").encode("ascii"))
    return 0


def cmd_gradcheck(args) -> int:
    names = args.component or list(checks.COMPONENTS)
    unknown = [n for n in names if n not in checks.COMPONENTS]
    if unknown:
        raise UsageError(f"unknown component(s): {', '.join(unknown)}; "
                         f"choose from {', '.join(checks.COMPONENTS)}")
    failed = False
    print(f"{'component':<20} {'max_rel_err':>12}  status")
    for name in names:
        err = checks.COMPONENTS[name](args.seed)
        ok = err < args.tol
        failed |= not ok
        print(f"{name:<20} {err:>12.3e}  {'PASS' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_ply(args) -> int:
    k = _read_intrinsics(args.intrinsics)
    depth = _as_map(io.read_pfm(args.depth))
    mask = io.read_mask(args.mask) if args.mask else None
    color = io.read_pfm(args.rgb) if args.rgb else None
    if color is not None and color.shape != depth.shape + (3,):
        raise UsageError("RGB image must be a 3-channel map the size of the depth map")
    if mask is not None and mask.shape != depth.shape:
        raise UsageError("mask must match the depth map")
    cloud = pointcloud_from_depth(depth, k, color, mask)
    io.write_ply(cloud, args.out, binary=args.binary)
    _emit(vertices=len(cloud), colored=cloud.colors is not None)
    return 0


def cmd_overfit(args) -> int:
    from .pipeline import overfit, small_scene

    report = overfit(small_scene(args.size, args.seed), steps=args.steps, lr=args.lr,
                     map_lr=args.map_lr, seed=args.seed)
    _emit(initial_loss=report.losses[0], final_loss=report.losses[-1], ratio=report.ratio,
          seconds=report.seconds)
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nddepth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic piecewise-planar scene")
    s.add_argument("out_dir")
    s.add_argument("--spec", help="scene description file (default: built-in 3-plane scene)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("nd2d", help="depth from normal and plane distance maps")
    s.add_argument("--normal", required=True)
    s.add_argument("--distance", required=True)
    s.add_argument("--intrinsics", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_nd2d)

    s = sub.add_parser("d2nd", help="normal and plane distance maps from depth")
    s.add_argument("--depth", required=True)
    s.add_argument("--intrinsics", required=True)
    s.add_argument("--normal", help="use these normals instead of fitting them")
    s.add_argument("--window", type=int, default=5)
    s.add_argument("--config")
    s.add_argument("--out-normal", default="normal.pfm")
    s.add_argument("--out-distance", required=True)
    s.set_defaults(func=cmd_d2nd)

    s = sub.add_parser("segment", help="detect planar regions")
    s.add_argument("out_dir")
    s.add_argument("--normal", required=True)
    s.add_argument("--distance", required=True)
    s.add_argument("--config")
    s.add_argument("--k", type=float)
    s.add_argument("--min-region-size", type=int)
    s.add_argument("--gt-labels", help="report the worst best-match IoU against these labels")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("refine", help="run ConvGRU refinement on two depth estimates")
    s.add_argument("out_dir")
    for name in ("d1", "d2", "u1", "u2"):
        s.add_argument(f"--{name}", required=True)
    w = s.add_mutually_exclusive_group()
    w.add_argument("--weights", help="weight container file")
    w.add_argument("--random-seed", type=int, help="draw random weights from this seed")
    c = s.add_mutually_exclusive_group()
    c.add_argument("--context", help="weight container holding a 'context' tensor")
    c.add_argument("--rgb", help="3-channel PFM image fed through the fixed context encoder")
    s.add_argument("--config")
    s.add_argument("--t-max", type=int)
    s.add_argument("--scale", type=int, default=4, help="full / refinement resolution ratio")
    s.add_argument("--full-res", action="store_true",
                   help="inputs are at full resolution; downsample before refining")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("eval", help="depth evaluation metrics")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("--cap-min", type=float, default=0.0)
    s.add_argument("--cap-max", type=float, default=float("inf"))
    s.add_argument("--benchmark-style", action="store_true")
    s.add_argument("--csv", help="append a CSV row to this file")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--component", action="append")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-5)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ply", help="export a depth map as a point cloud")
    s.add_argument("out")
    s.add_argument("--depth", required=True)
    s.add_argument("--intrinsics", required=True)
    s.add_argument("--rgb")
    s.add_argument("--mask")
    s.add_argument("--binary", action="store_true")
    s.set_defaults(func=cmd_ply)

    s = sub.add_parser("overfit", help="gradient-descent overfit demo on one small scene")
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--steps", type=int, default=300)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--map-lr", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_overfit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, SceneError, io.FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
