"""Command-line entry point.

Every command writes line-delimited JSON records to stdout (or ``--out``):
a ``run`` header, one record per scan or table row, and a ``summary``.
Fields ending in ``_ms`` are wall-clock timings; everything else is
deterministic for a fixed ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FrustumError
from .frustum import build_frustum_grid, max_frustum_size
from .geometry import RunConfig, project_cloud
from .hashindex import build_hash_index, visit_cells
from .losses import LossConfig, multi_layer_loss
from .metrics import ConfusionMatrix, conventional_projection_uv, drop_stats, knn_restore, miou
from .network import LayerParams, NetworkConfig, init_params, sfcnet_forward
from .sampling import f2ps, fps, rebuild_downsampled_grid
from .scanio import (SceneSpec, gen_synthetic_scene, random_cloud, read_labels, read_scan, street_scene,
                     write_labels, write_predictions, write_scan)


def _ms(t0):
    return round((time.perf_counter() - t0) * 1000.0, 3)


def _pct(x):
    """Fraction to percent; undefined values become null."""
    return None if x is None or x != x else round(100.0 * x, 6)


class Reporter:
    def __init__(self, stream):
        self.stream = stream

    def emit(self, record):
        self.stream.write(json.dumps(record, sort_keys=True) + "\n")
        self.stream.flush()


def _map_scans(fn, items, jobs):
    """Run ``fn`` per item, isolating failures; output order follows input."""
    def guarded(item):
        try:
            return fn(item)
        except (FrustumError, OSError, ValueError) as exc:
            return {"scan": str(item), "ok": False, "error": f"{type(exc).__name__}: {exc}"}

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(guarded, items))
    return [guarded(item) for item in items]


def _label_path(scan, labels):
    """Labels for ``scan``: a file, or ``<dir>/<stem>.label``."""
    if labels is None:
        return None
    p = Path(labels)
    return p / (Path(scan).stem + ".label") if p.is_dir() else p


def _figure_dir(args):
    if not args.figures:
        return None
    d = Path(args.figures)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _pair(text):
    """argparse type for ``2,2`` or ``64x1800``."""
    try:
        a, b = (int(x) for x in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two integers like 2,2 (got {text!r})")
    if a < 1 or b < 1:
        raise argparse.ArgumentTypeError(f"values must be positive (got {text!r})")
    return a, b


def _pair_list(text):
    return [_pair(item) for item in text.split(",")]


# commands -----------------------------------------------------------------


def cmd_index(args, run):
    proj = run.projection
    figs = _figure_dir(args)

    def one(scan):
        t0 = time.perf_counter()
        cloud = read_scan(scan)
        u, v, r = project_cloud(cloud, proj)
        grid = build_frustum_grid(u, v, r, proj.H, proj.W)
        index = build_hash_index(grid)
        build_ms = _ms(t0)
        ids = index.lookup(grid.u, grid.v, grid.m)
        cell_u, cell_v = grid.cell_keys % grid.W, grid.cell_keys // grid.W
        _, visited, _ = visit_cells(index, grid, cell_u, cell_v)
        rec = {
            "scan": str(scan), "ok": True, "N": grid.N, "occupied": grid.occupied,
            "M": max_frustum_size(grid) if grid.N else 0,
            "checks": {
                "lossless": int(grid.cell_counts.sum()) == grid.N,
                "keys_roundtrip": bool(np.array_equal(ids, np.arange(grid.N))),
                "visit_cover": bool(np.array_equal(np.sort(visited), np.arange(grid.N))),
            },
            "build_ms": build_ms,
        }
        rec["ok"] = all(rec["checks"].values())
        if figs is not None:
            from .plotting import plot_frustum_sizes
            rec["figure"] = plot_frustum_sizes(grid, figs / f"{Path(scan).stem}_frustum_sizes.png")
        return rec

    return _map_scans(one, args.scans, args.jobs)


def cmd_stats(args, run):
    proj = run.projection

    def one(scan):
        cloud = read_scan(scan)
        lp = _label_path(scan, args.labels)
        labels = read_labels(lp, len(cloud)) if lp is not None else None
        rows = []
        for H, W in args.resolutions:
            t0 = time.perf_counter()
            st = drop_stats(cloud, proj.with_resolution(H, W), labels)
            rows.append({"scan": str(scan), "ok": True, "resolution": f"{H}x{W}", **st,
                         "stats_ms": _ms(t0)})
        return rows

    out = []
    for result in _map_scans(one, args.scans, args.jobs):
        out.extend(result if isinstance(result, list) else [result])
    figs = _figure_dir(args)
    if figs is not None and any(r.get("ok") for r in out):
        from .plotting import plot_preservation
        path = plot_preservation([r for r in out if r.get("ok")], figs / "preservation.png")
        out.append({"record": "figure", "ok": True, "figure": path})
    return out


def cmd_sample(args, run):
    proj = run.projection
    strides = args.strides

    def one(scan):
        cloud = read_scan(scan)
        u, v, r = project_cloud(cloud, proj)
        grid = build_frustum_grid(u, v, r, proj.H, proj.W)
        index = build_hash_index(grid)
        t0 = time.perf_counter()
        sampled = f2ps(grid, index, cloud.xyz, strides)
        f2ps_ms = _ms(t0)
        down = rebuild_downsampled_grid(sampled)
        rec = {"scan": str(scan), "ok": True, "N": len(cloud), "sampled": len(sampled),
               "strides": list(strides), "grid": [down.H, down.W], "occupied": down.occupied,
               "f2ps_ms": f2ps_ms}
        if args.write:
            write_scan(args.write, cloud.subset(sampled.parent_indices))
            rec["written"] = str(args.write)
        return rec

    return _map_scans(one, args.scans, args.jobs)


def cmd_bench_sampling(args, run):
    proj = run.projection
    strides = args.strides
    rows = []
    for n in (int(s) for s in args.sizes.split(",")):
        cloud = random_cloud(n, seed=args.seed)
        u, v, r = project_cloud(cloud, proj)
        grid = build_frustum_grid(u, v, r, proj.H, proj.W)
        index = build_hash_index(grid)
        best = None
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            sampled = f2ps(grid, index, cloud.xyz, strides)
            best = _ms(t0) if best is None else min(best, _ms(t0))
        row = {"record": "timing", "ok": True, "N": n, "sampled": len(sampled), "f2ps_ms": best,
               "fps_ms": None}
        if n <= args.fps_limit:
            t0 = time.perf_counter()
            fps(cloud.xyz, len(sampled))
            row["fps_ms"] = _ms(t0)
        rows.append(row)
    figs = _figure_dir(args)
    if figs is not None:
        from .plotting import plot_sampling_times
        rows.append({"record": "figure", "ok": True,
                     "figure": plot_sampling_times(rows, figs / "sampling_time.png")})
    return rows


def _network_config(run, args):
    extra = dict(run.extra)
    if getattr(args, "channels", None):
        extra["channels"] = args.channels
    if getattr(args, "classes", None):
        extra["classes"] = args.classes
    return NetworkConfig.from_mapping(extra, run.projection)


def cmd_forward(args, run):
    cfg = _network_config(run, args)
    params = LayerParams.load(args.weights, cfg) if args.weights else init_params(cfg, args.seed)

    def one(scan):
        cloud = read_scan(scan)
        t0 = time.perf_counter()
        result = sfcnet_forward(cloud, params, cfg)
        forward_ms = _ms(t0)
        pred = np.argmax(result.logits, axis=1)
        rec = {"scan": str(scan), "ok": result.logits.shape[0] == len(cloud), "N": len(cloud),
               "rows": int(result.logits.shape[0]), "level_sizes": result.level_sizes,
               "class_histogram": np.bincount(pred, minlength=cfg.classes).tolist(),
               "forward_ms": forward_ms}
        lp = _label_path(scan, args.labels)
        if lp is not None:
            labels = read_labels(lp, len(cloud))
            loss_cfg = LossConfig.uniform(cfg.classes)
            rec["loss"] = round(multi_layer_loss(result.aux_logits, np.clip(labels, 0, cfg.classes - 1), loss_cfg), 6)
        if args.pred_out:
            target = Path(args.pred_out)
            if target.is_dir():
                target = target / (Path(scan).stem + ".label")
            write_predictions(target, pred)
            rec["predictions"] = str(target)
        return rec

    return _map_scans(one, args.scans, args.jobs)


def cmd_baseline(args, run):
    proj = run.projection

    def one(scan):
        cloud = read_scan(scan)
        labels = read_labels(_label_path(scan, args.labels), len(cloud))
        pred = read_labels(args.pred, len(cloud)) if args.pred else labels
        n = int(max(labels.max(initial=0), pred.max(initial=0))) + 1
        n = max(n, args.classes or 0)
        u, v, r = project_cloud(cloud, proj)
        t0 = time.perf_counter()
        kept, dropped = conventional_projection_uv(u, v, r, proj.W)
        restored = knn_restore(kept, pred[kept], dropped, u, v, r, K=args.knn, window=args.window,
                               H=proj.H, W=proj.W, wrap_azimuth=proj.wrap_azimuth)
        restore_ms = _ms(t0)
        ignore = tuple(args.ignore)
        per_f, m_f = miou(ConfusionMatrix.from_labels(labels, pred, n, ignore))
        per_r, m_r = miou(ConfusionMatrix.from_labels(labels, restored, n, ignore))
        return {"scan": str(scan), "ok": True, "N": len(cloud), "preserved": int(kept.shape[0]),
                "dropped": int(dropped.shape[0]), "miou_frustum": _pct(m_f), "miou_restored": _pct(m_r),
                "iou_frustum": [_pct(x) for x in per_f], "iou_restored": [_pct(x) for x in per_r],
                "changed_by_restore": int(np.count_nonzero(restored != pred)),
                "restore_ms": restore_ms}

    return _map_scans(one, args.scans, args.jobs)


def cmd_synth(args, run):
    spec = SceneSpec.load(args.spec) if args.spec else street_scene()
    cloud = gen_synthetic_scene(spec, seed=args.seed)
    write_scan(args.scan_out, cloud)
    rec = {"record": "synth", "ok": True, "N": len(cloud), "scan": str(args.scan_out),
           "classes": {str(c): int(k) for c, k in enumerate(np.bincount(cloud.labels)) if k}}
    if args.labels_out:
        write_labels(args.labels_out, cloud.labels)
        rec["labels"] = str(args.labels_out)
    proj = run.projection
    u, v, r = project_cloud(cloud, proj)
    grid = build_frustum_grid(u, v, r, proj.H, proj.W)
    rec["M"] = max_frustum_size(grid) if grid.N else 0
    return [rec]


def cmd_eval(args, run):
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    gt_files = sorted(gt_dir.glob("*.label"))
    pairs = []
    for gt in gt_files:
        pairs.append((gt, pred_dir / gt.name))
    n = args.classes
    loaded = []
    records = []
    for gt, pr in pairs:
        try:
            g = read_labels(gt)
            p = read_labels(pr, g.shape[0])
            loaded.append((g, p))
            records.append({"scan": gt.name, "ok": True, "N": int(g.shape[0])})
        except (FrustumError, OSError) as exc:
            records.append({"scan": gt.name, "ok": False, "error": f"{type(exc).__name__}: {exc}"})
    if n is None:
        n = 1 + max([int(max(g.max(initial=0), p.max(initial=0))) for g, p in loaded] or [1])
    cm = ConfusionMatrix.empty(n, tuple(args.ignore))
    for g, p in loaded:
        cm.add(g, p)
    per, mean = miou(cm)
    records.append({"record": "miou", "ok": bool(loaded), "classes": n, "evaluated": cm.total,
                    "miou": _pct(mean), "iou": [_pct(x) for x in per],
                    "confusion": cm.counts.tolist()})
    return records


# parser -------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (default: $SFC_CONFIG)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="write the report here instead of stdout")
    common.add_argument("--jobs", type=int, default=1, help="scans processed in parallel")
    common.add_argument("--figures", help="directory for rendered figures")

    parser = argparse.ArgumentParser(prog="sfrustum", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", parents=[common], help="build the frustum grid and hash index")
    p.add_argument("scans", nargs="+")
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("stats", parents=[common], help="one-point-per-cell drop statistics")
    p.add_argument("scans", nargs="+")
    p.add_argument("--labels", help="label file or directory of <stem>.label files")
    p.add_argument("--resolutions", type=_pair_list, default="64x1800,64x2048,64x4096")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("sample", parents=[common], help="frustum farthest point sampling")
    p.add_argument("scans", nargs="+")
    p.add_argument("--strides", type=_pair, default="2,2")
    p.add_argument("--write", help="write the sampled cloud (KITTI .bin)")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("bench-sampling", parents=[common], help="F2PS vs FPS timing table")
    p.add_argument("--sizes", default="20000,40000,80000,160000")
    p.add_argument("--strides", type=_pair, default="2,2")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--fps-limit", type=int, default=40000,
                   help="largest size for which plain FPS is timed")
    p.set_defaults(fn=cmd_bench_sampling)

    p = sub.add_parser("forward", parents=[common], help="run the segmentation network")
    p.add_argument("scans", nargs="+")
    p.add_argument("--weights", help="weight file; seeded random init when omitted")
    p.add_argument("--labels", help="labels for reporting the multi-layer loss")
    p.add_argument("--pred-out", help="prediction file (one scan) or directory")
    p.add_argument("--channels", type=int)
    p.add_argument("--classes", type=int)
    p.set_defaults(fn=cmd_forward)

    p = sub.add_parser("baseline", parents=[common], help="conventional projection + KNN restore")
    p.add_argument("scans", nargs="+")
    p.add_argument("--labels", required=True)
    p.add_argument("--pred", help="full-cloud predictions; ground truth when omitted")
    p.add_argument("--knn", type=int, default=5)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--classes", type=int)
    p.add_argument("--ignore", type=int, nargs="*", default=[0])
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("synth", parents=[common], help="ray-cast a synthetic scan")
    p.add_argument("--spec", help="JSON scene spec; built-in street scene when omitted")
    p.add_argument("--scan-out", required=True)
    p.add_argument("--labels-out")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("eval", parents=[common], help="confusion matrix and mIoU")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--ignore", type=int, nargs="*", default=[0])
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    stream = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    rep = Reporter(stream)
    t0 = time.perf_counter()
    try:
        try:
            run = RunConfig.load(args.config)
        except (FrustumError, OSError, ValueError) as exc:
            rep.emit({"record": "error", "ok": False, "error": f"{type(exc).__name__}: {exc}"})
            return 2
        rep.emit({"record": "run", "command": args.command, "seed": args.seed,
                  "config": {**run.projection.to_mapping(), **run.extra},
                  "versions": {"spherical_frustum": __version__, "numpy": np.__version__}})
        try:
            records = args.fn(args, run)
        except (FrustumError, OSError, ValueError) as exc:
            rep.emit({"record": "error", "ok": False, "error": f"{type(exc).__name__}: {exc}"})
            return 2
        for rec in records:
            rec.setdefault("record", "scan")
            rep.emit(rec)
        ok = all(r.get("ok", True) for r in records)
        rep.emit({"record": "summary", "ok": ok, "records": len(records), "elapsed_ms": _ms(t0)})
        return 0 if ok else 1
    finally:
        if stream is not sys.stdout:
            stream.close()


if __name__ == "__main__":
    sys.exit(main())
