"""Command-line entry point.

Subcommands: ``bench`` (preset comparison table), ``profile`` (per-layer
breakdown), ``segment`` (end-to-end sequence run), ``ablate`` (reduced
variant comparison), ``paramcount``, ``losses eval`` (supervision bundle
evaluation), and ``gen-synthetic`` (seeded inputs).

``SFPN_DETERMINISTIC=1`` forces single-threaded math; otherwise
``--threads`` bounds the BLAS pool (default: all cores).  Commands that
assert orderings exit nonzero with a diff report when one fails.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="seed for weights and inputs")
    p.add_argument("--threads", type=int, default=0,
                   help="BLAS thread cap (0 = all cores)")
    p.add_argument("--out", type=str, default=None, help="output path")
    p.add_argument("--format", choices=("table", "csv", "jsonl"), default="table")


def build_parser():
    ap = argparse.ArgumentParser(prog="sfpn", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", help="benchmark the three presets")
    _add_common(p)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--layer-runs", type=int, default=5)
    p.add_argument("--points", type=int, default=20000)
    p.add_argument("--voxel-size", type=float, default=0.02)
    p.add_argument("--input", type=str, default=None,
                   help="benchmark cloud (SPC1 file) instead of the seeded room")

    p = sub.add_parser("profile", help="per-layer latency and parameter profile")
    _add_common(p)
    p.add_argument("--variant", choices=("small", "base", "large"), default="large")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--layer-runs", type=int, default=8)
    p.add_argument("--points", type=int, default=20000)
    p.add_argument("--voxel-size", type=float, default=0.02)
    p.add_argument("--input", type=str, default=None,
                   help="benchmark cloud (SPC1 file) instead of the seeded room")
    p.add_argument("--samples", type=str, default=None,
                   help="write raw end-to-end latency samples (ms, one per line)")

    p = sub.add_parser("segment", help="run a sequence end to end")
    _add_common(p)
    p.add_argument("sequence", help="sequence directory")
    p.add_argument("--variant", choices=("small", "base", "large"), default="small")
    p.add_argument("--model", type=str, default=None,
                   help="weight container path (with .json sidecar next to it)")
    p.add_argument("--voxel-size", type=float, default=0.02)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--merge-threshold", type=float, default=0.7)
    p.add_argument("--merge-alpha", type=float, default=0.5)
    p.add_argument("--classes", type=int, default=1)

    p = sub.add_parser("ablate", help="compare full vs reduced variants")
    _add_common(p)
    p.add_argument("--variant", choices=("small", "base", "large"), default="large")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--points", type=int, default=20000)
    p.add_argument("--voxel-size", type=float, default=0.02)

    p = sub.add_parser("paramcount", help="per-layer parameter counts")
    _add_common(p)
    p.add_argument("--variant", choices=("small", "base", "large"), default="large")
    p.add_argument("--ablation", choices=("full", "no_upsampled_fusion",
                                          "no_pyramid", "no_skip_connections"),
                   default="full")

    p = sub.add_parser("losses", help="loss utilities")
    loss_sub = p.add_subparsers(dest="losses_command", required=True)
    pe = loss_sub.add_parser("eval", help="evaluate a supervision bundle (JSONL)")
    pe.add_argument("bundle", help="JSONL supervision bundle path")
    pe.add_argument("--alpha", type=float, default=0.5)
    pe.add_argument("--beta", type=float, default=0.5)
    pe.add_argument("--lambda1", type=float, default=0.5)
    pe.add_argument("--lambda2", type=float, default=0.5)
    pe.add_argument("--tau", type=float, default=0.07)

    p = sub.add_parser("gen-synthetic", help="write seeded synthetic inputs")
    p.add_argument("--kind", choices=("room", "sequence"), default="room")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=20000)
    p.add_argument("--frames", type=int, default=2)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--mode", choices=("static", "pan"), default="pan")
    return ap


def _resolve_threads(args) -> int:
    if os.environ.get("SFPN_DETERMINISTIC") == "1":
        return 1
    t = getattr(args, "threads", 0)
    return t if t and t > 0 else (os.cpu_count() or 1)


def _emit(text, out_path):
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
    else:
        print(text)


def _reports_payload(reports, fmt):
    from .profiler import format_reports_table
    if fmt == "csv":
        return "".join(r.to_csv() for r in reports)
    if fmt == "jsonl":
        lines = []
        for r in reports:
            d = {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in r.__dict__.items() if k != "layers"}
            lines.append(json.dumps(d, sort_keys=True))
        return "\n".join(lines)
    return format_reports_table(reports)


def _load_bench_tensor(args):
    from .sparse_tensor import load_point_cloud, voxelize
    from .synthetic import room_tensor
    if getattr(args, "input", None):
        pts, feats = load_point_cloud(args.input)
        tensor, _ = voxelize(pts, args.voxel_size, feats)
        return tensor, os.path.basename(args.input)
    tensor, _ = room_tensor(args.seed, args.points, args.voxel_size)
    return tensor, f"synthetic-room-{args.points}"


def _cmd_bench(args) -> int:
    from .profiler import bench_variants
    tensor, desc = _load_bench_tensor(args)
    reports, ok = bench_variants(tensor, seed=args.seed, threads=_resolve_threads(args),
                                 runs=args.runs, layer_runs=args.layer_runs,
                                 input_desc=desc)
    _emit(_reports_payload(reports, args.format), args.out)
    if not ok:
        print("ordering check FAILED:", file=sys.stderr)
        for r in reports:
            print(f"  {r.variant}: params={r.total_params} median={r.e2e_median_ms:.2f}ms",
                  file=sys.stderr)
        return 1
    return 0


def _cmd_profile(args) -> int:
    from .network import SFPNConfig, build_model
    from .profiler import bench_report, format_layers_table, profile
    tensor, desc = _load_bench_tensor(args)
    model = build_model(SFPNConfig.preset(args.variant), args.seed)
    if args.samples:
        res = profile(model, tensor, runs=args.runs, layer_runs=0)
        with open(args.samples, "w") as fh:
            fh.writelines(f"{v!r}\n" for v in res.e2e_samples_ms)
    report = bench_report(args.variant, model, tensor, args.seed,
                          _resolve_threads(args), desc,
                          runs=args.runs, layer_runs=args.layer_runs)
    if args.format == "csv":
        _emit(report.to_csv(), args.out)
    elif args.format == "jsonl":
        _emit("\n".join(json.dumps(l.__dict__, sort_keys=True) for l in report.layers),
              args.out)
    else:
        text = format_layers_table(report.layers)
        text += (f"\ntotal: params={report.total_params}"
                 f" e2e_median={report.e2e_median_ms:.2f}ms"
                 f" layer_sum={sum(l.median_ms for l in report.layers):.2f}ms")
        _emit(text, args.out)

    lat = {}
    par = {}
    for l in report.layers:
        lat[l.stride] = lat.get(l.stride, 0.0) + l.median_ms
        par[l.depth] = par.get(l.depth, 0) + l.params
    top_lat = sum(v for s, v in lat.items() if s <= 2)
    rest_lat = sum(v for s, v in lat.items() if s > 2)
    deepest = max(par)
    if top_lat <= rest_lat or par[deepest] != max(par.values()):
        print(f"share check FAILED: stride<=2 latency {top_lat:.2f}ms vs {rest_lat:.2f}ms; "
              f"params by depth {par}", file=sys.stderr)
        return 1
    return 0


def _cmd_segment(args) -> int:
    from .network import SFPNConfig, build_model, load_model
    from .profiler import RunConfig, run_sequence
    if args.model:
        model = load_model(args.model, os.path.splitext(args.model)[0] + ".json")
    else:
        model = build_model(SFPNConfig.preset(args.variant), args.seed)
    out_dir = args.out or (args.sequence.rstrip("/") + ".out")
    cfg = RunConfig(voxel_size=args.voxel_size, rounds=args.rounds,
                    merge_threshold=args.merge_threshold, merge_alpha=args.merge_alpha,
                    noise_ratio=args.noise, noise_seed=args.seed,
                    num_classes=args.classes, refiner_seed=args.seed)
    summary = run_sequence(args.sequence, model, cfg, out_dir)
    for row in summary:
        print(json.dumps(row, sort_keys=True))
    return 0


def _cmd_ablate(args) -> int:
    from .profiler import ablate, format_reports_table
    from .synthetic import room_tensor
    tensor, _ = room_tensor(args.seed, args.points, args.voxel_size)
    reports, ok = ablate(tensor, seed=args.seed, threads=_resolve_threads(args),
                         runs=args.runs, preset=args.variant,
                         input_desc=f"synthetic-room-{args.points}")
    ordered = [reports[k] for k in ("full", "no_upsampled_fusion",
                                    "no_pyramid", "no_skip_connections")]
    _emit(_reports_payload(ordered, args.format), args.out)
    if not ok:
        print("ablation check FAILED: "
              + ", ".join(f"{r.variant}={r.total_params}" for r in ordered),
              file=sys.stderr)
        return 1
    return 0


def _cmd_paramcount(args) -> int:
    from .network import SFPNConfig, build_model, parameter_count, unit_parameter_count
    from .profiler import ABLATION_FLAGS
    cfg = SFPNConfig.preset(args.variant, **ABLATION_FLAGS[args.ablation])
    model = build_model(cfg, args.seed)
    rows = [(u.name, u.stage, unit_parameter_count(model, u)) for u in model.units()]
    if args.format == "jsonl":
        text = "\n".join(json.dumps({"name": n, "stage": s, "params": p}, sort_keys=True)
                         for n, s, p in rows)
    elif args.format == "csv":
        text = "name,stage,params\n" + "\n".join(f"{n},{s},{p}" for n, s, p in rows)
    else:
        width = max(len(n) for n, _, _ in rows)
        text = "\n".join(f"{n.ljust(width)}  {p}" for n, _, p in rows)
    text += f"\ntotal: {parameter_count(model)}"
    _emit(text, args.out)
    return 0


def _cmd_losses_eval(args) -> int:
    import numpy as np
    from .losses import (FrameSupervision, LossWeights, cross_frame_loss,
                         per_frame_loss, total_loss)
    weights = LossWeights(args.alpha, args.beta, args.lambda1, args.lambda2, args.tau)
    frames, feature_sets = [], []
    with open(args.bundle) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            frames.append(FrameSupervision(
                gt_class=np.asarray(d["gt_class"]),
                gt_masks=np.asarray(d["gt_masks"]),
                gt_boxes=np.asarray(d["gt_boxes"]),
                gt_sem=np.asarray(d["gt_sem"]),
                mask_logits=np.asarray(d["mask_logits"]),
                pred_boxes=np.asarray(d["pred_boxes"]),
                class_logits=np.asarray(d["class_logits"]),
                sem_logits=np.asarray(d["sem_logits"]),
            ))
            if "features" in d:
                feature_sets.append(np.asarray(d["features"], dtype=np.float64))
    l1, breakdown = per_frame_loss(frames, weights)
    l2 = cross_frame_loss(feature_sets, weights.tau) if len(feature_sets) == len(frames) \
        and feature_sets else 0.0
    print(json.dumps({
        "frames": len(frames),
        "components": breakdown,
        "L1": l1,
        "L2": l2,
        "L_total": total_loss(l1, l2, weights),
    }, sort_keys=True))
    return 0


def _cmd_gen_synthetic(args) -> int:
    if args.kind == "room":
        from .sparse_tensor import save_point_cloud
        from .synthetic import room_points
        pts = room_points(args.seed, args.points)
        save_point_cloud(args.out, pts)
        print(f"wrote {pts.shape[0]} points to {args.out}")
    else:
        from .synthetic import synthetic_sequence
        synthetic_sequence(args.out, frames=args.frames, seed=args.seed,
                           n_objects=args.objects, mode=args.mode)
        print(f"wrote {args.frames}-frame sequence to {args.out}")
    return 0


_COMMANDS = {
    "bench": _cmd_bench,
    "profile": _cmd_profile,
    "segment": _cmd_segment,
    "ablate": _cmd_ablate,
    "paramcount": _cmd_paramcount,
    "gen-synthetic": _cmd_gen_synthetic,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = _resolve_threads(args)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        threadpool_limits = None

    if args.command == "losses":
        handler = _cmd_losses_eval
    else:
        handler = _COMMANDS[args.command]

    if threadpool_limits is not None:
        with threadpool_limits(limits=threads):
            return handler(args)
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
