"""Per-layer latency/parameter profiling, variant benchmarks, ablation
comparisons, and the end-to-end sequence runner.

Latency numbers are medians (and p95) of wall-clock samples on a monotonic
clock; parameter and voxel columns are exact and reproducible for a fixed
(seed, input, variant).  Reports round-trip through CSV exactly.
"""

from __future__ import annotations

import csv
import io
import json
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from . import segmentation
from .errors import EmptyCloud, RangeError
from .network import (
    ForwardTrace,
    SFPNConfig,
    VARIANT_FULL,
    VARIANT_NO_PYRAMID,
    VARIANT_NO_SKIP,
    VARIANT_NO_UPSAMPLED_FUSION,
    build_model,
    forward,
    parameter_count,
)
from .rgbd import SequenceReader, accumulate, perturb_pose, project_depth, SceneState
from .segmentation import (
    InstanceStore,
    MaskSet2D,
    QueryRefiner,
    instance_records,
    lift_masks,
    merge,
    unit_normalize,
)
from .sparse_tensor import DEFAULT_VOXEL_SIZE, voxelize


@dataclass
class LayerProfile:
    name: str
    stage: str
    depth: int
    stride: int
    params: int
    median_ms: float
    p95_ms: float
    n_in: int
    n_out: int


@dataclass
class ProfileResult:
    layers: list
    e2e_samples_ms: list
    total_params: int

    @property
    def e2e_median_ms(self) -> float:
        return float(np.median(self.e2e_samples_ms))

    def layer_ms_sum(self) -> float:
        return float(sum(l.median_ms for l in self.layers))

    def latency_by_stride(self) -> dict:
        out = {}
        for l in self.layers:
            out[l.stride] = out.get(l.stride, 0.0) + l.median_ms
        return out

    def params_by_depth(self) -> dict:
        out = {}
        for l in self.layers:
            out[l.depth] = out.get(l.depth, 0) + l.params
        return out


def machine_descriptor() -> str:
    cpu = platform.processor() or platform.machine() or "unknown-cpu"
    return f"{platform.system()}-{platform.release()} {cpu} python{platform.python_version()}"


def profile(model, tensor, runs: int = 20, warmup: int = 2,
            layer_runs: int | None = None) -> ProfileResult:
    """Instrument every layer of the forward pass.

    Runs ``warmup`` discarded passes, ``runs`` un-instrumented passes for
    the end-to-end samples, and ``layer_runs`` traced passes for per-layer
    medians/p95s and voxel counts.
    """
    if runs < 3:
        raise RangeError(f"profiling needs at least 3 runs, got {runs}")
    if len(tensor) == 0:
        raise EmptyCloud("cannot profile an empty input")
    if layer_runs is None:
        layer_runs = runs

    for _ in range(warmup):
        forward(model, tensor)

    e2e = []
    for _ in range(runs):
        t0 = time.perf_counter()
        forward(model, tensor)
        e2e.append((time.perf_counter() - t0) * 1e3)

    traces = []
    for _ in range(layer_runs):
        tr = ForwardTrace()
        forward(model, tensor, tr)
        traces.append(tr.entries)

    layers = []
    for i, first in enumerate(traces[0] if traces else []):
        samples = [t[i].ms for t in traces]
        layers.append(LayerProfile(
            name=first.name, stage=first.stage, depth=first.depth,
            stride=first.stride, params=first.params,
            median_ms=float(np.median(samples)),
            p95_ms=float(np.percentile(samples, 95)),
            n_in=first.n_in, n_out=first.n_out,
        ))
    return ProfileResult(layers, e2e, parameter_count(model))


@dataclass
class BenchReport:
    variant: str
    channels: tuple
    seed: int
    threads: int
    machine: str
    input_desc: str
    input_voxels: int
    total_params: int
    e2e_median_ms: float
    e2e_p95_ms: float
    layers: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["meta", "variant", self.variant])
        w.writerow(["meta", "channels", " ".join(str(c) for c in self.channels)])
        w.writerow(["meta", "seed", self.seed])
        w.writerow(["meta", "threads", self.threads])
        w.writerow(["meta", "machine", self.machine])
        w.writerow(["meta", "input_desc", self.input_desc])
        w.writerow(["meta", "input_voxels", self.input_voxels])
        w.writerow(["meta", "total_params", self.total_params])
        w.writerow(["meta", "e2e_median_ms", repr(self.e2e_median_ms)])
        w.writerow(["meta", "e2e_p95_ms", repr(self.e2e_p95_ms)])
        w.writerow(["header", "name", "stage", "depth", "stride", "params",
                    "median_ms", "p95_ms", "n_in", "n_out"])
        for l in self.layers:
            w.writerow(["layer", l.name, l.stage, l.depth, l.stride, l.params,
                        repr(l.median_ms), repr(l.p95_ms), l.n_in, l.n_out])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "BenchReport":
        meta = {}
        layers = []
        for row in csv.reader(io.StringIO(text)):
            if not row:
                continue
            if row[0] == "meta":
                meta[row[1]] = row[2]
            elif row[0] == "layer":
                layers.append(LayerProfile(
                    name=row[1], stage=row[2], depth=int(row[3]), stride=int(row[4]),
                    params=int(row[5]), median_ms=float(row[6]), p95_ms=float(row[7]),
                    n_in=int(row[8]), n_out=int(row[9])))
        return cls(
            variant=meta["variant"],
            channels=tuple(int(c) for c in meta["channels"].split()),
            seed=int(meta["seed"]),
            threads=int(meta["threads"]),
            machine=meta["machine"],
            input_desc=meta["input_desc"],
            input_voxels=int(meta["input_voxels"]),
            total_params=int(meta["total_params"]),
            e2e_median_ms=float(meta["e2e_median_ms"]),
            e2e_p95_ms=float(meta["e2e_p95_ms"]),
            layers=layers,
        )


def bench_report(variant: str, model, tensor, seed: int, threads: int,
                 input_desc: str, runs: int = 20, layer_runs: int = 5) -> BenchReport:
    res = profile(model, tensor, runs=runs, layer_runs=layer_runs)
    return BenchReport(
        variant=variant,
        channels=model.config.channels,
        seed=seed,
        threads=threads,
        machine=machine_descriptor(),
        input_desc=input_desc,
        input_voxels=len(tensor),
        total_params=res.total_params,
        e2e_median_ms=res.e2e_median_ms,
        e2e_p95_ms=float(np.percentile(res.e2e_samples_ms, 95)),
        layers=res.layers,
    )


def bench_variants(tensor, seed: int = 0, threads: int = 1,
                   runs: int = 20, layer_runs: int = 5,
                   input_desc: str = "synthetic-room"):
    """Benchmark the three presets on a shared input.

    Returns ``(reports, ok)`` where ``ok`` asserts the size and latency
    orderings small < base < large.
    """
    reports = []
    for name in ("small", "base", "large"):
        model = build_model(SFPNConfig.preset(name), seed)
        reports.append(bench_report(name, model, tensor, seed, threads,
                                    input_desc, runs, layer_runs))
    params = [r.total_params for r in reports]
    lat = [r.e2e_median_ms for r in reports]
    ok = params[0] < params[1] < params[2] and lat[0] < lat[1] < lat[2]
    return reports, ok


ABLATION_FLAGS = {
    VARIANT_FULL: {},
    VARIANT_NO_UPSAMPLED_FUSION: {"enable_upsampled_fusion": False},
    VARIANT_NO_PYRAMID: {"enable_pyramid": False},
    VARIANT_NO_SKIP: {"enable_skip_connections": False},
}


def ablate(tensor, seed: int = 0, threads: int = 1, runs: int = 5,
           preset: str = "large", input_desc: str = "synthetic-room"):
    """Compare the full model against the three reduced variants.

    Returns ``(reports, ok)``; ``ok`` requires strictly fewer parameters
    without skip connections and the default output width everywhere.
    """
    reports = {}
    widths = {}
    out_dim = None
    for name, flags in ABLATION_FLAGS.items():
        cfg = SFPNConfig.preset(preset, **flags)
        model = build_model(cfg, seed)
        out_dim = model.config.output_dim
        fp, _ = forward(model, tensor)
        widths[name] = fp.num_channels
        reports[name] = bench_report(name, model, tensor, seed, threads,
                                     input_desc, runs=max(runs, 3), layer_runs=3)
    ok = (reports[VARIANT_NO_SKIP].total_params < reports[VARIANT_FULL].total_params
          and all(w == out_dim for w in widths.values()))
    return reports, ok


def format_reports_table(reports) -> str:
    """Plain-text variant table (channel columns, params, latency)."""
    rows = [["variant"] + [f"C{i}" for i in range(1, 10)]
            + ["params", "median_ms", "p95_ms", "voxels"]]
    for r in reports:
        rows.append([r.variant] + [str(c) for c in r.channels]
                    + [str(r.total_params), f"{r.e2e_median_ms:.2f}",
                       f"{r.e2e_p95_ms:.2f}", str(r.input_voxels)])
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for row in rows:
        lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def format_layers_table(layers) -> str:
    rows = [["layer", "stage", "depth", "stride", "params", "median_ms",
             "p95_ms", "in", "out"]]
    for l in layers:
        rows.append([l.name, l.stage, str(l.depth), str(l.stride), str(l.params),
                     f"{l.median_ms:.3f}", f"{l.p95_ms:.3f}", str(l.n_in), str(l.n_out)])
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in rows)


@dataclass
class RunConfig:
    """Knobs for the end-to-end sequence runner."""

    voxel_size: float = DEFAULT_VOXEL_SIZE
    rounds: int = 1
    merge_threshold: float = segmentation.DEFAULT_MERGE_THRESHOLD
    merge_alpha: float = segmentation.DEFAULT_MERGE_ALPHA
    noise_ratio: float = 0.0
    noise_seed: int = 0
    num_classes: int = 1
    refiner_seed: int = 0


_STAGES = ("project", "accumulate", "voxelize", "backbone", "lift", "refine", "merge")


def run_sequence(seq_dir: str, model, run_cfg: RunConfig, out_dir: str):
    """Process a sequence frame by frame and write instance outputs.

    Per frame: project the depth map, append to the scene cloud, voxelize
    the accumulated cloud, run the backbone, lift the frame's 2D masks to
    queries, refine them, and merge into the instance store.  Outputs per
    frame: a JSONL file with one record per live instance and a raw u32
    file with each instance's point indices (offsets recorded in the
    JSONL).  Timing goes to a separate CSV so the rest is byte-stable.
    """
    reader = SequenceReader(seq_dir)
    if len(reader) == 0:
        raise FileNotFoundError(f"no frames found in {seq_dir}")
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)

    refiner = QueryRefiner(model.config.output_dim, run_cfg.num_classes,
                           run_cfg.refiner_seed)
    noise_rng = np.random.default_rng(run_cfg.noise_seed)
    state = SceneState()
    store = InstanceStore()
    timing_rows = []
    summary = []

    for i in range(len(reader)):
        frame, mask_map = reader.frame(i)
        if mask_map is None:
            raise FileNotFoundError(f"frame {frame.frame_id}: masks are required for lifting")
        frame.pose = perturb_pose(frame.pose, run_cfg.noise_ratio, noise_rng)
        times = {}

        t0 = time.perf_counter()
        pts = project_depth(frame)
        times["project"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        offset = len(state)
        accumulate(state, pts, frame.frame_id)
        scene_points = state.points
        times["accumulate"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        tensor, point_map = voxelize(scene_points, run_cfg.voxel_size)
        times["voxelize"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        fp, _ = forward(model, tensor)
        times["backbone"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        n_masks = int(mask_map.max())
        queries = None
        if n_masks > 0:
            masks = MaskSet2D(mask_map, n_masks)
            frame_map = point_map[offset:offset + pts.shape[0]]
            queries = lift_masks(masks, frame, fp, frame_map)
        times["lift"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        class_logits = None
        if queries is not None:
            refined, _, _, class_logits = refiner.refine_and_predict(
                queries, fp, run_cfg.rounds)
        times["refine"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        if queries is not None:
            feats = unit_normalize(refined.features)
            mask_vals = mask_map.reshape(-1)[np.flatnonzero(frame.depth.reshape(-1) > 0)]
            point_sets = [offset + np.flatnonzero(mask_vals == int(k))
                          for k in queries.mask_ids]
            class_ids = np.argmax(class_logits, axis=1)
            merge(store, feats, point_sets, run_cfg.merge_threshold, run_cfg.merge_alpha,
                  frame.frame_id, class_ids)
        times["merge"] = time.perf_counter() - t0

        records = instance_records(store, scene_points)
        idx_path = os.path.join(frames_dir, f"{frame.frame_id:06d}.indices.u32")
        with open(idx_path, "wb") as fh:
            pos = 0
            for rec, inst in zip(records, store.instances):
                rec["index_offset"] = pos
                fh.write(np.ascontiguousarray(inst.points, dtype="<u4").tobytes())
                pos += inst.points.size
        with open(os.path.join(frames_dir, f"{frame.frame_id:06d}.jsonl"), "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

        timing_rows.append([frame.frame_id] + [times[s] * 1e3 for s in _STAGES])
        summary.append({
            "frame_id": frame.frame_id,
            "scene_points": int(len(state)),
            "voxels": len(tensor),
            "queries": 0 if queries is None else len(queries),
            "instances": len(store),
        })

    with open(os.path.join(out_dir, "timing.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id"] + [f"{s}_ms" for s in _STAGES])
        for row in timing_rows:
            w.writerow([row[0]] + [f"{v:.3f}" for v in row[1:]])
    return summary
