"""Command line entry point: build, fit, reconstruct, finetune, eval, bench, query."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import shutil
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import io as avio
from .dual_graph import GraphError, build_hierarchy
from .graph_nn import ConvWeights, conv_plan, dual_conv, dual_conv_naive
from .isosurface import marching_cubes, sample_grid, write_mesh
from .metrics import DEFAULT_TAU, MetricError, SampledSurface, evaluate
from .model import (ConfigError, ModelState, NetConfig, NumericalError, RunLog, build_model,
                    field_function, finetune, forward, prepare_shape, split_accuracy, train)
from .octree import FULL_DEPTH, Octree, OctreeError, PointSet, build_octree
from .plotting import plot_bench, plot_field_slice, plot_level_counts, plot_loss_curves
from .shapes import shape_from_dict
from . import tape as T

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "ADAPTIVE_VOLUMES_THREADS"

# ---------------------------------------------------------------- schemas

_NETWORK = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "depth": {"type": "integer", "minimum": 4},
        "widths": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 1}},
        "width_scale": {"type": "number", "exclusiveMinimum": 0},
        "n_blocks": {"type": "integer", "minimum": 0},
        "mode": {"enum": ["unet", "autoencoder"]},
        "edge_mode": {"enum": ["full", "single_scale", "fine_to_coarse", "coarse_to_fine"]},
        "loss": {"enum": ["supervised", "unsupervised"]},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "lr_end": {"type": "number", "exclusiveMinimum": 0},
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "lambda_v": {"type": "number", "minimum": 0},
        "lambda_g": {"type": "number", "minimum": 0},
        "n_surface": {"type": "integer", "minimum": 1},
        "n_volume": {"type": "integer", "minimum": 1},
        "mpu_hidden": {"type": "integer", "minimum": 1},
        "split_hidden": {"type": "integer", "minimum": 1},
        "in_channels": {"const": 4},
    },
}

_ITEM = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "points": {"type": "string"},
        "shape": {"type": "object"},
        "n_points": {"type": "integer", "minimum": 1},
        "noise": {"type": "number", "minimum": 0},
        "normals": {"type": "boolean"},
    },
}

_METRICS = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n_samples": {"type": "integer", "minimum": 1},
        "tau": {"type": "number", "exclusiveMinimum": 0},
        "iou_samples": {"type": "integer", "minimum": 1},
    },
}

_TRAIN_COMMON = {
    "seed": {"type": "integer"},
    "network": _NETWORK,
    "data": {"type": "array", "items": _ITEM},
    "grid": {"type": "integer", "minimum": 2},
    "metrics": _METRICS,
    "reference": {"type": "string"},
    "samples_per_leaf": {"type": "integer", "minimum": 1},
}

SCHEMAS = {
    "build": {"required": ["input", "depth"], "properties": {
        "input": {"type": "string"}, "depth": {"type": "integer", "minimum": FULL_DEPTH},
        "seed": {"type": "integer"}}},
    "fit": {"required": ["data"], "properties": {
        **_TRAIN_COMMON, "resume": {"type": "string"}}},
    "reconstruct": {"required": ["data"], "properties": dict(_TRAIN_COMMON)},
    "finetune": {"required": ["checkpoint", "data"], "properties": {
        **_TRAIN_COMMON, "checkpoint": {"type": "string"},
        "iterations": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "exclusiveMinimum": 0}}},
    "eval": {"required": ["pred", "gt"], "properties": {
        "pred": {"type": "string"}, "gt": {"type": "string"}, "seed": {"type": "integer"},
        **_METRICS["properties"]}},
    "bench": {"properties": {
        "sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "channels": {"type": "array", "items": {
            "type": "array", "items": {"type": "integer", "minimum": 1},
            "minItems": 2, "maxItems": 2}},
        "repeats": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"}}},
    "query": {"required": ["checkpoint", "points"], "properties": {
        "checkpoint": {"type": "string"}, "points": {"type": "string"},
        "decoder": {"enum": ["same", "grow"]}, "level": {"type": "integer"},
        "seed": {"type": "integer"}}},
}
for _s in SCHEMAS.values():
    _s.update(type="object", additionalProperties=False)

DEFAULTS = {
    "build": {},
    "fit": {"grid": 64, "samples_per_leaf": 4, "metrics": {}},
    "reconstruct": {"grid": 64, "samples_per_leaf": 4, "metrics": {}},
    "finetune": {"grid": 64, "samples_per_leaf": 4, "metrics": {}, "iterations": 2000,
                 "lr": 1e-4},
    "eval": {"n_samples": 10000, "tau": DEFAULT_TAU, "iou_samples": 100000},
    "bench": {"sizes": [1000, 4000, 10000], "channels": [[32, 32]], "repeats": 5},
    "query": {"decoder": "same"},
}


class RunError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


def load_config(command, path, seed=None) -> dict:
    cfg = {}
    if path is not None:
        try:
            with open(path) as f:
                cfg = json.load(f)
        except FileNotFoundError:
            raise RunError(f"{path}: config file not found", EXIT_CONFIG) from None
        except json.JSONDecodeError as e:
            raise RunError(f"{path}:{e.lineno}: invalid JSON: {e.msg}", EXIT_CONFIG) from None
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise RunError(f"config error at {where}: {e.message}", EXIT_CONFIG) from None
    merged = {**DEFAULTS[command], **cfg}
    if seed is not None:
        merged["seed"] = seed
    merged.setdefault("seed", 0)
    return merged


def config_hash(command, cfg) -> str:
    blob = json.dumps({"command": command, "config": cfg}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def make_run_dir(out, command, cfg, force) -> Path:
    run = Path(out) / f"{command}-{config_hash(command, cfg)}"
    if run.exists():
        if not force:
            raise RunError(f"{run} exists; rerun with --force to overwrite", EXIT_CONFIG)
        shutil.rmtree(run)
    run.mkdir(parents=True)
    with open(run / "config.json", "w") as f:
        json.dump({"command": command, **cfg}, f, indent=2, sort_keys=True)
    return run


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)


# ---------------------------------------------------------------- data

def _load_item(item, depth, seed, index, supervised, samples_per_leaf):
    rng = np.random.default_rng([seed, 104729, index])
    shape = None
    if "shape" in item:
        try:
            shape = shape_from_dict(item["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise RunError(f"data[{index}].shape: {e}", EXIT_CONFIG) from None
    if "points" in item:
        pts = avio.read_points(item["points"])
    elif shape is not None:
        p, n = shape.sample_surface(item.get("n_points", 4096), rng)
        p = p + rng.normal(0.0, item.get("noise", 0.0), p.shape)
        pts = PointSet(p, n if item.get("normals", True) else None)
    else:
        raise RunError(f"data[{index}] needs 'points' or 'shape'", EXIT_CONFIG)
    return prepare_shape(pts, depth, shape, samples_per_leaf, rng=rng, supervised=supervised)


def _dataset(cfg, net: NetConfig, supervised):
    if not cfg["data"]:
        raise RunError("empty dataset", EXIT_DATA)
    items = [_load_item(it, net.depth, cfg["seed"], i, supervised, cfg["samples_per_leaf"])
             for i, it in enumerate(cfg["data"])]
    for i, d in enumerate(items):
        if supervised and d.target_octree is None:
            raise RunError(f"data[{i}]: supervised training needs an analytic 'shape'",
                           EXIT_CONFIG)
        if not supervised and d.points.normals is None:
            raise RunError(f"data[{i}]: unsupervised fitting needs oriented points; supply "
                           "6-column XYZ (x y z nx ny nz) or a PLY with nx/ny/nz", EXIT_DATA)
    return items


def _net_config(cfg, loss) -> NetConfig:
    net = dict(cfg.get("network", {}))
    net.setdefault("seed", cfg["seed"])
    net["loss"] = net.get("loss", loss)
    if net["loss"] != loss:
        raise RunError(f"network.loss must be {loss!r} for this command", EXIT_CONFIG)
    try:
        return NetConfig.from_dict(net)
    except ConfigError as e:
        raise RunError(f"network: {e}", EXIT_CONFIG) from None


def _extract_and_score(state, items, cfg, run, decoder):
    """Mesh each shape, write it, and score it against the analytic shape or reference mesh."""
    mcfg = cfg.get("metrics", {})
    reports = []
    ref_mesh = avio.read_mesh(cfg["reference"]) if cfg.get("reference") else None
    for i, data in enumerate(items):
        result = forward(state, data, decoder=decoder)
        fn = field_function(state, result)
        mesh = marching_cubes(sample_grid(fn, cfg["grid"]))
        write_mesh(run / f"mesh_{i}.ply", mesh)
        plot_field_slice(fn, run / f"field_{i}.png")
        report = {"shape": i, "vertices": len(mesh.vertices), "triangles": len(mesh.triangles)}
        if data.target_octree is not None:
            report["split_accuracy"] = split_accuracy(result, data.target_octree)
        kw = dict(n_samples=mcfg.get("n_samples", 10000), tau=mcfg.get("tau", DEFAULT_TAU),
                  seed=cfg["seed"], iou_samples=mcfg.get("iou_samples", 100000))
        if mesh.is_empty:
            report["error"] = "empty mesh"
        elif ref_mesh is not None:
            report.update(evaluate(mesh, ref_mesh, **kw))
        elif data.shape is not None:
            gp, gn = data.shape.sample_surface(kw["n_samples"],
                                               np.random.default_rng([cfg["seed"], 1, i]))
            report.update(evaluate(mesh, gt_samples=SampledSurface(gp, gn),
                                   gt_inside=data.shape.inside, **kw))
        reports.append(report)
    _write_json(run / "metrics.json", reports)
    return reports


def _train_outputs(state, log, run):
    state.save(run / "checkpoint.avck")
    plot_loss_curves(log.rows, run / "loss.png")


# ---------------------------------------------------------------- commands

def cmd_build(cfg, run):
    t0 = time.perf_counter()
    pts = avio.read_points(cfg["input"])
    octree = build_octree(pts, cfg["depth"])
    graphs = build_hierarchy(octree)
    elapsed = time.perf_counter() - t0
    avio.write_octree_dump(run / "octree.txt", octree)
    avio.write_graph_dump(run / "graph.txt", graphs)
    stats = {
        "points": len(pts),
        "depth": octree.max_depth,
        "node_counts": {str(d): octree.num_nodes(d) for d in range(octree.max_depth + 1)},
        "leaves": int(len(octree.leaf_keys())),
        "levels": {str(g.level): {
            "vertices": g.num_vertices,
            "edges": {str(c): int(n) for c, n in g.edge_counts().items()}}
            for g in graphs},
        "wall_time_s": elapsed,
    }
    _write_json(run / "stats.json", stats)
    plot_level_counts(stats, run / "levels.png")
    print(json.dumps({"leaves": stats["leaves"], "wall_time_s": elapsed}))
    return stats


def cmd_fit(cfg, run):
    if cfg.get("resume"):
        state = ModelState.load(cfg["resume"])
        if state.cfg.loss != "unsupervised":
            raise RunError("resumed checkpoint was not trained unsupervised", EXIT_CONFIG)
        if "network" in cfg and "epochs" in cfg["network"]:
            state.cfg.epochs = cfg["network"]["epochs"]
        net = state.cfg
    else:
        net = _net_config(cfg, "unsupervised")
        state = build_model(net)
    items = _dataset(cfg, net, supervised=False)
    log = RunLog(run / "log.csv")
    train(state, items, log=log, dump_path=run / "nan_dump.avck")
    _train_outputs(state, log, run)
    reports = _extract_and_score(state, items, cfg, run, "same")
    print(json.dumps(reports))
    return reports


def cmd_reconstruct(cfg, run):
    net = _net_config(cfg, "supervised")
    items = _dataset(cfg, net, supervised=True)
    state = build_model(net)
    log = RunLog(run / "log.csv")
    train(state, items, log=log, dump_path=run / "nan_dump.avck")
    _train_outputs(state, log, run)
    reports = _extract_and_score(state, items, cfg, run, "grow")
    print(json.dumps(reports))
    return reports


def cmd_finetune(cfg, run):
    state = ModelState.load(cfg["checkpoint"])
    items = _dataset(cfg, state.cfg, supervised=state.cfg.loss == "supervised")
    if len(items) != 1:
        raise RunError("finetune takes exactly one shape", EXIT_CONFIG)
    log = RunLog(run / "log.csv")
    finetune(state, items[0], iters=cfg["iterations"], lr=cfg["lr"], log=log,
             dump_path=run / "nan_dump.avck")
    _train_outputs(state, log, run)
    decoder = "grow" if state.cfg.loss == "supervised" else "same"
    reports = _extract_and_score(state, items, cfg, run, decoder)
    print(json.dumps(reports))
    return reports


def cmd_eval(cfg, run):
    pred = avio.read_mesh(cfg["pred"])
    gt = avio.read_mesh(cfg["gt"])
    report = evaluate(pred, gt, n_samples=cfg["n_samples"], tau=cfg["tau"], seed=cfg["seed"],
                      iou_samples=cfg["iou_samples"])
    _write_json(run / "metrics.json", report)
    print(json.dumps(report))
    return report


def random_graph(n_target: int, rng: np.random.Generator, max_depth: int = 8):
    """Finest dual graph of a random adaptive octree with about ``n_target`` leaves."""
    splits = [np.ones(8 ** d, dtype=bool) for d in range(FULL_DEPTH)]
    n_nodes = leaves = 8 ** FULL_DEPTH
    for _ in range(FULL_DEPTH, max_depth):
        want = int(np.ceil(max(n_target - leaves, 0) / 7))
        if want == 0:
            break
        s = np.zeros(n_nodes, dtype=bool)
        s[rng.choice(n_nodes, size=min(want, n_nodes), replace=False)] = True
        splits.append(s)
        leaves += 7 * int(s.sum())
        n_nodes = 8 * int(s.sum())
    return build_hierarchy(Octree.from_splits(splits))[-1]


def bench_rows(sizes, channels, repeats, seed=0, check_tol=1e-10):
    """Equivalence precheck then median timings of both formulations."""
    rng = np.random.default_rng(seed)
    rows, checks = [], []
    for n in sizes:
        g = random_graph(n, rng)
        lo, hi = FULL_DEPTH, int(g.depths.max())
        for c_in, c_out in channels:
            c_aug = c_in + hi - lo + 1 + 3
            F = rng.standard_normal((g.num_vertices, c_in))
            W = rng.standard_normal((7 * c_aug, c_out)) / np.sqrt(7 * c_aug)
            b = rng.standard_normal(c_out)
            plan = conv_plan(g, lo, hi)
            w = ConvWeights(T.const(W), T.const(b))
            fast = dual_conv(T.const(F), plan, w).value
            slow = dual_conv_naive(F, g, W, b, lo, hi)
            err = float(np.max(np.abs(fast - slow)))
            checks.append({"N": g.num_vertices, "C_in": c_in, "C_out": c_out, "max_err": err})
            if not err <= check_tol:
                raise NumericalError(f"formulations disagree by {err:.3e} at N={g.num_vertices}")
            for name, fn in (("bucketed_gemm", lambda: dual_conv(T.const(F), plan, w)),
                             ("naive_loop", lambda: dual_conv_naive(F, g, W, b, lo, hi))):
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter_ns()
                    fn()
                    times.append(time.perf_counter_ns() - t0)
                if times:
                    rows.append({"N": g.num_vertices, "C_in": c_in, "C_out": c_out,
                                 "formulation": name, "median_ns": float(np.median(times))})
    return rows, checks


def cmd_bench(cfg, run):
    rows, checks = bench_rows(cfg["sizes"], cfg["channels"], cfg["repeats"], cfg["seed"])
    with open(run / "bench.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["N", "C_in", "C_out", "formulation", "median_ns"])
        w.writeheader()
        w.writerows(rows)
    _write_json(run / "precheck.json", checks)
    if rows:
        plot_bench(rows, run / "bench.png")
    for r in rows:
        print(f"{r['N']},{r['C_in']},{r['C_out']},{r['formulation']},{r['median_ns']:.0f}")
    return rows


def cmd_query(cfg):
    """Field values for float64 xyz triples on stdin, written as float64 to stdout."""
    state = ModelState.load(cfg["checkpoint"])
    pts = avio.read_points(cfg["points"])
    data = prepare_shape(pts, state.cfg.depth, supervised=False)
    if cfg["decoder"] == "same" and pts.normals is None:
        raise RunError("query with the shared octree needs oriented points", EXIT_DATA)
    result = forward(state, data, decoder=cfg["decoder"])
    fn = field_function(state, result, cfg.get("level"))
    x = avio.read_query_stream(sys.stdin.buffer)
    avio.write_value_stream(sys.stdout.buffer, fn(x) if len(x) else np.zeros(0))


COMMANDS = {"build": cmd_build, "fit": cmd_fit, "reconstruct": cmd_reconstruct,
            "finetune": cmd_finetune, "eval": cmd_eval, "bench": cmd_bench}


def build_parser():
    p = argparse.ArgumentParser(prog="adaptive-volumes",
                                description="Adaptive neural volumes on dual octree graphs.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["query"]:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        if name != "query":
            sp.add_argument("--out", default="runs", help="root directory for run outputs")
            sp.add_argument("--force", action="store_true",
                            help="overwrite an existing run directory")
    return p


def _limit_threads():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return None
    try:
        return threadpool_limits(limits=max(1, int(n)))
    except ValueError:
        raise RunError(f"{THREADS_ENV} must be an integer, got {n!r}", EXIT_CONFIG) from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _limit_threads()
        if args.command != "bench" and args.config is None:
            raise RunError(f"{args.command} needs --config", EXIT_CONFIG)
        cfg = load_config(args.command, args.config, args.seed)
        if args.command == "query":
            cmd_query(cfg)
            return EXIT_OK
        run = make_run_dir(args.out, args.command, cfg, args.force)
        try:
            COMMANDS[args.command](cfg, run)
        except NumericalError:
            raise
        except Exception:
            # a failed run leaves nothing behind that would block a rerun
            shutil.rmtree(run, ignore_errors=True)
            raise
        print(f"run directory: {run}", file=sys.stderr)
        return EXIT_OK
    except RunError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (avio.DataError, OctreeError, GraphError, MetricError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
