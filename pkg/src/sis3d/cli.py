"""``sis3d`` command line: synth, fuse, train, infer, eval, export."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from . import io as sio
from .detect import InsufficientData
from .grid import EmptyCrop, MetaMismatch
from .nn import ShapeMismatch
from .nn.serialize import CheckpointError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

DEFAULT_CONFIG = {
    "n_classes": 3,
    "chunk_dims": [32, 32, 16],
    "voxel_size": 0.0469,
    "truncation": 3.0,
    "room": [1.5008, 1.5008, 0.7504],
    "n_objects": [1, 3],
    "n_scan_views": 6,
    "resolution": [96, 96],
    "shared_geometry": False,
    "n_views": 3,
    "width_divisor": 8,
    "color_channels": 16,
    "use_color": True,
    "anchors_per_level": [2, 3],
    "split_m3": 1.0 / 27.0,
    "steps": [2000, 1000, 1000],
    "learning_rate": 0.001,
    "momentum": 0.9,
    "lr_decay_every": 100000,
    "augment_rotations": False,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_config(path=None):
    cfg = dict(DEFAULT_CONFIG)
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as e:
            raise sio.IoFailure(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"--config: {path} is not valid JSON ({e.msg})") from e
        unknown = sorted(set(user) - set(cfg))
        if unknown:
            raise UsageError(f"--config: unknown keys {', '.join(unknown)}")
        cfg.update(user)
    return cfg


def build_parser():
    p = _Parser(prog="sis3d", description="Semantic instance segmentation of RGB-D scans on voxel grids.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--deterministic", action="store_true", help="single-threaded bitwise-reproducible mode")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate and render synthetic scenes")
    s.add_argument("--out", required=True)
    s.add_argument("--n-scenes", type=int, default=1)
    s.add_argument("--room", type=float, nargs=3)
    s.add_argument("--views", type=int)

    s = sub.add_parser("fuse", help="fuse scene views into TSDF grids and annotations")
    s.add_argument("--data", required=True)

    s = sub.add_parser("train", help="train on chunks of fused scenes")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="model checkpoint path")
    s.add_argument("--steps", type=int, nargs=3, metavar=("RPN", "CLS", "MASK"))
    s.add_argument("--lr", type=float)

    s = sub.add_parser("infer", help="detect instances in fused scenes")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True, help="predictions file")

    s = sub.add_parser("eval", help="mAP of predictions against scene annotations")
    s.add_argument("--data", required=True)
    s.add_argument("--predictions", required=True)
    s.add_argument("--out", required=True, help="metrics CSV")

    s = sub.add_parser("export", help="PLY boxes, masks and surfaces")
    s.add_argument("--data", required=True)
    s.add_argument("--predictions")
    s.add_argument("--out", required=True)
    return p


def _scene_dirs(data):
    root = Path(data)
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / "scene.json").exists()) if root.is_dir() else []
    if not dirs:
        raise FileNotFoundError(f"no scene directories under {data}")
    return dirs


def _write_manifest(args, cfg, path, inputs, outputs, timer):
    sio.RunManifest(args.command, sio.config_hash(cfg), args.seed, __version__, [str(i) for i in inputs],
                    [str(o) for o in outputs], timer.timings).write(path)


def cmd_synth(args, cfg, timer):
    from .synth import PlacementFailure, generate_scene, scan_scene

    out = Path(args.out)
    room = tuple(args.room or cfg["room"])
    n_views = args.views or cfg["n_scan_views"]
    outputs = []
    with timer("synth"):
        for i in range(args.n_scenes):
            seed = args.seed + i
            for attempt in range(100):
                try:
                    spec = generate_scene(room, tuple(cfg["n_objects"]), cfg["n_classes"], seed=seed * 1000 + attempt,
                                          shared_geometry=cfg["shared_geometry"])
                    break
                except PlacementFailure:
                    continue
            else:
                raise PlacementFailure(f"no layout for scene seed {seed}")
            d = out / f"scene_{i:04d}"
            d.mkdir(parents=True, exist_ok=True)
            sio.write_scene(d / "scene.json", spec)
            sio.write_views(d / "views", scan_scene(spec, n_views, tuple(cfg["resolution"]), seed=seed))
            outputs.append(d)
    _write_manifest(args, cfg, out / "synth.manifest.json", [], outputs, timer)


def cmd_fuse(args, cfg, timer):
    from .synth import fuse_tsdf, ground_truth, room_meta

    outputs = []
    dirs = _scene_dirs(args.data)
    with timer("fuse"):
        for d in dirs:
            spec = sio.read_scene(d / "scene.json")
            views = sio.read_views(d / "views")
            meta = room_meta(spec.room, cfg["voxel_size"])
            tsdf = fuse_tsdf(views, meta, cfg["truncation"])
            sio.write_grid(d / "tsdf.vgrd", tsdf)
            sio.write_annotations(d / "annotations.json", ground_truth(spec, meta, tsdf))
            outputs += [d / "tsdf.vgrd", d / "annotations.json"]
    _write_manifest(args, cfg, Path(args.data) / "fuse.manifest.json", dirs, outputs, timer)


def _load_scenes(data):
    from .pipeline import Chunk

    scenes = []
    for d in _scene_dirs(data):
        tsdf = sio.read_grid(d / "tsdf.vgrd")
        anns = sio.read_annotations(d / "annotations.json") if (d / "annotations.json").exists() else []
        scenes.append((d, Chunk(tsdf, sio.read_views(d / "views"), anns)))
    return scenes


def cmd_train(args, cfg, timer):
    from .estimator import InstanceSegmenter
    from .pipeline import extract_chunks, loss_log_csv, select_views

    with timer("load"):
        scenes = _load_scenes(args.data)
        chunks = []
        for _, sc in scenes:
            for ch in extract_chunks(sc.tsdf, sc.annotations, cfg["chunk_dims"], views=sc.views):
                if ch.annotations:
                    ch.views = select_views(ch, ch.views, cfg["n_views"])
                    chunks.append(ch)
        if not chunks:
            raise InsufficientData("no chunk contains an annotated instance")
    est = InstanceSegmenter(n_classes=cfg["n_classes"], chunk_dims=tuple(cfg["chunk_dims"]),
                            voxel_size=cfg["voxel_size"], width_divisor=cfg["width_divisor"],
                            color_channels=cfg["color_channels"], use_color=cfg["use_color"],
                            anchors_per_level=tuple(cfg["anchors_per_level"]), split_m3=cfg["split_m3"],
                            steps=tuple(args.steps or cfg["steps"]), learning_rate=args.lr or cfg["learning_rate"],
                            momentum=cfg["momentum"], lr_decay_every=cfg["lr_decay_every"],
                            augment_rotations=cfg["augment_rotations"], seed=args.seed,
                            deterministic=args.deterministic)
    with timer("train"):
        est.fit(chunks)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    est.save(out)
    log = out.with_name(out.name + ".losses.csv")
    log.write_text(loss_log_csv(est.loss_log_))
    _write_manifest(args, cfg, out.with_name(out.name + ".manifest.json"), [args.data],
                    [out, str(out) + ".json", log], timer)


def cmd_infer(args, cfg, timer):
    from .estimator import InstanceSegmenter

    est = InstanceSegmenter.load(args.model)
    est.deterministic = args.deterministic
    with timer("load"):
        scenes = _load_scenes(args.data)
    with timer("infer"):
        dets = est.predict([sc for _, sc in scenes])
    from .evalkit import write_records

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_records(out, [(d.name, det) for (d, _), ds in zip(scenes, dets) for det in ds])
    _write_manifest(args, cfg, out.with_name(out.name + ".manifest.json"), [args.data, args.model], [out], timer)


def _metrics(scenes, preds, n_classes):
    from .evalkit import mean_average_precision

    gts = [sc.annotations for _, sc in scenes]
    dets = [preds.get(d.name, []) for d, _ in scenes]
    return {"detection": mean_average_precision(dets, gts, n_classes),
            "instance": mean_average_precision(dets, gts, n_classes, use_masks=True)}


def cmd_eval(args, cfg, timer):
    from .evalkit import metrics_csv, read_records

    with timer("eval"):
        scenes = _load_scenes(args.data)
        results = _metrics(scenes, read_records(args.predictions), cfg["n_classes"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(metrics_csv(results, cfg["n_classes"]))
    _write_manifest(args, cfg, out.with_name(out.name + ".manifest.json"), [args.data, args.predictions], [out],
                    timer)


def cmd_export(args, cfg, timer):
    from .evalkit import metrics_csv, read_records

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    with timer("export"):
        scenes = _load_scenes(args.data)
        preds = read_records(args.predictions) if args.predictions else {}
        for d, sc in scenes:
            surf = out / f"{d.name}_surface.ply"
            sio.export_ply(sc.tsdf, surf)
            outputs.append(surf)
            if args.predictions:
                dets = preds.get(d.name, [])
                for kind in ("boxes", "masks"):
                    path = out / f"{d.name}_{kind}.ply"
                    sio.export_ply(dets, path, kind=kind, meta=sc.tsdf.meta)
                    outputs.append(path)
        if args.predictions:
            path = out / "metrics.csv"
            path.write_text(metrics_csv(_metrics(scenes, preds, cfg["n_classes"]), cfg["n_classes"]))
            outputs.append(path)
    _write_manifest(args, cfg, out / "export.manifest.json", [args.data], outputs, timer)


COMMANDS = {"synth": cmd_synth, "fuse": cmd_fuse, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "export": cmd_export}


def _thread_limit(deterministic):
    from threadpoolctl import threadpool_limits

    raw = os.environ.get("SIS_THREADS")
    if deterministic or raw == "0":
        return threadpool_limits(limits=1), True
    if raw:
        try:
            n = int(raw)
        except ValueError as e:
            raise UsageError(f"SIS_THREADS must be an integer, got {raw!r}") from e
        return threadpool_limits(limits=max(n, 1)), False
    return threadpool_limits(limits=None), False


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (synth, fuse, train, infer, eval, export)")
        cfg = load_config(args.config)
        limiter, det = _thread_limit(args.deterministic)
        args.deterministic = det
    except UsageError as e:
        print(f"sis3d: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    from .pipeline import DivergenceDetected

    timer = sio.StageTimer()
    try:
        with limiter:
            COMMANDS[args.command](args, cfg, timer)
    except DivergenceDetected as e:
        print(f"sis3d: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError, KeyError, sio.GridFormatError, CheckpointError, ShapeMismatch, MetaMismatch,
            EmptyCrop, RuntimeError) as e:
        print(f"sis3d: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
