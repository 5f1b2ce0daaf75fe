"""Command-line entry points: datagen, train, detect, eval, heatmap, serve.

Options resolve in three layers: built-in defaults, then a TOML config file
(--config), then explicit flags — flags always win. Exit codes: 2 when the
requested inputs contain no scenes, 3 when guidance yields zero usable
regions; other failures exit 1 with a message.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import datagen, sceneio
from .evaluation import FrictionGrades, average_precision, build_eval_objects
from .guidance import GuidanceSource
from .model import ModelConfig, load_checkpoint, save_checkpoint, train
from .pipeline import DetectConfig, DetectResult, NoRegions, detect
from .postproc import splice_heatmap

EXIT_NO_SCENES = 2
EXIT_NO_REGIONS = 3

# CLI mode names -> guidance module mode names
MODE_MAP = {
    "grid": "uniform_grid",
    "heatmap": "heatmap",
    "graspness": "graspness_points",
    "bbox": "bbox",
    "mask": "mask",
    "click": "click",
}


def _fail(message: str, code: int = 1) -> None:
    print(f"flexlog: {message}", file=sys.stderr)
    raise SystemExit(code)


def _apply_layers(args: argparse.Namespace, defaults) -> None:
    """defaults < TOML < explicit flags, written back onto `args`."""
    overrides = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            _fail(f"config file {path} does not exist")
        overrides = tomllib.loads(path.read_text())
    for f in fields(defaults):
        if getattr(args, f.name, None) is None:
            value = overrides.get(f.name, getattr(defaults, f.name))
            setattr(args, f.name, value)


def _scene_dirs(root: Path) -> list[Path]:
    return sorted(p for p in root.iterdir() if (p / "depth.png").exists())


def _load_required_scene(path_str: str):
    path = Path(path_str)
    if not (path / "depth.png").exists():
        _fail(f"{path} is not a scene directory (no depth.png)", EXIT_NO_SCENES)
    return sceneio.load_scene(path)


def _grasp_records(result: DetectResult) -> list[dict]:
    records = []
    for d in result.grasps:
        rec = d.grasp.to_json()
        rec["region_index"] = d.region_index
        rec["combo"] = list(d.combo)
        pix = result.regions[d.region_index].frame.source_pixel
        rec["source_pixel"] = None if pix is None else list(pix)
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# datagen


@dataclass
class DatagenDefaults:
    scenes: int = 20
    seed: int = 0
    objects: int = 4
    labels_per_object: int = 40
    cell: int = 8
    threshold: float = 0.2
    noise_frac: float = 0.1
    min_label_score: float = 0.5
    radius: float = 0.08
    n_points: int = 512
    out: str = "dataset.flxg"


def cmd_datagen(args: argparse.Namespace) -> None:
    _apply_layers(args, DatagenDefaults())
    config = datagen.DatagenConfig(
        seed=args.seed, scene_count=args.scenes, object_count=args.objects,
        labels_per_object=args.labels_per_object, cell_px=args.cell,
        threshold=args.threshold, noise_frac=args.noise_frac,
        min_label_score=args.min_label_score, region_radius=args.radius,
        region_points=args.n_points)

    samples = []
    stats = datagen.DatasetStats()
    if args.scene_dir:
        dirs = _scene_dirs(Path(args.scene_dir))
        if not dirs:
            _fail("no scenes", EXIT_NO_SCENES)
        pairs = [sceneio.load_scene(d) for d in dirs]
    else:
        if args.scenes < 1:
            _fail("no scenes", EXIT_NO_SCENES)
        pairs = []
        for s in range(args.scenes):
            scene, labels = datagen.synthesize_scene(
                (config.seed, s), config.object_count, config.labels_per_object)
            pairs.append((scene, labels))
            if args.save_scenes:
                out = Path(args.save_scenes) / f"scene_{s:04d}"
                out.mkdir(parents=True, exist_ok=True)
                sceneio.save_scene(out, scene, labels)
    for s, (scene, labels) in enumerate(pairs):
        scene_samples = datagen.scene_region_samples(
            scene, labels, config, rng_seed=(config.seed, s, 1))
        stats.scenes += 1
        stats.regions += len(scene_samples)
        stats.labeled_regions += sum(1 for r in scene_samples if r.labels)
        stats.labels += sum(len(r.labels) for r in scene_samples)
        samples.extend(scene_samples)

    datagen.write_dataset(samples, args.out)
    stats_doc = {"scenes": stats.scenes, "regions": stats.regions,
                 "labeled_regions": stats.labeled_regions,
                 "labels": stats.labels,
                 "invalid_fraction": stats.invalid_fraction}
    stats_path = Path(args.stats) if args.stats else Path(str(args.out) + ".stats.json")
    stats_path.write_text(json.dumps(stats_doc, indent=2) + "\n")
    print(f"scenes={stats.scenes} regions={stats.regions} "
          f"labeled_regions={stats.labeled_regions} labels={stats.labels} "
          f"invalid_fraction={stats.invalid_fraction:.4f}")
    print(f"wrote {args.out} and {stats_path}")


# ---------------------------------------------------------------------------
# train


@dataclass
class TrainDefaults:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    embed_dim: int = 64
    k_theta: int = 6
    n_anchor: int = 7
    n_points: int = 512
    out: str = "model.flxp"
    history: str = ""


def cmd_train(args: argparse.Namespace) -> None:
    _apply_layers(args, TrainDefaults())
    if not Path(args.dataset).exists():
        _fail(f"dataset {args.dataset} does not exist")
    samples = datagen.read_dataset(args.dataset)
    config = ModelConfig(n_points=args.n_points, k_theta=args.k_theta,
                         n_anchor=args.n_anchor, embed_dim=args.embed_dim,
                         lr=args.lr, batch_size=args.batch_size,
                         epochs=args.epochs)
    result = train(samples, config, rng_seed=args.seed)
    save_checkpoint(args.out, result.params, result.anchors, config)

    history_path = Path(args.history) if args.history else Path(str(args.out) + ".history.csv")
    keys = ["epoch", "total", "theta_cls", "theta_reg", "width", "offset",
            "anchor", "theta_acc", "lr"]
    with open(history_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys, extrasaction="ignore")
        writer.writeheader()
        for rec in result.history:
            writer.writerow(rec)
    last = next((h for h in reversed(result.history) if "total" in h), None)
    if last:
        print(f"epochs={len(result.history)} final_loss={last['total']:.6f} "
              f"theta_acc={last['theta_acc']:.3f}")
    print(f"wrote {args.out} and {history_path}")


# ---------------------------------------------------------------------------
# detect


@dataclass
class DetectDefaults:
    mode: str = "grid"
    k: int = 48
    grid: int = 12
    radius: float = 0.08
    n_points: int = 512
    top: int = 50
    top_per_region: int = 8
    seed: int = 0
    out: str = "grasps.json"


def _load_guidance(args: argparse.Namespace) -> GuidanceSource:
    mode = MODE_MAP.get(args.mode)
    if mode is None:
        _fail(f"unknown mode {args.mode!r} (choose from {sorted(MODE_MAP)})")
    if mode == "uniform_grid":
        return GuidanceSource(mode=mode, payload=args.grid)
    if mode == "click":
        if not args.pixel:
            _fail("--mode click needs --pixel U,V")
        u, v = (int(x) for x in args.pixel.split(","))
        return GuidanceSource(mode=mode, payload=(u, v))
    if mode == "bbox":
        if not args.bbox:
            _fail("--mode bbox needs --bbox U0,V0,U1,V1")
        return GuidanceSource(
            mode=mode, payload=tuple(int(x) for x in args.bbox.split(",")))
    if mode == "heatmap":
        if not args.heatmap_file:
            _fail("--mode heatmap needs --heatmap-file (PNG or .npy)")
        path = Path(args.heatmap_file)
        if path.suffix == ".npy":
            heat = np.load(path)
        else:
            from PIL import Image
            heat = np.asarray(Image.open(path), dtype=np.float64) / 255.0
        return GuidanceSource(mode=mode, payload=heat)
    if mode == "mask":
        if not args.mask_file:
            _fail("--mode mask needs --mask-file (PNG, nonzero = target)")
        from PIL import Image
        mask = np.asarray(Image.open(Path(args.mask_file))) != 0
        return GuidanceSource(mode=mode, payload=mask)
    if not args.points_file:
        _fail("--mode graspness needs --points-file (.npz with points, scores)")
    blob = np.load(args.points_file)
    return GuidanceSource(mode=mode, payload=(blob["points"], blob["scores"]))


def _run_detect(scene, args: argparse.Namespace):
    params, anchors, model_config = load_checkpoint(args.checkpoint)
    cloud = scene.cloud()
    h, w = scene.depth_mm.shape
    source = _load_guidance(args)
    config = DetectConfig(k=args.k, grid_px=args.grid, radius=args.radius,
                          n_points=args.n_points, top_n=args.top,
                          top_per_region=args.top_per_region)
    result = detect(cloud, (h, w), source, params, anchors, model_config,
                    config, intrinsics=scene.intrinsics)
    return result, (h, w)


def cmd_detect(args: argparse.Namespace) -> None:
    _apply_layers(args, DetectDefaults())
    if not Path(args.checkpoint).exists():
        _fail(f"checkpoint {args.checkpoint} does not exist")
    scene, _labels = _load_required_scene(args.scene)
    try:
        result, (h, w) = _run_detect(scene, args)
    except NoRegions as e:
        _fail(str(e), EXIT_NO_REGIONS)
    doc = {"mode": args.mode, "k": args.k, "radius": args.radius,
           "grasps": _grasp_records(result)}
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    if args.heatmap_png:
        heat = splice_heatmap(
            [(r.frame, s) for r, s in zip(result.regions, result.region_best)],
            h, w)
        sceneio.save_heatmap_png(args.heatmap_png, heat)
    print(f"{len(result.grasps)} grasps from {len(result.regions)} regions "
          f"-> {args.out}")


# ---------------------------------------------------------------------------
# eval


@dataclass
class EvalDefaults(DetectDefaults):
    out: str = "report.json"
    csv_out: str = ""
    surface_seed: int = 0


def cmd_eval(args: argparse.Namespace) -> None:
    _apply_layers(args, EvalDefaults())
    if not Path(args.checkpoint).exists():
        _fail(f"checkpoint {args.checkpoint} does not exist")
    dirs = _scene_dirs(Path(args.scenes))
    if not dirs:
        _fail("no scenes", EXIT_NO_SCENES)
    grades = FrictionGrades()
    per_scene = []
    matrices = []
    for d in dirs:
        scene, _labels = sceneio.load_scene(d)
        objects = build_eval_objects(scene.objects, seed=args.surface_seed)
        try:
            result, _hw = _run_detect(scene, args)
            detections = [g.grasp for g in result.grasps]
        except NoRegions:
            detections = []
        report = average_precision(detections, objects, grades=grades)
        per_scene.append({"scene": d.name, "ap": report.ap,
                          "per_grade": {f"{mu:g}": report.per_grade[mu]
                                        for mu in grades.grades}})
        matrices.append(report)
    ap = float(np.mean([s["ap"] for s in per_scene]))
    per_grade = {f"{mu:g}": float(np.mean([m.per_grade[mu] for m in matrices]))
                 for mu in grades.grades}
    doc = {"ap": ap, "per_grade": per_grade, "per_scene": per_scene}
    Path(args.out).write_text(json.dumps(doc, indent=2) + "\n")
    csv_path = Path(args.csv_out) if args.csv_out else Path(str(args.out) + ".csv")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scene", "ap"] + [f"ap_mu_{mu}" for mu in grades.grades])
        for s in per_scene:
            writer.writerow([s["scene"], f"{s['ap']:.6f}"]
                            + [f"{v:.6f}" for v in s["per_grade"].values()])
        writer.writerow(["mean", f"{ap:.6f}"]
                        + [f"{v:.6f}" for v in per_grade.values()])
    print(f"ap={ap:.4f} over {len(per_scene)} scenes -> {args.out}")


# ---------------------------------------------------------------------------
# heatmap


@dataclass
class HeatmapDefaults(DetectDefaults):
    k_sweep: str = "12,48,192"
    out: str = "heatmaps"


def cmd_heatmap(args: argparse.Namespace) -> None:
    _apply_layers(args, HeatmapDefaults())
    if not Path(args.checkpoint).exists():
        _fail(f"checkpoint {args.checkpoint} does not exist")
    scene, _labels = _load_required_scene(args.scene)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = []
    for k in (int(x) for x in str(args.k_sweep).split(",")):
        args.k = k
        try:
            result, (h, w) = _run_detect(scene, args)
        except NoRegions as e:
            _fail(str(e), EXIT_NO_REGIONS)
        heat = splice_heatmap(
            [(r.frame, s) for r, s in zip(result.regions, result.region_best)],
            h, w)
        painted = int(np.count_nonzero(heat))
        counts.append((k, painted))
        sceneio.save_heatmap_png(out_dir / f"heatmap_k{k}.png", heat)
    for k, painted in counts:
        print(f"k={k} painted_cells={painted}")
    print(f"wrote {len(counts)} heatmaps -> {out_dir}")


# ---------------------------------------------------------------------------
# serve


def cmd_serve(args: argparse.Namespace) -> None:
    import uvicorn

    from .service import build_app

    if not Path(args.checkpoint).exists():
        _fail(f"checkpoint {args.checkpoint} does not exist")
    if not _scene_dirs(Path(args.scenes)):
        _fail("no scenes", EXIT_NO_SCENES)
    host, _, port = str(args.serve).rpartition(":")
    app = build_app(Path(args.scenes), Path(args.checkpoint))
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="warning")


# ---------------------------------------------------------------------------
# parser


def _add_config_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file; explicit flags win")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexlog",
        description="Guidance-driven regional grasp detection on depth scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="synthesize scenes and write a region dataset")
    _add_config_flag(p)
    p.add_argument("--out")
    p.add_argument("--stats")
    p.add_argument("--scenes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--objects", type=int)
    p.add_argument("--labels-per-object", dest="labels_per_object", type=int)
    p.add_argument("--cell", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--noise-frac", dest="noise_frac", type=float)
    p.add_argument("--min-label-score", dest="min_label_score", type=float)
    p.add_argument("--radius", type=float)
    p.add_argument("--n-points", dest="n_points", type=int)
    p.add_argument("--scene-dir", dest="scene_dir",
                   help="build regions from saved scenes instead of synthesizing")
    p.add_argument("--save-scenes", dest="save_scenes",
                   help="also persist the synthesized scenes under this directory")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train a model on a region dataset")
    _add_config_flag(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.add_argument("--history")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--k-theta", dest="k_theta", type=int)
    p.add_argument("--n-anchor", dest="n_anchor", type=int)
    p.add_argument("--n-points", dest="n_points", type=int)
    p.set_defaults(func=cmd_train)

    def add_detect_flags(p: argparse.ArgumentParser) -> None:
        _add_config_flag(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--mode")
        p.add_argument("--k", type=int)
        p.add_argument("--grid", type=int)
        p.add_argument("--radius", type=float)
        p.add_argument("--n-points", dest="n_points", type=int)
        p.add_argument("--top", type=int)
        p.add_argument("--top-per-region", dest="top_per_region", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--pixel", help="U,V for --mode click")
        p.add_argument("--bbox", help="U0,V0,U1,V1 for --mode bbox")
        p.add_argument("--heatmap-file", dest="heatmap_file")
        p.add_argument("--mask-file", dest="mask_file")
        p.add_argument("--points-file", dest="points_file")

    p = sub.add_parser("detect", help="detect grasps on one scene")
    add_detect_flags(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--out")
    p.add_argument("--heatmap-png", dest="heatmap_png")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="AP evaluation over a scene directory")
    add_detect_flags(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out")
    p.add_argument("--csv", dest="csv_out")
    p.add_argument("--surface-seed", dest="surface_seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="spliced heatmap PNGs for a sweep of K")
    add_detect_flags(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--k-sweep", dest="k_sweep")
    p.add_argument("--out")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("serve", help="HTTP service for interactive grasping")
    _add_config_flag(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--serve", default="127.0.0.1:8731", help="ADDR:PORT")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> None:
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
