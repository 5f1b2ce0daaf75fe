#!/usr/bin/env python3
"""Desk-scale end-to-end experiment: corpus -> training -> held-out AP.

Generates a synthetic corpus, trains the small model configuration on it,
then reports held-out scene AP against two references: a randomly initialized
model (floor) and the ground-truth labels replayed as detections (ceiling).

Typical run (~10 min on a laptop CPU):

    python scripts/run_desk_scale.py --out runs/desk
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np

from flexlog.datagen import DatagenConfig, generate_dataset, synthesize_scene
from flexlog.evaluation import average_precision, build_eval_objects
from flexlog.guidance import GuidanceSource
from flexlog.model import ModelConfig, init_params, save_checkpoint, train
from flexlog.pipeline import DetectConfig, NoRegions, detect


def mean_scene_ap(scene_seeds, params, anchors, config, k=48):
    aps = []
    for s in scene_seeds:
        scene, _labels = synthesize_scene((0, s), 4, 40)
        objects = build_eval_objects(scene.objects, seed=0)
        try:
            res = detect(scene.cloud(), scene.depth_mm.shape,
                         GuidanceSource(mode="uniform_grid", payload=None),
                         params, anchors, config, DetectConfig(k=k))
            detections = [g.grasp for g in res.grasps]
        except NoRegions:
            detections = []
        aps.append(average_precision(detections, objects).ap)
    return float(np.mean(aps)), aps


def oracle_ap(scene_seeds):
    aps = []
    for s in scene_seeds:
        scene, labels = synthesize_scene((0, s), 4, 40)
        objects = build_eval_objects(scene.objects, seed=0)
        order = sorted(range(len(labels.grasps)),
                       key=lambda i: (-labels.grasps[i].score, i))[:50]
        aps.append(average_precision([labels.grasps[i] for i in order],
                                     objects).ap)
    return float(np.mean(aps))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk", help="output directory")
    ap.add_argument("--scenes", type=int, default=100)
    ap.add_argument("--heldout", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=None,
                    help="override the small config's epoch count")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    gen_cfg = DatagenConfig(seed=args.seed, scene_count=args.scenes,
                            cell_px=12, threshold=0.25, noise_frac=0.05)
    t0 = time.perf_counter()
    samples, stats = generate_dataset(gen_cfg)
    t_gen = time.perf_counter() - t0
    print(f"[gen] {stats.regions} regions ({stats.labeled_regions} labeled, "
          f"{stats.labels} labels) from {stats.scenes} scenes in {t_gen:.0f}s",
          flush=True)

    config = ModelConfig.small()
    if args.epochs is not None:
        config = ModelConfig.small(epochs=args.epochs)
    t0 = time.perf_counter()
    result = train(samples, config, rng_seed=args.seed)
    t_train = time.perf_counter() - t0
    hist = [h for h in result.history if "total" in h]
    print(f"[train] {t_train / 60:.1f} min, loss {hist[0]['total']:.3f} -> "
          f"{hist[-1]['total']:.3f}, theta_acc {hist[-1]['theta_acc']:.3f}",
          flush=True)
    save_checkpoint(out / "model.flxp", result.params, result.anchors, config)

    heldout = range(args.scenes, args.scenes + args.heldout)
    ap_model, per_scene = mean_scene_ap(heldout, result.params,
                                        result.anchors, config)
    ap_floor, _ = mean_scene_ap(heldout, init_params(config, rng_seed=1),
                                result.anchors, config)
    ap_ceiling = oracle_ap(heldout)
    ratio = ap_model / max(ap_floor, 1e-12)
    print(f"[eval] AP {ap_model:.4f} | random floor {ap_floor:.4f} "
          f"({ratio:.1f}x) | label ceiling {ap_ceiling:.4f}", flush=True)

    (out / "report.json").write_text(json.dumps({
        "regions": stats.regions, "labels": stats.labels,
        "gen_seconds": t_gen, "train_seconds": t_train,
        "ap": ap_model, "ap_random_floor": ap_floor,
        "ap_label_ceiling": ap_ceiling, "ratio_over_floor": ratio,
        "per_scene_ap": per_scene,
    }, indent=2) + "\n")
    print(f"[done] wrote {out / 'model.flxp'} and {out / 'report.json'}")


if __name__ == "__main__":
    main()
