#!/usr/bin/env python3
"""Sweep the region count K and render spliced confidence heatmaps.

For one synthetic scene (or a saved scene directory), runs grid-guided
detection at each K, splices the per-region best scores back into image
space, and writes one PNG per K plus a painted-cell summary. The painted
area should grow monotonically with K as coverage of the scene increases.

    python scripts/sweep_heatmap.py --checkpoint runs/desk/model.flxp
    python scripts/sweep_heatmap.py --scene-dir scenes/scene_0003 --sweep 8,32,128
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from flexlog import sceneio
from flexlog.datagen import synthesize_scene
from flexlog.guidance import GuidanceSource
from flexlog.model import ModelConfig, init_params, load_checkpoint
from flexlog.pipeline import DetectConfig, detect
from flexlog.postproc import splice_heatmap


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", help="trained model; random init if omitted")
    ap.add_argument("--scene-dir", help="saved scene directory; synthesized if omitted")
    ap.add_argument("--scene-seed", type=int, default=0)
    ap.add_argument("--sweep", default="12,48,192", help="comma-separated K values")
    ap.add_argument("--out", default="heatmaps")
    args = ap.parse_args()

    if args.checkpoint:
        params, anchors, config = load_checkpoint(args.checkpoint)
    else:
        config = ModelConfig(embed_dim=16)
        params = init_params(config, rng_seed=0)
        grid = np.linspace(-1.2, 1.2, config.n_anchor)
        from flexlog.model import AnchorSet

        anchors = AnchorSet(beta_anchors=grid, gamma_anchors=grid.copy())

    if args.scene_dir:
        scene, _labels = sceneio.load_scene(args.scene_dir)
    else:
        scene, _labels = synthesize_scene((args.scene_seed, 0), 4, 20)

    cloud = scene.cloud()
    h, w = scene.depth_mm.shape
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in (int(x) for x in args.sweep.split(",")):
        res = detect(cloud, (h, w),
                     GuidanceSource(mode="uniform_grid", payload=None),
                     params, anchors, config, DetectConfig(k=k))
        heat = splice_heatmap(
            [(r.frame, v) for r, v in zip(res.regions, res.region_best)], h, w)
        painted = int(np.count_nonzero(heat))
        path = out / f"heatmap_k{k}.png"
        sceneio.save_heatmap_png(path, heat)
        print(f"k={k:4d} regions={len(res.regions):4d} painted_cells={painted:6d} -> {path}")


if __name__ == "__main__":
    main()
