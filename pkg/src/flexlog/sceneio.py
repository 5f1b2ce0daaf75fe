"""Scene directory persistence.

A scene on disk is a directory of four files: depth.png (16-bit grayscale in
depth_scale units), intrinsics.json, labels.json (grasps + objects + label
provenance), and mask.png (8-bit instance ids, 0 = table). Everything written
here reads back equal up to the stated quantizations.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .cloud import Intrinsics
from .datagen import Scene, SceneLabels
from .geometry import Grasp
from .primitives import SceneObject


def save_scene(directory, scene: Scene, labels: SceneLabels) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    Image.fromarray(scene.depth_mm.astype(np.uint16)).save(d / "depth.png")
    Image.fromarray(labels.mask.astype(np.uint8)).save(d / "mask.png")
    (d / "intrinsics.json").write_text(json.dumps(scene.intrinsics.to_json(), indent=1))
    recs = []
    for i, g in enumerate(labels.grasps):
        rec = g.to_json()
        rec["object_id"] = int(labels.object_ids[i])
        rec["mu_min"] = float(labels.mu_min[i])
        rec["contacts"] = labels.contact_points[i].tolist()
        rec["contact_normals"] = labels.contact_normals[i].tolist()
        recs.append(rec)
    doc = {
        "table_z": scene.table_z,
        "objects": [o.to_json() for o in scene.objects],
        "grasps": recs,
    }
    (d / "labels.json").write_text(json.dumps(doc, indent=1))


def load_scene(directory) -> tuple[Scene, SceneLabels]:
    d = Path(directory)
    depth_mm = np.asarray(Image.open(d / "depth.png"), dtype=np.uint16)
    mask = np.asarray(Image.open(d / "mask.png"), dtype=np.int32)
    intr = Intrinsics.from_json(json.loads((d / "intrinsics.json").read_text()))
    doc = json.loads((d / "labels.json").read_text())
    objects = [SceneObject.from_json(o) for o in doc["objects"]]
    grasps, obj_ids, mu_min, cpts, cnrm = [], [], [], [], []
    for rec in doc["grasps"]:
        grasps.append(Grasp.from_json(rec))
        obj_ids.append(rec["object_id"])
        mu_min.append(rec["mu_min"])
        cpts.append(rec["contacts"])
        cnrm.append(rec["contact_normals"])
    scene = Scene(depth_mm=depth_mm, intrinsics=intr, objects=objects,
                  table_z=float(doc.get("table_z", 0.6)))
    labels = SceneLabels(
        grasps=grasps, object_ids=np.array(obj_ids, dtype=np.int32), mask=mask,
        mu_min=np.array(mu_min, dtype=np.float64),
        contact_points=np.array(cpts, dtype=np.float64).reshape(-1, 2, 3),
        contact_normals=np.array(cnrm, dtype=np.float64).reshape(-1, 2, 3))
    return scene, labels


def save_heatmap_png(path, heatmap: np.ndarray) -> None:
    """8-bit PNG of a [0,1] map, scaled by 255."""
    img = np.clip(np.round(heatmap * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)
